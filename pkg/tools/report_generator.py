"""
Report Generator Tool for grounding runs
Writes the JSON/CSV contract outputs, PDF summaries, PNG plots and output manifests
"""

import csv
import hashlib
import json
import logging
import os
from datetime import datetime
from io import BytesIO, StringIO
from typing import Any, Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from reportlab.lib import colors
from reportlab.lib.pagesizes import letter
from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

from models import BenchReport
from tools.container import atomic_write_bytes

logger = logging.getLogger(__name__)

TRAIN_LOG_HEADER = ("step", "total", "l_f", "l_reg", "l_inter", "l_intra")
BENCH_CSV_HEADER = ("component", "L", "median_ms", "p10_ms", "p90_ms", "peak_bytes", "inner_iterations")
MANIFEST_FILE = "manifest.json"


def sha256_of(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as stream:
        for chunk in iter(lambda: stream.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


class ReportGeneratorTool:
    """
    Report generator for training, evaluation, ablation and benchmark runs
    Every written path is remembered so the run can finish with a manifest
    """

    def __init__(self, out_dir: str):
        """Initialize the report generator under an output directory"""
        self.out_dir = out_dir
        self.produced: List[str] = []
        os.makedirs(out_dir, exist_ok=True)
        logger.info(f"ReportGeneratorTool initialized (out_dir={out_dir})")

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def record(self, path: str) -> str:
        if path not in self.produced:
            self.produced.append(path)
        return path

    # ----- contract outputs -----

    def write_json(self, name: str, payload: Dict[str, Any]) -> str:
        path = self.path(name)
        atomic_write_bytes(path, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode("utf-8"))
        return self.record(path)

    def write_jsonl(self, name: str, records: Sequence[Dict[str, Any]]) -> str:
        path = self.path(name)
        lines = "".join(json.dumps(record, sort_keys=True) + "\n" for record in records)
        atomic_write_bytes(path, lines.encode("utf-8"))
        return self.record(path)

    def write_csv(self, name: str, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
        buffer = StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        path = self.path(name)
        atomic_write_bytes(path, buffer.getvalue().encode("utf-8"))
        return self.record(path)

    def start_train_log(self, name: str = "train_log.csv", resume: bool = False) -> str:
        """Create the per-step loss log, or keep an existing one when resuming"""
        path = self.path(name)
        if not (resume and os.path.exists(path)):
            with open(path, "w", newline="") as stream:
                csv.writer(stream, lineterminator="\n").writerow(TRAIN_LOG_HEADER)
        return self.record(path)

    def append_train_row(self, path: str, row: Dict[str, float]) -> None:
        with open(path, "a", newline="") as stream:
            csv.writer(stream, lineterminator="\n").writerow([row[key] for key in TRAIN_LOG_HEADER])

    def write_similarity(self, name: str, matrix: np.ndarray) -> str:
        """L_q x L_v cosine matrix, one row per query token"""
        rows = [[repr(float(value)) for value in row] for row in np.asarray(matrix)]
        header = [f"clip_{index}" for index in range(np.asarray(matrix).shape[1])]
        return self.write_csv(name, header, rows)

    def write_bench(self, report: BenchReport) -> List[str]:
        rows = [
            [r.component, r.length, f"{r.median_ms:.6f}", f"{r.p10_ms:.6f}", f"{r.p90_ms:.6f}", r.peak_bytes, r.inner_iterations]
            for r in report.rows
        ]
        written = [self.write_csv("bench.csv", BENCH_CSV_HEADER, rows)]
        written.append(
            self.write_json(
                "bench_summary.json",
                {"slopes": report.slopes, "environment": report.environment, "config": report.config},
            )
        )
        for optional in (self.plot_scaling(report), self.bench_pdf(report)):
            if optional:
                written.append(optional)
        return written

    # ----- best-effort artifacts -----

    def plot_scaling(self, report: BenchReport, name: str = "bench.png") -> Optional[str]:
        """Log-log time and memory curves per component"""
        try:
            fig, (time_axis, memory_axis) = plt.subplots(1, 2, figsize=(10, 4))
            for component in sorted({row.component for row in report.rows}):
                rows = [row for row in report.rows if row.component == component]
                lengths = [row.length for row in rows]
                slope = report.slopes.get(component, {}).get("time")
                label = component if slope is None else f"{component} (slope {slope:.2f})"
                time_axis.loglog(lengths, [row.median_ms for row in rows], marker="o", label=label)
                memory_axis.loglog(lengths, [max(row.peak_bytes, 1) for row in rows], marker="o", label=component)
            time_axis.set_xlabel("sequence length L")
            time_axis.set_ylabel("median time (ms)")
            memory_axis.set_xlabel("sequence length L")
            memory_axis.set_ylabel("peak allocation (bytes)")
            time_axis.legend()
            memory_axis.legend()
            fig.tight_layout()
            path = self.path(name)
            fig.savefig(path, dpi=120, bbox_inches="tight")
            plt.close(fig)
            return self.record(path)
        except Exception as e:
            logger.error(f"Error plotting scaling curves: {str(e)}")
            return None

    def plot_heatmap(self, name: str, matrix: np.ndarray, title: str) -> Optional[str]:
        try:
            fig, axis = plt.subplots(figsize=(8, 3))
            image = axis.imshow(np.asarray(matrix), aspect="auto", cmap="viridis", vmin=-1.0, vmax=1.0)
            axis.set_xlabel("video clip")
            axis.set_ylabel("query token")
            axis.set_title(title)
            fig.colorbar(image, ax=axis)
            path = self.path(name)
            fig.savefig(path, dpi=120, bbox_inches="tight")
            plt.close(fig)
            return self.record(path)
        except Exception as e:
            logger.error(f"Error plotting heatmap {name}: {str(e)}")
            return None

    def generate_pdf_report(self, title: str, summary: str, tables: Dict[str, List[List[str]]]) -> BytesIO:
        """
        Generate a PDF with a summary paragraph and one table per section

        Args:
            title: Report title
            summary: Opening paragraph
            tables: Section heading -> rows, the first row being the header

        Returns:
            BytesIO object containing PDF data
        """
        logger.info(f"Generating PDF report '{title}'")

        buffer = BytesIO()
        doc = SimpleDocTemplate(buffer, pagesize=letter)
        styles = getSampleStyleSheet()
        title_style = ParagraphStyle(
            "ReportTitle",
            parent=styles["Heading1"],
            fontSize=18,
            spaceAfter=30,
            textColor=colors.darkblue,
        )
        heading_style = ParagraphStyle(
            "ReportHeading",
            parent=styles["Heading2"],
            fontSize=14,
            spaceAfter=12,
            textColor=colors.darkred,
        )

        story = [
            Paragraph(title, title_style),
            Paragraph(f"Generated on: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}", styles["Normal"]),
            Spacer(1, 20),
            Paragraph(summary, styles["Normal"]),
            Spacer(1, 20),
        ]
        for heading, rows in tables.items():
            story.append(Paragraph(heading, heading_style))
            table = Table(rows)
            table.setStyle(TableStyle([
                ("BACKGROUND", (0, 0), (-1, 0), colors.grey),
                ("TEXTCOLOR", (0, 0), (-1, 0), colors.whitesmoke),
                ("ALIGN", (0, 0), (-1, -1), "CENTER"),
                ("FONTNAME", (0, 0), (-1, 0), "Helvetica-Bold"),
                ("BOTTOMPADDING", (0, 0), (-1, 0), 8),
                ("BACKGROUND", (0, 1), (-1, -1), colors.beige),
                ("GRID", (0, 0), (-1, -1), 1, colors.black),
            ]))
            story.append(table)
            story.append(Spacer(1, 20))

        doc.build(story)
        buffer.seek(0)
        logger.info("PDF report generated successfully")
        return buffer

    def save_pdf(self, name: str, title: str, summary: str, tables: Dict[str, List[List[str]]]) -> Optional[str]:
        try:
            buffer = self.generate_pdf_report(title, summary, tables)
            path = self.path(name)
            atomic_write_bytes(path, buffer.getvalue())
            return self.record(path)
        except Exception as e:
            logger.error(f"Error generating PDF report {name}: {str(e)}")
            return None

    def metrics_pdf(self, metrics: Dict[str, float], name: str = "eval_report.pdf", title: str = "Grounding Evaluation") -> Optional[str]:
        rows = [["Metric", "Value"]] + [[key, f"{value:.4f}"] for key, value in metrics.items()]
        summary = (
            f"Moment retrieval R1@0.7 = {metrics.get('r1@0.7', 0.0):.3f}, "
            f"highlight HIT@1 = {metrics.get('hit@1', 0.0):.3f}."
        )
        return self.save_pdf(name, title, summary, {"Metrics": rows})

    def ablation_pdf(self, results: Dict[str, Dict[str, float]], name: str = "ablation_report.pdf") -> Optional[str]:
        keys = ("r1@0.7", "miou", "map_avg", "hit@1", "hd_map")
        rows = [["Variant", *keys]] + [
            [variant, *(f"{scores.get(key, 0.0):.4f}" for key in keys)] for variant, scores in results.items()
        ]
        summary = f"{len(results)} pipeline variants, metrics averaged over seeds."
        return self.save_pdf(name, "Component Ablation", summary, {"Variants": rows})

    def bench_pdf(self, report: BenchReport, name: str = "bench_report.pdf") -> Optional[str]:
        rows = [["Component", "L", "median ms", "peak bytes"]] + [
            [r.component, str(r.length), f"{r.median_ms:.3f}", str(r.peak_bytes)] for r in report.rows
        ]
        slopes = ", ".join(
            f"{component}: time {values.get('time') or float('nan'):.2f}"
            for component, values in report.slopes.items()
        )
        return self.save_pdf(name, "Sequence Length Scaling", f"Fitted log-log slopes: {slopes}.", {"Measurements": rows})

    # ----- manifest -----

    def write_manifest(self, command: str, extra: Optional[Dict[str, Any]] = None) -> str:
        """List every produced file with its SHA-256 checksum"""
        files = [
            {"path": os.path.relpath(path, self.out_dir), "sha256": sha256_of(path), "bytes": os.path.getsize(path)}
            for path in self.produced
            if os.path.exists(path)
        ]
        payload = {"command": command, "created": datetime.now().isoformat(), "files": files}
        payload.update(extra or {})
        path = self.path(MANIFEST_FILE)
        atomic_write_bytes(path, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode("utf-8"))
        logger.info(f"Manifest lists {len(files)} files")
        return path
