"""
Benchmark Tool
Times and memory-profiles one aligner block against a single-head attention layer
across sequence lengths
"""

import logging
import os
import platform
import time
import tracemalloc
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from exceptions import ValidationError
from models import BenchReport, BenchRow
from tools.aligner import AlignerBlock, block_forward
from tools.numerics import Tensor, get_default_dtype, no_grad, set_default_dtype
from tools.ssm import SsmMode

logger = logging.getLogger(__name__)

SLOPE_MIN_LENGTH = 512
MIN_TIMED_SECONDS = 2e-3


@dataclass
class AttentionParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    @classmethod
    def init(cls, d_model: int, rng: np.random.Generator, dtype=np.float32) -> "AttentionParams":
        scale = d_model ** -0.5
        return cls(*(rng.normal(0.0, scale, size=(d_model, d_model)).astype(dtype) for _ in range(3)))


def attention_baseline_forward(Z, params: AttentionParams, return_weights: bool = False):
    """
    softmax(Q K^T / sqrt(D)) V with Q, K, V linear in Z

    Materializes the full (L, L) score matrix, so time and memory are quadratic in L.
    """
    Z = np.asarray(Z, dtype=params.w_q.dtype)
    Q, K, V = Z @ params.w_q, Z @ params.w_k, Z @ params.w_v
    scores = (Q @ K.T) / np.sqrt(Z.shape[1]).astype(Z.dtype)
    scores -= scores.max(axis=1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=1, keepdims=True)
    out = weights @ V
    return (out, weights) if return_weights else out


def fit_loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> Optional[float]:
    """Least-squares slope of log(y) against log(x); None with fewer than two usable points"""
    points = [(x, y) for x, y in zip(xs, ys) if x > 0 and y > 0]
    if len(points) < 2:
        return None
    x, y = np.log(np.array(points, dtype=float)).T
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def environment_snapshot() -> Dict[str, str]:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "system": f"{platform.system()} {platform.release()}",
        "omp_num_threads": os.getenv("OMP_NUM_THREADS", "unset"),
        "openblas_num_threads": os.getenv("OPENBLAS_NUM_THREADS", "unset"),
    }


class BenchmarkTool:
    """
    Single-threaded timing and peak-allocation harness

    Peak bytes come from tracemalloc, which sees numpy buffers; this host-memory figure
    stands in for accelerator memory.
    """

    def __init__(
        self,
        d_model: int = 64,
        seed: int = 0,
        d_inner: Optional[int] = None,
        state_size: int = 8,
        scan: str = "recurrent",
    ):
        """Initialize both components with seeded float32 weights"""
        if scan not in ("recurrent", "parallel"):
            raise ValidationError(f"scan must be 'recurrent' or 'parallel', got {scan!r}")
        self.d_model = d_model
        self.seed = seed
        self.scan = scan
        self.d_inner = d_inner or 2 * d_model
        self.state_size = state_size

        previous = get_default_dtype()
        set_default_dtype(np.float32)
        try:
            rng = np.random.default_rng(seed)
            mode = SsmMode.SELECTIVE_PARALLEL_SCAN if scan == "parallel" else SsmMode.SELECTIVE_RECURRENT
            self.block = AlignerBlock(d_model, self.d_inner, state_size, rng, ssm_mode=mode)
            self.attention = AttentionParams.init(d_model, rng)
        finally:
            set_default_dtype(previous)
        logger.info(f"BenchmarkTool initialized (D={d_model}, D_inner={self.d_inner}, scan={scan})")

    def components(self) -> Dict[str, Callable[[np.ndarray], object]]:
        def aligner(Z):
            with no_grad():
                return block_forward(self.block, Tensor(Z, dtype=np.float32))

        return {
            "aligner_block": aligner,
            "attention_baseline": lambda Z: attention_baseline_forward(Z, self.attention),
        }

    def _inputs(self, length: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, length])
        return rng.normal(size=(length, self.d_model)).astype(np.float32)

    def _calibrate(self, run: Callable, Z: np.ndarray) -> int:
        resolution = time.get_clock_info("perf_counter").resolution
        floor = max(MIN_TIMED_SECONDS, 100 * resolution)
        inner = 1
        while True:
            started = time.perf_counter()
            for _ in range(inner):
                run(Z)
            if time.perf_counter() - started >= floor or inner >= 1 << 16:
                return inner
            inner *= 2

    def measure(self, name: str, run: Callable, length: int, repeats: int, warmup: int) -> BenchRow:
        Z = self._inputs(length)
        for _ in range(warmup):
            run(Z)
        inner = self._calibrate(run, Z)
        if inner > 1:
            logger.warning(f"{name} at L={length} is below timer resolution, timing {inner} calls per sample")

        samples = []
        for _ in range(repeats):
            started = time.perf_counter()
            for _ in range(inner):
                run(Z)
            samples.append((time.perf_counter() - started) * 1e3 / inner)

        tracemalloc.start()
        try:
            tracemalloc.reset_peak()
            baseline, _ = tracemalloc.get_traced_memory()
            run(Z)
            _, peak = tracemalloc.get_traced_memory()
        finally:
            tracemalloc.stop()

        p10, median, p90 = np.percentile(samples, [10, 50, 90])
        return BenchRow(
            component=name,
            length=length,
            median_ms=float(median),
            p10_ms=float(p10),
            p90_ms=float(p90),
            peak_bytes=int(peak - baseline),
            inner_iterations=inner,
        )

    def run_bench(self, L_values: Sequence[int], repeats: int = 9, warmup: int = 3) -> BenchReport:
        """
        Measure every component at every length

        Args:
            L_values: Sequence lengths
            repeats: Timed repetitions per point (>= 5)
            warmup: Untimed calls before timing (>= 1)
        """
        if repeats < 5 or warmup < 1:
            raise ValidationError("run_bench needs repeats >= 5 and warmup >= 1")
        lengths = sorted(int(length) for length in L_values)
        if not lengths or lengths[0] < 1:
            raise ValidationError("L_values must be positive lengths")

        rows: List[BenchRow] = []
        for name, run in self.components().items():
            for length in lengths:
                row = self.measure(name, run, length, repeats, warmup)
                logger.info(f"{name} L={length}: median {row.median_ms:.3f} ms, peak {row.peak_bytes} B")
                rows.append(row)

        report = BenchReport(
            rows=rows,
            environment=environment_snapshot(),
            config={
                "d_model": self.d_model,
                "d_inner": self.d_inner,
                "state_size": self.state_size,
                "scan": self.scan,
                "seed": self.seed,
                "repeats": repeats,
                "warmup": warmup,
                "lengths": lengths,
            },
        )
        report.sort_rows()
        report.slopes = self.slopes(report.rows)
        return report

    @staticmethod
    def slopes(rows: Sequence[BenchRow]) -> Dict[str, Dict[str, Optional[float]]]:
        """Log-log time and memory slopes per component, over L >= 512 when at least two such points exist"""
        fitted: Dict[str, Dict[str, Optional[float]]] = {}
        for component in sorted({row.component for row in rows}):
            points = [row for row in rows if row.component == component]
            window = [row for row in points if row.length >= SLOPE_MIN_LENGTH]
            if len(window) < 2:
                window = points
            lengths = [row.length for row in window]
            fitted[component] = {
                "time": fit_loglog_slope(lengths, [row.median_ms for row in window]),
                "memory": fit_loglog_slope(lengths, [row.peak_bytes for row in window]),
            }
        return fitted

