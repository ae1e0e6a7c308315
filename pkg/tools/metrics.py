"""
Metrics Tool
Moment retrieval and highlight detection measures: interval IoU, R1@tau, mAP over IoU
thresholds, mIoU, HIT@1, clip-level mAP and top-5 mAP
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from models import EvalRecord, SpanPrediction

logger = logging.getLogger(__name__)

Span = Tuple[float, float]

MAP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
REPORT_KEYS = ("r1@0.5", "r1@0.7", "map@0.5", "map@0.75", "map_avg", "miou", "hd_map", "hit@1", "top5_map")


def interval_iou(a: Span, b: Span) -> float:
    """|a n b| / |a u b| for closed intervals; 0 when the union is empty"""
    overlap = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - overlap
    return overlap / union if union > 0 else 0.0


def _ranked(predictions: Sequence[SpanPrediction]) -> List[SpanPrediction]:
    order = np.argsort([-p.confidence for p in predictions], kind="stable")
    return [predictions[i] for i in order]


def _best_iou(prediction: SpanPrediction, gt_spans: Sequence[Span]) -> float:
    return max((interval_iou((prediction.st, prediction.ed), gt) for gt in gt_spans), default=0.0)


def recall_at_1(records: Sequence[EvalRecord], tau: float) -> float:
    """Fraction of queries whose top-1 span reaches IoU >= tau with any ground-truth span"""
    if len(records) == 0:
        return 0.0
    hits = 0
    for record in records:
        if len(record.predictions) == 0:
            continue
        top = _ranked(record.predictions)[0]
        hits += _best_iou(top, record.gt_spans) >= tau
    return hits / len(records)


def mean_iou(records: Sequence[EvalRecord]) -> float:
    """Mean best IoU of the top-1 span; a query without predictions scores 0"""
    if len(records) == 0:
        return 0.0
    scores = [
        _best_iou(_ranked(r.predictions)[0], r.gt_spans) if len(r.predictions) else 0.0
        for r in records
    ]
    return float(np.mean(scores))


def interpolated_ap(hits: Sequence[bool], num_relevant: int) -> float:
    """Area under the precision-recall curve with precision made monotone from the right"""
    if num_relevant == 0 or len(hits) == 0:
        return 0.0
    hits = np.asarray(hits, dtype=float)
    true_positives = np.cumsum(hits)
    precision = true_positives / np.arange(1, len(hits) + 1)
    recall = true_positives / num_relevant

    recall = np.concatenate([[0.0], recall, [1.0]])
    precision = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    steps = np.flatnonzero(recall[1:] != recall[:-1])
    return float(np.sum((recall[steps + 1] - recall[steps]) * precision[steps + 1]))


def average_precision(record: EvalRecord, tau: float) -> float:
    """
    AP of one query at one IoU threshold

    Predictions are visited in rank order; each one claims the unmatched ground-truth span
    it overlaps most, provided that IoU reaches tau.
    """
    matched = [False] * len(record.gt_spans)
    hits = []
    for prediction in _ranked(record.predictions):
        span = (prediction.st, prediction.ed)
        candidates = [(interval_iou(span, gt), -index) for index, gt in enumerate(record.gt_spans) if not matched[index]]
        best_iou, best = max(candidates, default=(0.0, None))
        hit = best is not None and best_iou >= tau
        if hit:
            matched[-best] = True
        hits.append(hit)
    return interpolated_ap(hits, len(record.gt_spans))


def mean_ap(records: Sequence[EvalRecord], taus: Optional[Sequence[float]] = None) -> Dict[str, float]:
    """
    Per-threshold mAP keyed "map@<tau>" plus "map_avg" over all thresholds

    Args:
        records: Evaluation records
        taus: IoU thresholds; defaults to 0.5, 0.55, ..., 0.95
    """
    taus = MAP_THRESHOLDS if taus is None else tuple(taus)
    report: Dict[str, float] = {}
    for tau in taus:
        scores = [average_precision(record, tau) for record in records]
        report[f"map@{tau:g}"] = float(np.mean(scores)) if scores else 0.0
    report["map_avg"] = float(np.mean([report[f"map@{tau:g}"] for tau in taus])) if taus else 0.0
    return report


def hit_at_1(records: Sequence[EvalRecord], very_good_threshold: int = 3) -> float:
    """Fraction of queries whose top-scored clip (lowest index on ties) is labeled very good"""
    if len(records) == 0:
        return 0.0
    hits = 0
    for record in records:
        if len(record.pred_saliency) == 0:
            continue
        top = int(np.argmax(record.pred_saliency))
        hits += record.gt_saliency[top] >= very_good_threshold
    return hits / len(records)


def _saliency_hits(record: EvalRecord, very_good_threshold: int) -> Tuple[np.ndarray, int]:
    relevant = np.asarray(record.gt_saliency) >= very_good_threshold
    order = np.argsort(-np.asarray(record.pred_saliency, dtype=float), kind="stable")
    return relevant[order], int(relevant.sum())


def _precision_at_hits(hits: np.ndarray) -> np.ndarray:
    ranks = np.arange(1, len(hits) + 1)
    return (np.cumsum(hits) / ranks)[hits]


def hd_map(records: Sequence[EvalRecord], very_good_threshold: int = 3) -> float:
    """Clip-level AP of the saliency ranking against label >= threshold, averaged over queries"""
    scores = []
    for record in records:
        hits, relevant = _saliency_hits(record, very_good_threshold)
        scores.append(float(_precision_at_hits(hits).sum() / relevant) if relevant else 0.0)
    return float(np.mean(scores)) if scores else 0.0


def top5_map(records: Sequence[EvalRecord], very_good_threshold: int = 3, k: int = 5) -> float:
    """AP of the first k ranked clips, normalized by the relevant clips found there"""
    scores = []
    for record in records:
        hits, _ = _saliency_hits(record, very_good_threshold)
        hits = hits[:k]
        found = int(hits.sum())
        scores.append(float(_precision_at_hits(hits).sum() / found) if found else 0.0)
    return float(np.mean(scores)) if scores else 0.0


def evaluate_records(records: Sequence[EvalRecord], very_good_threshold: int = 3) -> Dict[str, float]:
    """Every reported metric keyed by its table header"""
    for record in records:
        record.validate()
    maps = mean_ap(records)
    report = {
        "r1@0.5": recall_at_1(records, 0.5),
        "r1@0.7": recall_at_1(records, 0.7),
        "map@0.5": maps["map@0.5"],
        "map@0.75": maps["map@0.75"],
        "map_avg": maps["map_avg"],
        "miou": mean_iou(records),
        "hd_map": hd_map(records, very_good_threshold),
        "hit@1": hit_at_1(records, very_good_threshold),
        "top5_map": top5_map(records, very_good_threshold),
    }
    logger.info(
        f"Evaluated {len(records)} queries: R1@0.5={report['r1@0.5']:.3f} R1@0.7={report['r1@0.7']:.3f} "
        f"mAP={report['map_avg']:.3f} HIT@1={report['hit@1']:.3f}"
    )
    return report
