from dataclasses import replace

import numpy as np
import pytest

from exceptions import ValidationError
from models import EvalRecord, SpanPrediction
from tools.metrics import (
    MAP_THRESHOLDS,
    REPORT_KEYS,
    average_precision,
    evaluate_records,
    hd_map,
    hit_at_1,
    interpolated_ap,
    interval_iou,
    mean_ap,
    mean_iou,
    recall_at_1,
    top5_map,
)


def record(predictions=(), gt_spans=((0.0, 1.0),), gt_saliency=(0,), pred_saliency=(0.0,), query_id="q"):
    return EvalRecord(
        query_id=query_id,
        predictions=[SpanPrediction(*p) for p in predictions],
        gt_spans=list(gt_spans),
        gt_saliency=list(gt_saliency),
        pred_saliency=list(pred_saliency),
    )


# ----- independent reference implementations -----

def iou_reference(a, b):
    grid = np.linspace(0.0, 1.0, 1_000_001)
    inside_a = (grid >= a[0]) & (grid <= a[1])
    inside_b = (grid >= b[0]) & (grid <= b[1])
    union = np.sum(inside_a | inside_b)
    return np.sum(inside_a & inside_b) / union if union else 0.0


def ap_reference(rec, tau):
    ranked = sorted(enumerate(rec.predictions), key=lambda item: (-item[1].confidence, item[0]))
    free = list(range(len(rec.gt_spans)))
    hits = []
    for _, prediction in ranked:
        best, best_iou = None, -1.0
        for index in free:
            score = interval_iou((prediction.st, prediction.ed), rec.gt_spans[index])
            if score > best_iou:
                best, best_iou = index, score
        hit = best is not None and best_iou >= tau
        if hit:
            free.remove(best)
        hits.append(hit)
    precisions = [sum(hits[: k + 1]) / (k + 1) for k in range(len(hits))]
    total = 0.0
    for k, hit in enumerate(hits):
        if hit:
            total += max(precisions[k:]) / len(rec.gt_spans)
    return total


def random_record(rng, query_id):
    gt_spans = []
    for _ in range(rng.integers(1, 4)):
        st = rng.uniform(0.0, 0.8)
        gt_spans.append((st, min(1.0, st + rng.uniform(0.05, 0.4))))
    predictions = []
    for _ in range(rng.integers(0, 8)):
        st = rng.uniform(0.0, 0.9)
        predictions.append((st, min(1.0, st + rng.uniform(0.02, 0.5)), float(rng.integers(0, 5)) / 4))
    num_clips = int(rng.integers(3, 12))
    return record(
        predictions,
        gt_spans,
        gt_saliency=list(rng.integers(0, 5, size=num_clips)),
        pred_saliency=list(rng.normal(size=num_clips)),
        query_id=query_id,
    )


# ----- interval IoU -----

@pytest.mark.parametrize(
    "a, b, expected",
    [
        ((0.2, 0.6), (0.2, 0.6), 1.0),
        ((0.0, 0.2), (0.5, 0.9), 0.0),
        ((0.0, 0.5), (0.5, 1.0), 0.0),
        ((0.0, 1.0), (0.25, 0.5), 0.25),
        ((0.0, 0.4), (0.2, 0.6), 1.0 / 3.0),
        ((0.3, 0.3), (0.3, 0.3), 0.0),
    ],
)
def test_interval_iou_cases(a, b, expected):
    assert abs(interval_iou(a, b) - expected) < 1e-12
    assert abs(interval_iou(b, a) - expected) < 1e-12


def test_interval_iou_matches_grid_reference():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a = tuple(sorted(rng.uniform(size=2)))
        b = tuple(sorted(rng.uniform(size=2)))
        assert abs(interval_iou(a, b) - iou_reference(a, b)) < 1e-3


# ----- moment retrieval -----

def test_average_precision_hand_case():
    rec = record(
        predictions=[(0.52, 0.9, 0.9), (0.6, 0.7, 0.8), (0.0, 0.3, 0.7)],
        gt_spans=[(0.0, 0.3), (0.5, 0.9)],
    )
    assert abs(average_precision(rec, 0.5) - 5.0 / 6.0) < 1e-12
    assert abs(average_precision(rec, 0.96) - 1.0 / 6.0) < 1e-12


def test_ground_truth_span_is_matched_once():
    rec = record(predictions=[(0.1, 0.5, 0.9), (0.1, 0.5, 0.8)], gt_spans=[(0.1, 0.5)])
    assert abs(average_precision(rec, 0.5) - 1.0) < 1e-12
    rec = record(predictions=[(0.6, 0.7, 0.9), (0.1, 0.5, 0.8)], gt_spans=[(0.1, 0.5)])
    assert abs(average_precision(rec, 0.5) - 0.5) < 1e-12


def test_interpolated_ap_edges():
    assert interpolated_ap([], 3) == 0.0
    assert interpolated_ap([True], 0) == 0.0
    assert interpolated_ap([True, True], 2) == 1.0
    assert abs(interpolated_ap([False, True], 1) - 0.5) < 1e-12


def test_mean_ap_keys_and_average():
    rec = record(predictions=[(0.1, 0.5, 0.9)], gt_spans=[(0.1, 0.5)])
    report = mean_ap([rec])
    assert set(report) == {f"map@{tau:g}" for tau in MAP_THRESHOLDS} | {"map_avg"}
    assert report["map_avg"] == 1.0
    assert mean_ap([rec], taus=[0.5]) == {"map@0.5": 1.0, "map_avg": 1.0}


def test_mean_ap_matches_reference_on_random_records():
    rng = np.random.default_rng(17)
    for case in range(25):
        records = [random_record(rng, f"{case}-{i}") for i in range(4)]
        for tau in (0.3, 0.5, 0.7):
            expected = np.mean([ap_reference(r, tau) for r in records])
            assert abs(mean_ap(records, [tau])[f"map@{tau:g}"] - expected) < 1e-12, case


def test_recall_and_mean_iou():
    records = [
        record(predictions=[(0.1, 0.5, 0.2), (0.0, 0.4, 0.9)], gt_spans=[(0.0, 0.4)]),
        record(predictions=[(0.0, 0.3, 0.5)], gt_spans=[(0.0, 0.5)]),
        record(predictions=[], gt_spans=[(0.2, 0.4)]),
    ]
    assert abs(recall_at_1(records, 0.5) - 2.0 / 3.0) < 1e-12
    assert abs(recall_at_1(records, 0.7) - 1.0 / 3.0) < 1e-12
    assert abs(mean_iou(records) - (1.0 + 0.6 + 0.0) / 3.0) < 1e-12


def test_recall_uses_best_ground_truth_span():
    rec = record(predictions=[(0.6, 0.9, 1.0)], gt_spans=[(0.0, 0.2), (0.6, 0.9)])
    assert recall_at_1([rec], 0.9) == 1.0


def test_empty_inputs_score_zero():
    assert recall_at_1([], 0.5) == 0.0
    assert mean_iou([]) == 0.0
    assert hit_at_1([]) == 0.0
    assert hd_map([]) == 0.0
    assert top5_map([]) == 0.0


# ----- highlight detection -----

def test_hit_at_1_breaks_ties_by_lowest_index():
    tied = record(gt_saliency=[1, 4, 0], pred_saliency=[0.5, 0.5, 0.1])
    assert hit_at_1([tied]) == 0.0
    good = record(gt_saliency=[4, 1, 0], pred_saliency=[0.5, 0.5, 0.1])
    assert hit_at_1([good]) == 1.0
    assert hit_at_1([tied, good]) == 0.5


def test_clip_level_maps_hand_case():
    relevance = [1, 0, 1, 0, 0, 1, 1, 0]
    rec = record(gt_saliency=[4 * r for r in relevance], pred_saliency=list(np.arange(8.0, 0.0, -1.0)))
    assert abs(top5_map([rec]) - 5.0 / 6.0) < 1e-12
    expected = (1.0 + 2.0 / 3.0 + 3.0 / 6.0 + 4.0 / 7.0) / 4.0
    assert abs(hd_map([rec]) - expected) < 1e-12


def test_clip_level_maps_without_relevant_clips():
    rec = record(gt_saliency=[0, 1, 2], pred_saliency=[0.3, 0.2, 0.1])
    assert hd_map([rec]) == 0.0
    assert top5_map([rec]) == 0.0


def test_very_good_threshold_is_configurable():
    rec = record(gt_saliency=[2, 0], pred_saliency=[1.0, 0.0])
    assert hit_at_1([rec], very_good_threshold=3) == 0.0
    assert hit_at_1([rec], very_good_threshold=2) == 1.0


# ----- report -----

def test_report_has_every_key():
    rec = record(predictions=[(0.1, 0.5, 0.9)], gt_spans=[(0.1, 0.5)], gt_saliency=[4, 0], pred_saliency=[1.0, 0.0])
    report = evaluate_records([rec])
    assert tuple(report) == REPORT_KEYS
    assert all(value == 1.0 for value in report.values())


def test_report_validates_records():
    bad = record(predictions=[(0.5, 0.2, 0.9)])
    with pytest.raises(ValidationError):
        evaluate_records([bad])
    mismatched = record(gt_saliency=[1, 2], pred_saliency=[0.1])
    with pytest.raises(ValidationError):
        evaluate_records([mismatched])


def test_metrics_accept_numpy_saliency():
    rec = EvalRecord(
        query_id="q",
        predictions=[SpanPrediction(0.1, 0.5, 0.9)],
        gt_spans=np.array([[0.1, 0.5]]),
        gt_saliency=np.array([4, 0, 1]),
        pred_saliency=np.array([1.0, 0.0, 0.5]),
    )
    assert hit_at_1([rec]) == 1.0
    assert hd_map([rec]) == 1.0
    assert top5_map([rec]) == 1.0
    assert evaluate_records([rec])["hit@1"] == 1.0
    empty = EvalRecord("e", [], [(0.0, 1.0)], np.array([], dtype=int), np.array([]))
    assert hit_at_1([empty]) == 0.0
    assert recall_at_1([empty], 0.5) == 0.0


# ----- brute-force references on random records -----

def exact_iou(a, b):
    overlap = min(a[1], b[1]) - max(a[0], b[0])
    if overlap <= 0:
        return 0.0
    return overlap / (max(a[1], b[1]) - min(a[0], b[0]))


def top1_reference(rec):
    best = None
    for prediction in rec.predictions:
        if best is None or prediction.confidence > best.confidence:
            best = prediction
    return best


def top1_iou_reference(rec):
    top = top1_reference(rec)
    if top is None:
        return 0.0
    return max(exact_iou((top.st, top.ed), gt) for gt in rec.gt_spans)


def hit_reference(rec, threshold=3):
    best = 0
    for index, score in enumerate(rec.pred_saliency):
        if score > rec.pred_saliency[best]:
            best = index
    return float(rec.gt_saliency[best] >= threshold)


def clip_ranking_reference(rec, threshold=3):
    order = sorted(range(len(rec.pred_saliency)), key=lambda i: (-rec.pred_saliency[i], i))
    return [rec.gt_saliency[i] >= threshold for i in order]


def precision_sum_reference(hits):
    total, found = 0.0, 0
    for rank, hit in enumerate(hits, start=1):
        if hit:
            found += 1
            total += found / rank
    return total, found


def hd_ap_reference(rec):
    hits = clip_ranking_reference(rec)
    total, _ = precision_sum_reference(hits)
    relevant = sum(hits)
    return total / relevant if relevant else 0.0


def top5_ap_reference(rec):
    total, found = precision_sum_reference(clip_ranking_reference(rec)[:5])
    return total / found if found else 0.0


def tied_saliency(rng, rec):
    # coarse scores so that rank ties occur
    return replace(rec, pred_saliency=list(np.round(rng.normal(size=len(rec.gt_saliency)), 1)))


def random_cases(seed, cases=25, per_case=4):
    rng = np.random.default_rng(seed)
    for case in range(cases):
        yield case, [tied_saliency(rng, random_record(rng, f"{case}-{i}")) for i in range(per_case)]


def test_recall_at_1_matches_reference():
    for case, records in random_cases(31):
        for tau in (0.3, 0.5, 0.7):
            expected = sum(top1_iou_reference(r) >= tau for r in records) / len(records)
            assert abs(recall_at_1(records, tau) - expected) < 1e-12, case


def test_mean_iou_matches_reference():
    for case, records in random_cases(32):
        expected = sum(top1_iou_reference(r) for r in records) / len(records)
        assert abs(mean_iou(records) - expected) < 1e-12, case


def test_hit_at_1_matches_reference():
    for case, records in random_cases(33):
        expected = sum(hit_reference(r) for r in records) / len(records)
        assert abs(hit_at_1(records) - expected) < 1e-12, case


def test_hd_map_matches_reference():
    for case, records in random_cases(34):
        expected = sum(hd_ap_reference(r) for r in records) / len(records)
        assert abs(hd_map(records) - expected) < 1e-12, case


def test_top5_map_matches_reference():
    for case, records in random_cases(35):
        expected = sum(top5_ap_reference(r) for r in records) / len(records)
        assert abs(top5_map(records) - expected) < 1e-12, case
