"""
Heads Tool
Temporal localization and highlight detection heads, span decoding and the composite objective
"""

import logging
from typing import List, Optional, Sequence

import numpy as np

from exceptions import DimensionError, ValidationError
from models import ForwardResult, GroundingSample, HdOutput, LossBreakdown, LossWeights, SpanPrediction, TlOutput
from tools.metrics import interval_iou
from tools.numerics import (
    ParameterGroup,
    Tensor,
    absolute,
    as_tensor,
    concat,
    conv1d,
    exp,
    l2_normalize_rows,
    linear,
    log_softmax,
    matmul,
    maximum,
    mean,
    minimum,
    relu,
    reshape,
    silu,
    softplus,
    tensor_sum,
    transpose,
)

logger = logging.getLogger(__name__)

COSINE_EPS = 1e-24


class TemporalHead(ParameterGroup):
    """Two parallel conv branches over the video rows: boundary offsets and foreground logits"""

    def __init__(self, d_model: int, rng: np.random.Generator, conv_width: int = 3):
        super().__init__()
        scale = conv_width ** -0.5
        self.reg_conv = self.add_parameter("reg_conv", rng.normal(0.0, scale, size=(conv_width, d_model)))
        self.reg_w = self.add_parameter("reg_w", rng.normal(0.0, d_model ** -0.5, size=(d_model, 2)))
        self.reg_b = self.add_parameter("reg_b", np.full(2, -1.0))
        self.cls_conv = self.add_parameter("cls_conv", rng.normal(0.0, scale, size=(conv_width, d_model)))
        self.cls_w = self.add_parameter("cls_w", rng.normal(0.0, d_model ** -0.5, size=(d_model, 1)))
        self.cls_b = self.add_parameter("cls_b", np.zeros(1))


class HighlightHead(ParameterGroup):
    """Cosine saliency with a learnable log-temperature"""

    def __init__(self, log_tau: float = 0.0):
        super().__init__()
        self.log_tau = self.add_parameter("log_tau", np.array([log_tau]))


def tl_head(params: TemporalHead, Z_refine, boundary: int) -> TlOutput:
    """
    Localization head over the video rows of the refined sequence

    Args:
        params: Head parameters
        Z_refine: Refined token sequence (L_q + L_v, D), query rows first
        boundary: Number of query rows

    Returns:
        TlOutput with non-negative (L_v, 2) offsets and (L_v,) foreground logits
    """
    Z_refine = as_tensor(Z_refine)
    if not 0 <= boundary < Z_refine.shape[0]:
        raise DimensionError(f"Boundary {boundary} leaves no video rows in a sequence of {Z_refine.shape[0]}")
    video = Z_refine[boundary:]
    reg = silu(conv1d(video, params.reg_conv, causal=False))
    offsets = softplus(linear(reg, params.reg_w, params.reg_b))
    cls = silu(conv1d(video, params.cls_conv, causal=False))
    fg_logits = reshape(linear(cls, params.cls_w, params.cls_b), (video.shape[0],))
    return TlOutput(offsets=offsets, fg_logits=fg_logits)


def hd_head(params: HighlightHead, V, S) -> HdOutput:
    """
    saliency_i = exp(log_tau) * cos(V_i, S); zero-norm rows score 0
    """
    V, S = as_tensor(V), as_tensor(S)
    if S.shape != (1, V.shape[1]):
        raise DimensionError(f"Sentence vector must be (1, {V.shape[1]}), got {S.shape}")
    cosine = reshape(
        matmul(l2_normalize_rows(V, COSINE_EPS), transpose(l2_normalize_rows(S, COSINE_EPS))),
        (V.shape[0],),
    )
    saliency = exp(params.log_tau) * cosine
    return HdOutput(saliency=saliency, cosine=cosine)


# ----- decoding -----

def decode_spans(out: TlOutput, top_k: int = 10, nms_iou: float = 0.7) -> List[SpanPrediction]:
    """
    Turn per-clip offsets into ranked, de-duplicated spans

    Every clip proposes (t_i - d_st, t_i + d_ed) clamped to [0, 1] with confidence sigmoid(logit).
    Proposals are visited by descending confidence (ties keep clip order) and kept unless
    they overlap an already kept span with IoU >= nms_iou.
    """
    if top_k < 1:
        raise ValidationError("top_k must be at least 1")
    offsets = np.asarray(out.offsets.data, dtype=np.float64)
    logits = np.asarray(out.fg_logits.data, dtype=np.float64)
    count = logits.shape[0]
    centers = (np.arange(count) + 0.5) / count
    starts = np.clip(centers - offsets[:, 0], 0.0, 1.0)
    ends = np.clip(centers + offsets[:, 1], 0.0, 1.0)
    confidence = 0.5 * (1.0 + np.tanh(0.5 * logits))

    kept: List[SpanPrediction] = []
    for index in np.argsort(-confidence, kind="stable"):
        st, ed = float(starts[index]), float(ends[index])
        if not st < ed:
            continue
        if any(interval_iou((st, ed), (span.st, span.ed)) >= nms_iou for span in kept):
            continue
        kept.append(SpanPrediction(st=st, ed=ed, confidence=float(confidence[index])))
        if len(kept) == top_k:
            break
    return kept


# ----- objective -----

def foreground_loss(fg_logits: Tensor, labels: np.ndarray) -> Tensor:
    """Summed binary cross-entropy with logits, normalized by the foreground count"""
    labels = np.asarray(labels, dtype=fg_logits.data.dtype)
    per_clip = softplus(fg_logits) - fg_logits * labels
    return tensor_sum(per_clip) / float(max(1, int(labels.sum())))


def regression_targets(sample: GroundingSample) -> np.ndarray:
    """(distance to start, distance to end) of the enclosing span for every foreground clip"""
    centers = sample.clip_centers()
    targets = np.zeros((sample.num_clips, 2))
    for index, center in enumerate(centers):
        for st, ed in sample.gt_spans:
            if st <= center <= ed:
                targets[index] = (center - st, ed - center)
                break
    return targets


def regression_loss(offsets: Tensor, sample: GroundingSample, mask: np.ndarray) -> Tensor:
    """Mean over foreground clips of L1 plus (1 - IoU) between predicted and true intervals"""
    index = np.flatnonzero(mask)
    predicted = offsets[index]
    target = Tensor(regression_targets(sample)[index].astype(offsets.data.dtype))
    l1 = tensor_sum(absolute(predicted - target), axis=1)
    overlap = tensor_sum(minimum(predicted, target), axis=1)
    union = tensor_sum(maximum(predicted, target), axis=1)
    return mean(l1 + (1.0 - overlap / union))


def intra_video_loss(saliency: Tensor, mask: np.ndarray, margin: float = 0.2) -> Tensor:
    """Hinge over every (foreground, background) clip pair of the same video"""
    fg, bg = np.flatnonzero(mask), np.flatnonzero(~mask)
    if fg.size == 0 or bg.size == 0:
        return Tensor(np.zeros((), dtype=saliency.data.dtype))
    gap = reshape(saliency[fg], (fg.size, 1)) - reshape(saliency[bg], (1, bg.size))
    return mean(relu(margin - gap))


def inter_video_loss(sentences: Sequence[Tensor], positives: Sequence[Tensor], temperature: float = 0.07) -> Tensor:
    """
    InfoNCE between each sentence vector and the mean foreground feature of its own video,
    with the other videos of the batch as negatives

    Args:
        sentences: One (1, D) sentence vector per sample
        positives: Matching (1, D) mean foreground features
        temperature: Softmax temperature
    """
    if len(sentences) != len(positives):
        raise DimensionError("Each sentence needs exactly one positive")
    if len(sentences) < 2:
        return Tensor(np.zeros(()))
    text = l2_normalize_rows(concat(list(sentences), axis=0))
    video = l2_normalize_rows(concat(list(positives), axis=0))
    logits = matmul(text, transpose(video)) / temperature
    diagonal = np.arange(len(sentences))
    return -mean(log_softmax(logits, axis=1)[diagonal, diagonal])


def total_loss(
    tl: TlOutput,
    hd: HdOutput,
    sample: GroundingSample,
    w: LossWeights,
    l_inter: Optional[Tensor] = None,
    margin: float = 0.2,
) -> LossBreakdown:
    """
    Weighted objective of one sample

    The contrastive term needs other samples; pass the batch value as l_inter (0 otherwise).
    A sample without foreground clips contributes no localization terms and bumps skipped_tl.
    """
    mask = sample.foreground_mask()
    if tl.fg_logits.shape[0] != sample.num_clips or hd.saliency.shape[0] != sample.num_clips:
        raise DimensionError(f"{sample.sample_id}: head outputs do not cover {sample.num_clips} clips")

    zero = Tensor(np.zeros((), dtype=tl.fg_logits.data.dtype))
    skipped = 0
    if mask.any():
        l_f = foreground_loss(tl.fg_logits, mask)
        l_reg = regression_loss(tl.offsets, sample, mask)
    else:
        logger.warning(f"{sample.sample_id}: no foreground clip, localization terms skipped")
        l_f, l_reg = zero, zero
        skipped = 1
    l_intra = intra_video_loss(hd.saliency, mask, margin)
    l_inter = zero if l_inter is None else l_inter

    total = w.lambda_f * l_f + w.lambda_reg * l_reg + w.lambda_inter * l_inter + w.lambda_intra * l_intra
    return LossBreakdown(
        total=total,
        l_f=float(l_f.data),
        l_reg=float(l_reg.data),
        l_inter=float(l_inter.data),
        l_intra=float(l_intra.data),
        skipped_tl=skipped,
    )


def batch_total_loss(
    results: Sequence[ForwardResult],
    samples: Sequence[GroundingSample],
    w: LossWeights,
    margin: float = 0.2,
    temperature: float = 0.07,
) -> LossBreakdown:
    """Mean of the per-sample terms plus the batch contrastive term"""
    if len(results) != len(samples) or not samples:
        raise ValidationError("Batch loss needs one forward result per sample")

    sentences, positives = [], []
    for result, sample in zip(results, samples):
        mask = sample.foreground_mask()
        if mask.any():
            sentences.append(result.sentence)
            positives.append(mean(result.video[np.flatnonzero(mask)], axis=0, keepdims=True))
    l_inter = inter_video_loss(sentences, positives, temperature)

    parts = [total_loss(r.tl, r.hd, s, w, margin=margin) for r, s in zip(results, samples)]
    count = float(len(parts))
    total = parts[0].total
    for part in parts[1:]:
        total = total + part.total
    total = total / count + w.lambda_inter * l_inter
    return LossBreakdown(
        total=total,
        l_f=sum(p.l_f for p in parts) / count,
        l_reg=sum(p.l_reg for p in parts) / count,
        l_inter=float(l_inter.data),
        l_intra=sum(p.l_intra for p in parts) / count,
        skipped_tl=sum(p.skipped_tl for p in parts),
    )
