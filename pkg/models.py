"""
Data models for the video grounding toolkit
Contains the records passed between tools
"""

from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from exceptions import ValidationError
from tools.numerics import Tensor

Span = Tuple[float, float]


@dataclass
class GroundingSample:
    """One video/query pair with its annotations (spans in normalized time)"""
    sample_id: str
    video_features: np.ndarray
    query_features: np.ndarray
    gt_spans: List[Span]
    gt_saliency: List[int]
    duration_s: float
    clip_len_s: float
    video_feat_path: str = ""
    query_feat_path: str = ""

    @property
    def num_clips(self) -> int:
        return int(self.video_features.shape[0])

    @property
    def num_tokens(self) -> int:
        return int(self.query_features.shape[0])

    def clip_centers(self) -> np.ndarray:
        """Normalized centre time of every clip"""
        return (np.arange(self.num_clips) + 0.5) / self.num_clips

    def foreground_mask(self) -> np.ndarray:
        centers = self.clip_centers()
        mask = np.zeros(self.num_clips, dtype=bool)
        for st, ed in self.gt_spans:
            mask |= (centers >= st) & (centers <= ed)
        return mask

    def validate(self) -> None:
        if self.video_features.ndim != 2 or self.num_clips < 1:
            raise ValidationError(f"{self.sample_id}: video features must be a non-empty matrix")
        if self.query_features.ndim != 2 or self.num_tokens < 1:
            raise ValidationError(f"{self.sample_id}: query features must be a non-empty matrix")
        if not (np.all(np.isfinite(self.video_features)) and np.all(np.isfinite(self.query_features))):
            raise ValidationError(f"{self.sample_id}: features contain non-finite values")
        for st, ed in self.gt_spans:
            if not 0.0 <= st < ed <= 1.0:
                raise ValidationError(f"{self.sample_id}: span ({st}, {ed}) outside [0, 1] or empty")
        if len(self.gt_saliency) != self.num_clips:
            raise ValidationError(
                f"{self.sample_id}: {len(self.gt_saliency)} saliency labels for {self.num_clips} clips"
            )


@dataclass
class SynthSpec:
    """Parameters of the synthetic concept-planting dataset"""
    n_samples: int = 32
    video_len: Tuple[int, int] = (16, 32)
    query_len: Tuple[int, int] = (4, 8)
    video_dim: int = 32
    query_dim: int = 24
    concept_dim: int = 8
    signal_strength: float = 1.0
    seed: int = 7
    clip_len_s: float = 2.0
    foreground_scale: float = 4.0

    def validate(self) -> None:
        if self.n_samples < 1:
            raise ValidationError("n_samples must be positive")
        for name in ("video_len", "query_len"):
            low, high = getattr(self, name)
            if not 1 <= low <= high:
                raise ValidationError(f"{name} must satisfy 1 <= low <= high, got {(low, high)}")
        if min(self.video_dim, self.query_dim, self.concept_dim) < 1:
            raise ValidationError("feature dimensions must be positive")
        if self.signal_strength < 0 or self.clip_len_s <= 0:
            raise ValidationError("signal_strength must be >= 0 and clip_len_s > 0")


@dataclass
class LossWeights:
    """Balancing coefficients of the composite objective"""
    lambda_f: float = 4.0
    lambda_reg: float = 1.0
    lambda_inter: float = 1.0
    lambda_intra: float = 1.0

    def validate(self) -> None:
        for item in fields(self):
            if getattr(self, item.name) < 0:
                raise ValidationError(f"{item.name} must be non-negative")


@dataclass
class RunConfig:
    """Every knob of a training/evaluation run; serializes losslessly to JSON"""
    # model
    d_model: int = 16
    d_inner: int = 32
    num_blocks: int = 4
    ssm_state: int = 8
    ssm_mode: str = "selective_recurrent"
    conv_width: int = 3
    gate: str = "silu"
    ffn_activation: str = "silu"
    dropout: float = 0.1
    max_len: int = 512
    video_dim: int = 32
    query_dim: int = 24
    head_conv_width: int = 3
    # refiner
    d_llm: int = 64
    llm_layer_index: int = 20
    llm_architecture: str = "mamba_block"
    frozen_block_path: str = ""
    refiner_residual: bool = True
    refiner_init: str = "pretrained"
    refiner_frozen: bool = True
    use_aligner: bool = True
    use_refiner: bool = True
    # objective
    lambda_f: float = 4.0
    lambda_reg: float = 1.0
    lambda_inter: float = 1.0
    lambda_intra: float = 1.0
    intra_margin: float = 0.2
    inter_temperature: float = 0.07
    # optimization
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 200
    seed: int = 0
    dtype: str = "float64"
    # decoding / evaluation
    fps: float = 0.5
    nms_iou: float = 0.7
    top_k: int = 10
    very_good_threshold: int = 3

    POSITIVE_FIELDS = (
        "d_model", "d_inner", "num_blocks", "ssm_state", "conv_width", "max_len", "video_dim",
        "query_dim", "head_conv_width", "d_llm", "inter_temperature", "learning_rate",
        "batch_size", "fps", "top_k", "adam_eps",
    )

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_f, self.lambda_reg, self.lambda_inter, self.lambda_intra)

    @property
    def clip_len_s(self) -> float:
        return 1.0 / self.fps

    def validate(self) -> None:
        for name in self.POSITIVE_FIELDS:
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("epochs", "seed", "llm_layer_index", "weight_decay", "intra_margin"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must lie in [0, 1)")
        if not 0.0 < self.nms_iou <= 1.0:
            raise ValidationError("nms_iou must lie in (0, 1]")
        choices = {
            "ssm_mode": ("lti_recurrent", "lti_kernel", "selective_recurrent", "selective_parallel_scan"),
            "gate": ("silu", "sigmoid"),
            "ffn_activation": ("silu", "identity"),
            "llm_architecture": ("mamba_block", "linear_residual"),
            "refiner_init": ("pretrained", "random"),
            "dtype": ("float64", "float32"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ValidationError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        self.loss_weights.validate()

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "RunConfig":
        known = {item.name: item for item in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ValidationError(f"Unknown configuration keys: {unknown}")
        config = cls(**values)
        config.validate()
        return config


@dataclass
class TlOutput:
    """Temporal localization head output over the video clips"""
    offsets: Tensor
    fg_logits: Tensor


@dataclass
class HdOutput:
    """Highlight detection head output"""
    saliency: Tensor
    cosine: Tensor


@dataclass
class LossBreakdown:
    """Composite objective with its per-term values"""
    total: Tensor
    l_f: float
    l_reg: float
    l_inter: float
    l_intra: float
    skipped_tl: int = 0

    def as_row(self, step: int) -> Dict[str, float]:
        return {
            "step": step,
            "total": float(self.total.data),
            "l_f": self.l_f,
            "l_reg": self.l_reg,
            "l_inter": self.l_inter,
            "l_intra": self.l_intra,
        }


@dataclass(frozen=True)
class SpanPrediction:
    """A candidate moment in normalized time"""
    st: float
    ed: float
    confidence: float


@dataclass
class PredictionSet:
    """Ranked spans and per-clip saliency for one query"""
    sample_id: str
    spans: List[SpanPrediction]
    saliency: np.ndarray


@dataclass
class EvalRecord:
    """Everything the metrics need for one query"""
    query_id: str
    predictions: List[SpanPrediction]
    gt_spans: List[Span]
    gt_saliency: List[int]
    pred_saliency: List[float]

    def validate(self) -> None:
        for st, ed in list(self.gt_spans) + [(p.st, p.ed) for p in self.predictions]:
            if not 0.0 <= st < ed:
                raise ValidationError(f"{self.query_id}: invalid span ({st}, {ed})")
        if len(self.gt_saliency) != len(self.pred_saliency):
            raise ValidationError(f"{self.query_id}: saliency arrays differ in length")


@dataclass
class ForwardResult:
    """Everything one forward pass of the pipeline produces"""
    tl: TlOutput
    hd: HdOutput
    video: Tensor
    sentence: Tensor
    boundary: int
    taps: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


@dataclass
class BenchRow:
    component: str
    length: int
    median_ms: float
    p10_ms: float
    p90_ms: float
    peak_bytes: int
    inner_iterations: int = 1


@dataclass
class BenchReport:
    """Timing and memory rows sorted by (component, L) plus fitted scaling slopes"""
    rows: List[BenchRow]
    environment: Dict[str, Any]
    config: Dict[str, Any]
    slopes: Dict[str, Dict[str, Optional[float]]] = field(default_factory=dict)

    def sort_rows(self) -> None:
        self.rows.sort(key=lambda row: (row.component, row.length))
