"""
Frontend Tool
Projects video clip and query token features into the shared space, pools the query into a
sentence vector and builds the concatenated token sequence Z = [Q~; V~]
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from exceptions import CapacityError, DimensionError, ValidationError
from tools.numerics import (
    Parameter,
    ParameterGroup,
    Tensor,
    as_tensor,
    concat,
    linear,
    matmul,
    silu,
    softmax,
    transpose,
)

logger = logging.getLogger(__name__)


@dataclass
class FeaturePair:
    """Raw per-clip video features and per-token query features"""
    video: Tensor
    query: Tensor

    def validate(self) -> None:
        for name, features in (("video", self.video), ("query", self.query)):
            if features.ndim != 2 or features.shape[0] < 1:
                raise ValidationError(f"{name} features must be a non-empty (L, D) matrix, got {features.shape}")
            if not np.all(np.isfinite(features.data)):
                raise ValidationError(f"{name} features contain non-finite values")


@dataclass
class SharedTokens:
    """Concatenated token sequence; rows [0, boundary) are query tokens, the rest video clips"""
    Z: Tensor
    S: Tensor
    boundary: int

    @property
    def query_rows(self) -> Tensor:
        return self.Z[: self.boundary]

    @property
    def video_rows(self) -> Tensor:
        return self.Z[self.boundary:]


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; a no-op without a generator (evaluation) or at rate 0"""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return x * keep


class FeedForward(ParameterGroup):
    """linear(in -> out) -> activation -> linear(out -> out)"""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, activation: str = "silu", rate: float = 0.0):
        super().__init__()
        self.activation = activation
        self.rate = rate
        self.w1 = self.add_parameter("w1", rng.normal(0.0, in_dim ** -0.5, size=(in_dim, out_dim)))
        self.b1 = self.add_parameter("b1", np.zeros(out_dim))
        self.w2 = self.add_parameter("w2", rng.normal(0.0, out_dim ** -0.5, size=(out_dim, out_dim)))
        self.b2 = self.add_parameter("b2", np.zeros(out_dim))

    def __call__(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        hidden = linear(x, self.w1, self.b1)
        if self.activation == "silu":
            hidden = silu(hidden)
        hidden = dropout(hidden, self.rate, rng)
        return linear(hidden, self.w2, self.b2)


def project(
    pair: FeaturePair,
    video_ffn: FeedForward,
    query_ffn: FeedForward,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[Tensor, Tensor]:
    """
    Map each modality into the shared D-dimensional space through its own network

    Returns:
        (V of shape (L_v, D), Q of shape (L_q, D))
    """
    pair.validate()
    if pair.video.shape[1] != video_ffn.w1.shape[0] or pair.query.shape[1] != query_ffn.w1.shape[0]:
        raise DimensionError(
            f"Feature widths video={pair.video.shape[1]}, query={pair.query.shape[1]} do not match "
            f"projection inputs {video_ffn.w1.shape[0]}, {query_ffn.w1.shape[0]}"
        )
    return video_ffn(pair.video, rng), query_ffn(pair.query, rng)


def attentive_pool(Q: Tensor, W: Parameter) -> Tuple[Tensor, Tensor]:
    """
    Aggregate query tokens into one sentence vector

    W is a learnable (1, D) vector, so the (1, L_q) logits W Q^T exist for any query length.

    Returns:
        (S of shape (1, D), pooling weights M of shape (1, L_q))
    """
    weights = softmax(matmul(W, transpose(Q)), axis=-1)
    return matmul(weights, Q), weights


def embed_and_concat(
    V: Tensor,
    Q: Tensor,
    pos_tables: Tuple[Parameter, Parameter],
    type_vectors: Tuple[Parameter, Parameter],
    S: Optional[Tensor] = None,
) -> SharedTokens:
    """
    Add positional and modality-type embeddings and concatenate query-first

    Args:
        pos_tables: (video table, query table), each (max_len, D)
        type_vectors: (video type, query type), each (1, D)
    """
    pos_video, pos_query = pos_tables
    type_video, type_query = type_vectors
    for name, rows, table in (("video", V.shape[0], pos_video), ("query", Q.shape[0], pos_query)):
        if rows > table.shape[0]:
            raise CapacityError(f"{name} sequence of length {rows} exceeds positional table of {table.shape[0]}")

    video_tokens = V + pos_video[: V.shape[0]] + type_video
    query_tokens = Q + pos_query[: Q.shape[0]] + type_query
    Z = concat([query_tokens, video_tokens], axis=0)
    return SharedTokens(Z=Z, S=S if S is not None else Tensor(np.zeros((1, V.shape[1]))), boundary=Q.shape[0])


class FrontendProjector(ParameterGroup):
    """
    Frontend of the grounding pipeline
    Owns both projection networks, the pooling vector and the embedding tables
    """

    def __init__(
        self,
        video_dim: int,
        query_dim: int,
        d_model: int,
        rng: np.random.Generator,
        max_len: int = 512,
        activation: str = "silu",
        rate: float = 0.1,
    ):
        """Initialize the frontend with seeded random weights"""
        super().__init__()
        self.video_ffn = self.add_child("video_ffn", FeedForward(video_dim, d_model, rng, activation, rate))
        self.query_ffn = self.add_child("query_ffn", FeedForward(query_dim, d_model, rng, activation, rate))
        self.pool = self.add_parameter("pool", rng.normal(0.0, d_model ** -0.5, size=(1, d_model)))
        self.pos_video = self.add_parameter("pos_video", rng.normal(0.0, 0.02, size=(max_len, d_model)))
        self.pos_query = self.add_parameter("pos_query", rng.normal(0.0, 0.02, size=(max_len, d_model)))
        self.type_video = self.add_parameter("type_video", rng.normal(0.0, 0.02, size=(1, d_model)))
        self.type_query = self.add_parameter("type_query", rng.normal(0.0, 0.02, size=(1, d_model)))
        logger.info(f"FrontendProjector initialized (D={d_model}, max_len={max_len})")

    def __call__(self, video, query, rng: Optional[np.random.Generator] = None) -> Tuple[SharedTokens, Tensor, Tensor]:
        """
        Run projection, pooling and embedding

        Returns:
            (shared tokens, projected video V, projected query Q)
        """
        pair = FeaturePair(video=as_tensor(video), query=as_tensor(query))
        V, Q = project(pair, self.video_ffn, self.query_ffn, rng)
        S, _ = attentive_pool(Q, self.pool)
        tokens = embed_and_concat(
            V, Q, (self.pos_video, self.pos_query), (self.type_video, self.type_query), S=S
        )
        return tokens, V, Q
