"""
Aligner Tool
K stacked bidirectional gated state-space blocks over the concatenated token sequence
"""

import logging
from typing import List, Sequence, Union

import numpy as np

from exceptions import ValidationError
from tools.numerics import (
    ParameterGroup,
    Tensor,
    as_tensor,
    conv1d,
    flip,
    layer_norm,
    matmul,
    sigmoid,
    silu,
)
from tools.ssm import SsmMode, SsmParams, init_lti_ssm, init_selective_ssm, ssm_forward

logger = logging.getLogger(__name__)


def build_ssm(channels: int, state_size: int, rng: np.random.Generator, mode: SsmMode) -> SsmParams:
    if mode.is_selective:
        return init_selective_ssm(channels, state_size, rng, mode=mode)
    return init_lti_ssm(channels, state_size, rng, mode=mode)


class AlignerBlock(ParameterGroup):
    """
    One bidirectional gated block

    Z -> LayerNorm -> (x, g) projections; x -> causal conv -> SiLU; a forward SSM reads x
    left to right and a backward SSM reads it right to left; the gate mixes both directions
    and out_proj maps the mix back to D for the residual addition.
    """

    def __init__(
        self,
        d_model: int,
        d_inner: int,
        state_size: int,
        rng: np.random.Generator,
        conv_width: int = 3,
        ssm_mode: Union[SsmMode, str] = SsmMode.SELECTIVE_RECURRENT,
        gate: str = "silu",
        out_scale: float = 1e-2,
    ):
        super().__init__()
        if gate not in ("silu", "sigmoid"):
            raise ValidationError(f"Unknown gate {gate!r}")
        mode = SsmMode(ssm_mode)
        self.gate = gate
        self.norm_gain = self.add_parameter("norm_gain", np.ones(d_model))
        self.norm_bias = self.add_parameter("norm_bias", np.zeros(d_model))
        self.w_x = self.add_parameter("w_x", rng.normal(0.0, d_model ** -0.5, size=(d_model, d_inner)))
        self.w_g = self.add_parameter("w_g", rng.normal(0.0, d_model ** -0.5, size=(d_model, d_inner)))
        self.conv = self.add_parameter("conv", rng.normal(0.0, conv_width ** -0.5, size=(conv_width, d_inner)))
        self.ssm_f = self.add_child("ssm_f", build_ssm(d_inner, state_size, rng, mode))
        self.ssm_b = self.add_child("ssm_b", build_ssm(d_inner, state_size, rng, mode))
        self.out_proj = self.add_parameter("out_proj", rng.normal(0.0, out_scale * d_inner ** -0.5, size=(d_inner, d_model)))

    @property
    def d_model(self) -> int:
        return self.w_x.shape[0]

    @property
    def d_inner(self) -> int:
        return self.w_x.shape[1]

    def gate_coefficient(self, g: Tensor) -> Tensor:
        return silu(g) if self.gate == "silu" else sigmoid(g)


def block_forward(params: AlignerBlock, Z, return_parts: bool = False):
    """
    Apply one aligner block

    Args:
        params: Block parameters
        Z: Token sequence (L, D)
        return_parts: Also return the intermediate directional outputs

    Returns:
        Z + out_proj(y_fused), optionally with a dict of intermediates
    """
    Z = as_tensor(Z)
    normalized = layer_norm(Z, params.norm_gain, params.norm_bias)
    x = matmul(normalized, params.w_x)
    g = matmul(normalized, params.w_g)
    x = silu(conv1d(x, params.conv, causal=True))

    y_forward = ssm_forward(params.ssm_f, x)
    y_backward = flip(ssm_forward(params.ssm_b, flip(x, axis=0)), axis=0)

    weight = params.gate_coefficient(g)
    fused = weight * y_forward + (1.0 - weight) * y_backward
    out = Z + matmul(fused, params.out_proj)

    if not return_parts:
        return out
    parts = {"x": x, "g": g, "gate": weight, "y_forward": y_forward, "y_backward": y_backward, "fused": fused}
    return out, parts


class MambaAligner(ParameterGroup):
    """Stack of K aligner blocks sharing D and D_inner"""

    def __init__(
        self,
        d_model: int,
        d_inner: int,
        num_blocks: int,
        state_size: int,
        rng: np.random.Generator,
        conv_width: int = 3,
        ssm_mode: Union[SsmMode, str] = SsmMode.SELECTIVE_RECURRENT,
        gate: str = "silu",
    ):
        """Initialize the aligner stack"""
        super().__init__()
        if num_blocks < 1:
            raise ValidationError("The aligner needs at least one block")
        self.blocks: List[AlignerBlock] = []
        for index in range(num_blocks):
            block = AlignerBlock(d_model, d_inner, state_size, rng, conv_width, ssm_mode, gate)
            self.blocks.append(self.add_child(f"block{index}", block))
        logger.info(
            f"MambaAligner initialized (K={num_blocks}, D={d_model}, D_inner={d_inner}, "
            f"N={state_size}, mode={SsmMode(ssm_mode).value}, gate={gate})"
        )

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    def __call__(self, Z) -> Tensor:
        return aligner_forward(self, Z)


def aligner_forward(stack: MambaAligner, Z) -> Tensor:
    """Sequential composition of the stack's blocks"""
    out = as_tensor(Z)
    for block in stack.blocks:
        out = block_forward(block, out)
    return out


def bench_block(
    L_values: Sequence[int],
    repeats: int = 9,
    warmup: int = 3,
    d_model: int = 64,
    seed: int = 0,
):
    """
    Time and memory table of one aligner block against the attention baseline

    Thin entry point into the benchmark harness; see tools.bench.BenchmarkTool.
    """
    from tools.bench import BenchmarkTool

    lengths = list(L_values)
    if lengths != sorted(lengths):
        raise ValidationError("L_values must be sorted ascending")
    tool = BenchmarkTool(d_model=d_model, seed=seed)
    return tool.run_bench(lengths, repeats=repeats, warmup=warmup)
