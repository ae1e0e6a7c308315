"""
Refiner Tool
Trainable adapters around a frozen pre-trained block: Z_refine = F_L2(F_llm(F_L1(Z_out))),
with an optional residual connection back to Z_out
"""

import hashlib
import logging
import os
from enum import Enum
from typing import Dict, Optional

import numpy as np

from exceptions import LoadError
from tools.container import (
    FROZEN_VERSION,
    Container,
    ContainerSection,
    read_container,
    write_container,
)
from tools.numerics import (
    ParameterGroup,
    Tensor,
    as_tensor,
    conv1d,
    layer_norm,
    linear,
    matmul,
    silu,
)
from tools.ssm import SelectiveProjection, SsmMode, SsmParams, init_selective_ssm, ssm_forward

logger = logging.getLogger(__name__)


class BlockArchitecture(str, Enum):
    MAMBA_BLOCK = "mamba_block"
    LINEAR_RESIDUAL = "linear_residual"

    @property
    def tag(self) -> int:
        return _ARCHITECTURE_TAGS[self]

    @classmethod
    def from_tag(cls, tag: int) -> "BlockArchitecture":
        for architecture, value in _ARCHITECTURE_TAGS.items():
            if value == tag:
                return architecture
        raise LoadError(f"Unknown architecture tag {tag}")


_ARCHITECTURE_TAGS = {BlockArchitecture.MAMBA_BLOCK: 0, BlockArchitecture.LINEAR_RESIDUAL: 1}

_MAMBA_SECTIONS = (
    "norm_gain", "norm_bias", "in_proj", "conv", "ssm.A",
    "ssm.proj.w_delta", "ssm.proj.b_delta", "ssm.proj.w_b", "ssm.proj.b_b",
    "ssm.proj.w_c", "ssm.proj.b_c", "out_proj",
)
_LINEAR_SECTIONS = ("weight", "bias")


class FrozenBlock(ParameterGroup):
    """
    Pre-trained layer held fixed during training

    MAMBA_BLOCK is a gated selective state-space layer with inner width 2 * d_llm:
        x -> LayerNorm -> in_proj -> (u, z); u -> causal conv -> SiLU -> SSM; * SiLU(z) -> out_proj; + x
    LINEAR_RESIDUAL is x + x W + b.
    """

    def __init__(
        self,
        arrays: Dict[str, np.ndarray],
        d_llm: int,
        layer_index: int,
        architecture: BlockArchitecture,
    ):
        super().__init__()
        self.d_llm = int(d_llm)
        self.layer_index = int(layer_index)
        self.architecture = BlockArchitecture(architecture)

        expected = _MAMBA_SECTIONS if self.architecture == BlockArchitecture.MAMBA_BLOCK else _LINEAR_SECTIONS
        missing = [name for name in expected if name not in arrays]
        unexpected = sorted(set(arrays) - set(expected))
        if missing or unexpected:
            raise LoadError(f"Frozen block sections mismatch: missing={missing} unexpected={unexpected}")

        if self.architecture == BlockArchitecture.MAMBA_BLOCK:
            self.norm_gain = self.add_parameter("norm_gain", arrays["norm_gain"], frozen=True)
            self.norm_bias = self.add_parameter("norm_bias", arrays["norm_bias"], frozen=True)
            self.in_proj = self.add_parameter("in_proj", arrays["in_proj"], frozen=True)
            self.conv = self.add_parameter("conv", arrays["conv"], frozen=True)
            proj = SelectiveProjection(
                *(arrays[f"ssm.proj.{name}"] for name in ("w_delta", "b_delta", "w_b", "b_b", "w_c", "b_c")),
                frozen=True,
            )
            self.ssm = self.add_child(
                "ssm", SsmParams(SsmMode.SELECTIVE_RECURRENT, arrays["ssm.A"], selective_proj=proj, frozen=True)
            )
            self.out_proj = self.add_parameter("out_proj", arrays["out_proj"], frozen=True)
            width = self.in_proj.shape[0]
        else:
            self.weight = self.add_parameter("weight", arrays["weight"], frozen=True)
            self.bias = self.add_parameter("bias", arrays["bias"], frozen=True)
            width = self.weight.shape[0]

        if width != self.d_llm:
            raise LoadError(f"Frozen block weights have width {width} but the header declares d_llm={self.d_llm}")
        self.recorded_checksum = self.checksum()

    def checksum(self) -> str:
        """Digest of every weight in name order"""
        digest = hashlib.blake2b(digest_size=16)
        for name, parameter in self.named_parameters():
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(parameter.data).tobytes())
        return digest.hexdigest()

    def unfreeze_all(self) -> None:
        for parameter in self.parameters():
            parameter.unfreeze()

    def __call__(self, x) -> Tensor:
        return frozen_block_forward(self, x)


def frozen_block_forward(block: FrozenBlock, x) -> Tensor:
    x = as_tensor(x)
    if block.architecture == BlockArchitecture.LINEAR_RESIDUAL:
        return x + linear(x, block.weight, block.bias)

    inner = block.in_proj.shape[1] // 2
    hidden = matmul(layer_norm(x, block.norm_gain, block.norm_bias), block.in_proj)
    u = silu(conv1d(hidden[:, :inner], block.conv, causal=True))
    z = hidden[:, inner:]
    y = ssm_forward(block.ssm, u) * silu(z)
    return x + matmul(y, block.out_proj)


def make_surrogate_block(
    d_llm: int = 64,
    layer_index: int = 20,
    architecture: BlockArchitecture = BlockArchitecture.MAMBA_BLOCK,
    seed: int = 0,
    state_size: int = 8,
    conv_width: int = 4,
    out_scale: float = 0.1,
) -> FrozenBlock:
    """
    Seeded stand-in for a layer extracted from a pre-trained language model

    Weights are rounded to 32-bit precision so the in-memory block and its file agree bitwise.
    """
    architecture = BlockArchitecture(architecture)
    rng = np.random.default_rng(seed)
    if architecture == BlockArchitecture.LINEAR_RESIDUAL:
        arrays = {
            "weight": rng.normal(0.0, out_scale * d_llm ** -0.5, size=(d_llm, d_llm)),
            "bias": np.zeros(d_llm),
        }
    else:
        inner = 2 * d_llm
        ssm = init_selective_ssm(inner, state_size, rng)
        arrays = {
            "norm_gain": np.ones(d_llm),
            "norm_bias": np.zeros(d_llm),
            "in_proj": rng.normal(0.0, d_llm ** -0.5, size=(d_llm, 2 * inner)),
            "conv": rng.normal(0.0, conv_width ** -0.5, size=(conv_width, inner)),
            "out_proj": rng.normal(0.0, out_scale * inner ** -0.5, size=(inner, d_llm)),
        }
        arrays.update({f"ssm.{name}": value for name, value in ssm.state_dict().items()})

    arrays = {name: np.asarray(value, dtype=np.float32).astype(np.float64) for name, value in arrays.items()}
    block = FrozenBlock(arrays, d_llm, layer_index, architecture)
    logger.info(f"Surrogate frozen block created ({architecture.value}, d_llm={d_llm}, layer={layer_index}, seed={seed})")
    return block


def save_frozen_block(block: FrozenBlock, path: str) -> None:
    sections = [ContainerSection(name, parameter.data) for name, parameter in block.named_parameters()]
    write_container(
        path,
        Container(FROZEN_VERSION, block.architecture.tag, block.d_llm, block.layer_index, sections),
    )


def load_frozen_block(path: str, expected_dims: Optional[int] = None) -> FrozenBlock:
    """
    Load a frozen block file and record its checksum

    Args:
        path: Container file (version 1)
        expected_dims: Required d_llm, or None to accept the file's width

    Raises:
        FormatError: The file is malformed (no partial block is returned)
        LoadError: The file parsed but does not describe the expected block
    """
    if not os.path.exists(path):
        raise LoadError(f"Frozen block file not found: {path}")
    container = read_container(path)
    if container.version != FROZEN_VERSION:
        raise LoadError(f"{path} is a version {container.version} container, not a frozen block")
    if expected_dims is not None and container.d_llm != expected_dims:
        raise LoadError(f"Frozen block width mismatch: file has d_llm={container.d_llm}, expected {expected_dims}")

    architecture = BlockArchitecture.from_tag(container.architecture_tag)
    block = FrozenBlock(container.arrays(), container.d_llm, container.layer_index, architecture)
    logger.info(
        f"Loaded frozen block {path} ({architecture.value}, d_llm={block.d_llm}, layer={block.layer_index}, "
        f"checksum={block.recorded_checksum[:12]})"
    )
    return block


def verify_frozen(block: FrozenBlock) -> bool:
    """True iff the weights still match the checksum recorded at load time"""
    return block.checksum() == block.recorded_checksum


class LLMRefiner(ParameterGroup):
    """F_L1 (D -> d_llm) -> frozen block -> F_L2 (d_llm -> D)"""

    def __init__(
        self,
        d_model: int,
        block: FrozenBlock,
        rng: np.random.Generator,
        residual: bool = True,
        frozen: bool = True,
        out_scale: float = 0.1,
    ):
        super().__init__()
        d_llm = block.d_llm
        self.residual = residual
        self.w_in = self.add_parameter("w_in", rng.normal(0.0, d_model ** -0.5, size=(d_model, d_llm)))
        self.b_in = self.add_parameter("b_in", np.zeros(d_llm))
        self.block = self.add_child("llm", block)
        self.w_out = self.add_parameter("w_out", rng.normal(0.0, out_scale * d_llm ** -0.5, size=(d_llm, d_model)))
        self.b_out = self.add_parameter("b_out", np.zeros(d_model))
        if not frozen:
            block.unfreeze_all()
        logger.info(
            f"LLMRefiner initialized (D={d_model}, d_llm={d_llm}, residual={residual}, "
            f"frozen={frozen}, layer={block.layer_index})"
        )

    def __call__(self, Z_out) -> Tensor:
        return refine(self, Z_out)


def refine(params: LLMRefiner, Z_out) -> Tensor:
    Z_out = as_tensor(Z_out)
    hidden = linear(Z_out, params.w_in, params.b_in)
    hidden = frozen_block_forward(params.block, hidden)
    out = linear(hidden, params.w_out, params.b_out)
    return Z_out + out if params.residual else out

