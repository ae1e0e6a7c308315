"""
State-space sequence primitive
Sequential recurrence, impulse-response kernel form, input-selective recurrence and an
associative prefix-scan path, all returning the same map for matching parameters
"""

import logging
from enum import Enum
from typing import Dict, Optional, Tuple

import numpy as np

from exceptions import DimensionError, NumericError, UnsupportedModeError, ValidationError
from tools.numerics import (
    ParameterGroup,
    Tensor,
    record_op,
    as_tensor,
    conv1d,
    linear,
    softplus,
)

logger = logging.getLogger(__name__)


class SsmMode(str, Enum):
    LTI_RECURRENT = "lti_recurrent"
    LTI_KERNEL = "lti_kernel"
    SELECTIVE_RECURRENT = "selective_recurrent"
    SELECTIVE_PARALLEL_SCAN = "selective_parallel_scan"

    @property
    def is_selective(self) -> bool:
        return self in (SsmMode.SELECTIVE_RECURRENT, SsmMode.SELECTIVE_PARALLEL_SCAN)


class SelectiveProjection(ParameterGroup):
    """Projections producing the per-step step size and input/output vectors from x"""

    def __init__(self, w_delta, b_delta, w_b, b_b, w_c, b_c, frozen: bool = False):
        super().__init__()
        self.w_delta = self.add_parameter("w_delta", w_delta, frozen)
        self.b_delta = self.add_parameter("b_delta", b_delta, frozen)
        self.w_b = self.add_parameter("w_b", w_b, frozen)
        self.b_b = self.add_parameter("b_b", b_b, frozen)
        self.w_c = self.add_parameter("w_c", w_c, frozen)
        self.b_c = self.add_parameter("b_c", b_c, frozen)


class SsmParams(ParameterGroup):
    """
    (A, B, C) of a bank of D independent single-input channels with state size N

    A is either diagonal, stored as (D, N), or dense, stored as (D, N, N). LTI modes carry
    constant B and C of shape (D, N); selective modes derive them per step from the input.
    """

    def __init__(
        self,
        mode: SsmMode,
        A,
        B=None,
        C=None,
        selective_proj: Optional[SelectiveProjection] = None,
        frozen: bool = False,
    ):
        super().__init__()
        self.mode = SsmMode(mode)
        self.A = self.add_parameter("A", A, frozen)
        self.B = self.add_parameter("B", B, frozen) if B is not None else None
        self.C = self.add_parameter("C", C, frozen) if C is not None else None
        self.selective_proj = selective_proj
        if selective_proj is not None:
            self.add_child("proj", selective_proj)
        self.validate()

    @property
    def diagonal(self) -> bool:
        return self.A.ndim == 2

    @property
    def channels(self) -> int:
        return self.A.shape[0]

    @property
    def state_size(self) -> int:
        return self.A.shape[1]

    def validate(self) -> None:
        if self.A.ndim not in (2, 3) or (self.A.ndim == 3 and self.A.shape[1] != self.A.shape[2]):
            raise ValidationError(f"A must be (D, N) or (D, N, N), got {self.A.shape}")
        if self.mode.is_selective:
            if self.selective_proj is None:
                raise ValidationError(f"{self.mode.value} requires selective projections")
            if not self.diagonal:
                raise ValidationError("Selective modes require a diagonal A")
        else:
            if self.selective_proj is not None:
                raise ValidationError(f"{self.mode.value} must not carry selective projections")
            expected = (self.channels, self.state_size)
            if self.B is None or self.C is None or self.B.shape != expected or self.C.shape != expected:
                raise ValidationError(f"LTI modes need B and C of shape {expected}")


# ----- construction -----

def inverse_softplus(value: np.ndarray) -> np.ndarray:
    value = np.asarray(value, dtype=float)
    return value + np.log(-np.expm1(-value))


def init_selective_ssm(
    channels: int,
    state_size: int,
    rng: np.random.Generator,
    mode: SsmMode = SsmMode.SELECTIVE_RECURRENT,
    dt_min: float = 1e-3,
    dt_max: float = 1e-1,
    a_scale: float = 1.0,
    frozen: bool = False,
) -> SsmParams:
    """A = -(1..N) per channel, step-size bias spread log-uniformly in [dt_min, dt_max]"""
    A = -a_scale * np.tile(np.arange(1, state_size + 1, dtype=float), (channels, 1))
    dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=channels))
    scale = channels ** -0.5
    proj = SelectiveProjection(
        w_delta=rng.normal(0.0, 0.1 * scale, size=(channels, channels)),
        b_delta=inverse_softplus(dt),
        w_b=rng.normal(0.0, scale, size=(channels, state_size)),
        b_b=np.zeros(state_size),
        w_c=rng.normal(0.0, scale, size=(channels, state_size)),
        b_c=np.zeros(state_size),
        frozen=frozen,
    )
    return SsmParams(mode, A, selective_proj=proj, frozen=frozen)


def init_lti_ssm(
    channels: int,
    state_size: int,
    rng: np.random.Generator,
    mode: SsmMode = SsmMode.LTI_RECURRENT,
    delta: float = 0.1,
) -> SsmParams:
    """Diagonal LTI system discretized once from A = -(1..N) with a fixed step"""
    continuous = -np.tile(np.arange(1, state_size + 1, dtype=float), (channels, 1))
    A = np.exp(delta * continuous)
    B = delta * rng.normal(0.0, 1.0, size=(channels, state_size))
    C = rng.normal(0.0, state_size ** -0.5, size=(channels, state_size))
    return SsmParams(mode, A, B=B, C=C)


# ----- raw numpy kernels -----

def scan_combine(left: Tuple[np.ndarray, np.ndarray], right: Tuple[np.ndarray, np.ndarray]):
    """Compose h -> a1*h + b1 followed by h -> a2*h + b2"""
    a1, b1 = left
    a2, b2 = right
    return a1 * a2, a2 * b1 + b2


def associative_scan(multipliers: np.ndarray, increments: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Inclusive prefix scan of (multiplier, increment) pairs along axis 0

    Log-depth doubling: at each round every element absorbs the prefix that ends
    `offset` positions earlier.
    """
    a = multipliers.copy()
    b = increments.copy()
    offset = 1
    length = a.shape[0]
    while offset < length:
        prefix = (a[:-offset], b[:-offset])
        a_new, b_new = scan_combine(prefix, (a[offset:], b[offset:]))
        a = np.concatenate([a[:offset], a_new], axis=0)
        b = np.concatenate([b[:offset], b_new], axis=0)
        offset *= 2
    return a, b


def selective_scan_reference(
    x: np.ndarray,
    delta: np.ndarray,
    A: np.ndarray,
    Bt: np.ndarray,
    Ct: np.ndarray,
    h0: Optional[np.ndarray] = None,
    keep_states: bool = True,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Left-to-right selective recurrence

    h_t = exp(delta_t * A) * h_{t-1} + delta_t * x_t * B_t,  y_t = h_t . C_t

    Args:
        x, delta: (L, D)
        A: (D, N) diagonal state matrix
        Bt, Ct: (L, N)
        h0: Optional initial state (D, N)
        keep_states: Return the (L, D, N) state trajectory

    Returns:
        (y of shape (L, D), states or None)
    """
    length, channels = x.shape
    h = np.zeros(A.shape, dtype=x.dtype) if h0 is None else np.array(h0, dtype=x.dtype)
    y = np.empty((length, channels), dtype=x.dtype)
    states = np.empty((length,) + A.shape, dtype=x.dtype) if keep_states else None
    drive = delta * x
    for t in range(length):
        h = np.exp(delta[t][:, None] * A) * h + drive[t][:, None] * Bt[t][None, :]
        if not np.all(np.isfinite(h)):
            raise NumericError("SSM state became non-finite", step=t)
        y[t] = h @ Ct[t]
        if keep_states:
            states[t] = h
    return y, states


def _lti_recurrence(x: np.ndarray, A: np.ndarray, B: np.ndarray, C: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    length, channels = x.shape
    h = np.zeros(B.shape, dtype=x.dtype)
    y = np.empty((length, channels), dtype=x.dtype)
    states = np.empty((length,) + B.shape, dtype=x.dtype)
    diagonal = A.ndim == 2

    for t in range(length):
        carried = A * h if diagonal else np.einsum("dij,dj->di", A, h)
        h = carried + B * x[t][:, None]
        if not np.all(np.isfinite(h)):
            raise NumericError("SSM state became non-finite", step=t)
        y[t] = np.sum(C * h, axis=1)
        states[t] = h
    return y, states


def _first_nonfinite_step(states: np.ndarray) -> Optional[int]:
    bad = ~np.all(np.isfinite(states.reshape(states.shape[0], -1)), axis=1)
    return int(np.argmax(bad)) if bad.any() else None


# ----- tape operations -----

def _lti_scan_op(x: Tensor, A: Tensor, B: Tensor, C: Tensor, parallel: bool = False) -> Tensor:
    if parallel:
        multipliers = np.ascontiguousarray(np.broadcast_to(A.data, (x.shape[0],) + A.shape))
        increments = x.data[:, :, None] * B.data[None]
        _, states = associative_scan(multipliers, increments)
        bad_step = _first_nonfinite_step(states)
        if bad_step is not None:
            raise NumericError("SSM state became non-finite", step=bad_step)
        y = np.sum(states * C.data[None], axis=2)
    else:
        y, states = _lti_recurrence(x.data, A.data, B.data, C.data)
    diagonal = A.ndim == 2

    def backward(grad):
        grad_x = np.zeros_like(x.data)
        grad_A = np.zeros_like(A.data)
        grad_B = np.zeros_like(B.data)
        grad_C = np.zeros_like(C.data)
        grad_h = np.zeros_like(B.data)
        for t in range(x.shape[0] - 1, -1, -1):
            grad_h = grad_h + grad[t][:, None] * C.data
            grad_C += grad[t][:, None] * states[t]
            previous = states[t - 1] if t > 0 else np.zeros_like(grad_h)
            if diagonal:
                grad_A += grad_h * previous
            else:
                grad_A += np.einsum("di,dj->dij", grad_h, previous)
            grad_B += grad_h * x.data[t][:, None]
            grad_x[t] = np.sum(grad_h * B.data, axis=1)
            grad_h = grad_h * A.data if diagonal else np.einsum("dij,di->dj", A.data, grad_h)
        return grad_x, grad_A, grad_B, grad_C

    return record_op(y, (x, A, B, C), backward)


def _selective_backward(x, delta, A, Bt, Ct, states, grad):
    length = x.shape[0]
    grad_x = np.zeros_like(x)
    grad_delta = np.zeros_like(delta)
    grad_A = np.zeros_like(A)
    grad_Bt = np.zeros_like(Bt)
    grad_Ct = np.zeros_like(Ct)
    grad_h = np.zeros(A.shape, dtype=x.dtype)
    for t in range(length - 1, -1, -1):
        decay = np.exp(delta[t][:, None] * A)
        grad_h = grad_h + grad[t][:, None] * Ct[t][None, :]
        grad_Ct[t] = grad[t] @ states[t]
        previous = states[t - 1] if t > 0 else np.zeros_like(grad_h)
        grad_decay = grad_h * previous * decay
        grad_delta[t] += np.sum(grad_decay * A, axis=1)
        grad_A += grad_decay * delta[t][:, None]
        grad_drive = grad_h @ Bt[t]
        grad_delta[t] += grad_drive * x[t]
        grad_x[t] = grad_drive * delta[t]
        grad_Bt[t] = (delta[t] * x[t]) @ grad_h
        grad_h = grad_h * decay
    return grad_x, grad_delta, grad_A, grad_Bt, grad_Ct


def _selective_scan_op(x: Tensor, delta: Tensor, A: Tensor, Bt: Tensor, Ct: Tensor, parallel: bool) -> Tensor:
    track = any(t.requires_grad for t in (x, delta, A, Bt, Ct))
    if parallel:
        multipliers = np.exp(delta.data[:, :, None] * A.data[None, :, :])
        increments = (delta.data * x.data)[:, :, None] * Bt.data[:, None, :]
        _, states = associative_scan(multipliers, increments)
        bad_step = _first_nonfinite_step(states)
        if bad_step is not None:
            raise NumericError("SSM state became non-finite", step=bad_step)
        y = np.einsum("ldn,ln->ld", states, Ct.data)
    else:
        y, states = selective_scan_reference(x.data, delta.data, A.data, Bt.data, Ct.data, keep_states=track)

    def backward(grad):
        return _selective_backward(x.data, delta.data, A.data, Bt.data, Ct.data, states, grad)

    return record_op(y, (x, delta, A, Bt, Ct), backward)


def _kernel_op(params: SsmParams, length: int) -> Tensor:
    A, B, C = params.A, params.B, params.C
    if params.diagonal:
        powers = np.empty((length,) + A.shape, dtype=A.data.dtype)
        powers[0] = 1.0
        for k in range(1, length):
            powers[k] = powers[k - 1] * A.data
        kernel = np.sum(powers * (C.data * B.data)[None], axis=2)

        def backward(grad):
            weighted = grad[:, :, None] * powers
            grad_B = np.sum(weighted, axis=0) * C.data
            grad_C = np.sum(weighted, axis=0) * B.data
            steps = np.arange(1, length, dtype=A.data.dtype)[:, None, None]
            grad_A = np.sum(grad[1:, :, None] * steps * powers[:-1], axis=0) * C.data * B.data
            return grad_A, grad_B, grad_C

        return record_op(kernel, (A, B, C), backward)

    # dense A: forward-only materialization
    kernel = np.empty((length, params.channels), dtype=A.data.dtype)
    vector = B.data.copy()
    for k in range(length):
        kernel[k] = np.sum(C.data * vector, axis=1)
        vector = np.einsum("dij,dj->di", A.data, vector)
    return Tensor(kernel)


# ----- public operations -----

def selective_inputs(params: SsmParams, x: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    """Per-step (delta, B_t, C_t) from the input; softplus keeps delta positive"""
    proj = params.selective_proj
    delta = softplus(linear(x, proj.w_delta, proj.b_delta))
    Bt = linear(x, proj.w_b, proj.b_b)
    Ct = linear(x, proj.w_c, proj.b_c)
    return delta, Bt, Ct


def ssm_kernel(params: SsmParams, length: int) -> Tensor:
    """
    Impulse response K[k] = C A^k B for k = 0..L-1, one column per channel

    Args:
        params: LTI parameters
        length: Kernel length L (>= 1)

    Returns:
        Tensor of shape (L, D)
    """
    if params.mode.is_selective:
        raise UnsupportedModeError(f"ssm_kernel is undefined for {params.mode.value}")
    if length < 1:
        raise DimensionError("Kernel length must be at least 1")
    return _kernel_op(params, length)


def _check_input(params: SsmParams, x: Tensor) -> None:
    if x.ndim != 2 or x.shape[1] != params.channels:
        raise DimensionError(f"SSM expects input (L, {params.channels}), got {x.shape}")


def ssm_scan_recurrent(params: SsmParams, x) -> Tensor:
    """Sequential recurrence from a zero initial state (ground truth for every other form)"""
    x = as_tensor(x)
    _check_input(params, x)
    if params.mode.is_selective:
        delta, Bt, Ct = selective_inputs(params, x)
        return _selective_scan_op(x, delta, params.A, Bt, Ct, parallel=False)
    return _lti_scan_op(x, params.A, params.B, params.C)


def ssm_scan_parallel(params: SsmParams, x) -> Tensor:
    """Same map as ssm_scan_recurrent, evaluated with a log-depth associative scan"""
    x = as_tensor(x)
    _check_input(params, x)
    if not params.diagonal:
        raise UnsupportedModeError("Parallel scan requires a diagonal A")
    if params.mode.is_selective:
        delta, Bt, Ct = selective_inputs(params, x)
        return _selective_scan_op(x, delta, params.A, Bt, Ct, parallel=True)

    return _lti_scan_op(x, params.A, params.B, params.C, parallel=True)


def ssm_convolve(params: SsmParams, x) -> Tensor:
    """Kernel form: y = x * K as a causal convolution with the full-length impulse response"""
    x = as_tensor(x)
    _check_input(params, x)
    return conv1d(x, ssm_kernel(params, x.shape[0]), causal=True)


def ssm_forward(params: SsmParams, x) -> Tensor:
    """Dispatch on the configured mode"""
    if params.mode == SsmMode.LTI_KERNEL:
        return ssm_convolve(params, x)
    if params.mode == SsmMode.SELECTIVE_PARALLEL_SCAN:
        return ssm_scan_parallel(params, x)
    return ssm_scan_recurrent(params, x)


def ssm_backward(params: SsmParams, x: np.ndarray, upstream_grad: np.ndarray) -> Dict[str, np.ndarray]:
    """
    Gradients of <upstream_grad, ssm_forward(params, x)> with respect to x and every
    trainable parameter

    Returns:
        Dictionary with key "x" plus one entry per trainable parameter name
    """
    inputs = Tensor(np.array(x, copy=True), requires_grad=True)
    params.zero_grad()
    output = ssm_forward(params, inputs)
    output.backward(np.asarray(upstream_grad, dtype=output.data.dtype))

    grads = {"x": inputs.grad if inputs.grad is not None else np.zeros_like(inputs.data)}
    for name, parameter in params.named_parameters():
        if parameter.frozen:
            continue
        grads[name] = parameter.grad if parameter.grad is not None else np.zeros_like(parameter.data)
    return grads
