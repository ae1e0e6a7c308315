"""
Numerics Tool
Dense tensors with tape-based reverse-mode gradients, the operations the grounding pipeline
is built from, and a finite-difference gradient oracle
"""

import contextlib
import contextvars
import logging
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from exceptions import DimensionError, NumericError, OracleError

logger = logging.getLogger(__name__)

_GRAD_ENABLED = contextvars.ContextVar("grad_enabled", default=True)
_DEFAULT_DTYPE = np.float64

LAYER_NORM_EPS = 1e-5


def set_default_dtype(dtype) -> None:
    """Select the scalar precision used for new tensors (float64 or float32)"""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"Unsupported dtype: {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run the enclosed block without recording operations on the tape"""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


class Tensor:
    """
    Dense n-dimensional array with optional gradient tracking
    Operations record their parents and a backward closure; backward() replays them in
    reverse topological order and accumulates gradients into leaf tensors
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """
        Back-propagate from this tensor

        Args:
            grad: Upstream gradient; defaults to ones (the usual choice for a scalar loss)
        """
        if not self.requires_grad:
            return

        order = _topological_order(self)
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.data.dtype)
        if seed.shape != self.shape:
            raise DimensionError(f"Upstream gradient shape {seed.shape} does not match tensor shape {self.shape}")
        grads: Dict[int, np.ndarray] = {id(self): seed}

        for node in reversed(order):
            node_grad = grads.pop(id(node), None)
            if node_grad is None:
                continue
            if node._backward is None:
                node.grad = node_grad.copy() if node.grad is None else node.grad + node_grad
                continue
            for parent, parent_grad in zip(node._parents, node._backward(node_grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + parent_grad if key in grads else parent_grad


class Parameter(Tensor):
    """Named trainable (or frozen) tensor owned by a model component"""

    __slots__ = ("name", "frozen")

    def __init__(self, data, name: str = "", frozen: bool = False, dtype=None):
        array = np.array(data, dtype=dtype or _DEFAULT_DTYPE, copy=True)
        super().__init__(np.ascontiguousarray(array), requires_grad=not frozen)
        self.name = name
        self.frozen = bool(frozen)

    @property
    def value(self) -> Tensor:
        return self

    def freeze(self) -> None:
        self.frozen = True
        self.requires_grad = False
        self.grad = None

    def unfreeze(self) -> None:
        self.frozen = False
        self.requires_grad = True

    def __repr__(self) -> str:
        state = "frozen" if self.frozen else "trainable"
        return f"Parameter(name={self.name!r}, shape={self.shape}, {state})"


class ParameterGroup:
    """Ordered collection of named parameters and child groups"""

    def __init__(self):
        self._parameters: Dict[str, Parameter] = {}
        self._children: Dict[str, "ParameterGroup"] = {}

    def add_parameter(self, name: str, data, frozen: bool = False) -> Parameter:
        parameter = Parameter(data, name=name, frozen=frozen)
        self._parameters[name] = parameter
        return parameter

    def add_child(self, name: str, group: "ParameterGroup") -> "ParameterGroup":
        self._children[name] = group
        return group

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Parameter]]:
        named = [(f"{prefix}{name}", parameter) for name, parameter in self._parameters.items()]
        for child_name, child in self._children.items():
            named.extend(child.named_parameters(f"{prefix}{child_name}."))
        return named

    def parameters(self) -> List[Parameter]:
        return [parameter for _, parameter in self.named_parameters()]

    def trainable_parameters(self) -> List[Parameter]:
        return [parameter for parameter in self.parameters() if not parameter.frozen]

    def zero_grad(self) -> None:
        for parameter in self.parameters():
            parameter.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: parameter.data.copy() for name, parameter in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        named = dict(self.named_parameters())
        if strict:
            missing = sorted(set(named) - set(state))
            unexpected = sorted(set(state) - set(named))
            if missing or unexpected:
                raise DimensionError(f"State mismatch: missing={missing} unexpected={unexpected}")
        for name, array in state.items():
            if name not in named:
                continue
            parameter = named[name]
            if tuple(array.shape) != parameter.shape:
                raise DimensionError(
                    f"Parameter '{name}' expects shape {parameter.shape}, got {tuple(array.shape)}"
                )
            parameter.data[...] = array


TensorLike = Union[Tensor, np.ndarray, float, int, Sequence[float]]


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def record_op(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    track = _GRAD_ENABLED.get() and any(parent.requires_grad for parent in parents)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data)
    out.requires_grad = track
    out.grad = None
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    flat = x.reshape(-1)
    out = np.empty_like(flat)
    positive = flat >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-flat[positive]))
    exp_neg = np.exp(flat[~positive])
    out[~positive] = exp_neg / (1.0 + exp_neg)
    return out.reshape(x.shape)


def _check_finite(array: np.ndarray, operation: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NumericError(f"{operation} received non-finite input")


# ----- elementwise arithmetic -----

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)

    return record_op(a.data + b.data, (a, b), backward)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)

    return record_op(a.data - b.data, (a, b), backward)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(grad):
        return _unbroadcast(grad * b.data, a.shape), _unbroadcast(grad * a.data, b.shape)

    return record_op(a.data * b.data, (a, b), backward)


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(grad):
        return (
            _unbroadcast(grad / b.data, a.shape),
            _unbroadcast(-grad * a.data / (b.data * b.data), b.shape),
        )

    return record_op(a.data / b.data, (a, b), backward)


def neg(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return record_op(-a.data, (a,), lambda grad: (-grad,))


def power(a: TensorLike, exponent: float) -> Tensor:
    a = as_tensor(a)

    def backward(grad):
        return (grad * exponent * a.data ** (exponent - 1),)

    return record_op(a.data ** exponent, (a,), backward)


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)
    return record_op(out_data, (a,), lambda grad: (grad * out_data,))


def log(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return record_op(np.log(a.data), (a,), lambda grad: (grad / a.data,))


def sqrt(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)
    return record_op(out_data, (a,), lambda grad: (grad / (2.0 * out_data),))


def absolute(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return record_op(np.abs(a.data), (a,), lambda grad: (grad * np.sign(a.data),))


def maximum(a: TensorLike, b: TensorLike) -> Tensor:
    """Elementwise maximum; ties send the gradient to the first operand"""
    a, b = as_tensor(a), as_tensor(b)
    mask = a.data >= b.data

    def backward(grad):
        return _unbroadcast(grad * mask, a.shape), _unbroadcast(grad * ~mask, b.shape)

    return record_op(np.where(mask, a.data, b.data), (a, b), backward)


def minimum(a: TensorLike, b: TensorLike) -> Tensor:
    """Elementwise minimum; ties send the gradient to the first operand"""
    a, b = as_tensor(a), as_tensor(b)
    mask = a.data <= b.data

    def backward(grad):
        return _unbroadcast(grad * mask, a.shape), _unbroadcast(grad * ~mask, b.shape)

    return record_op(np.where(mask, a.data, b.data), (a, b), backward)


def relu(a: TensorLike) -> Tensor:
    return maximum(a, 0.0)


# ----- activations -----

def sigmoid(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out_data = _stable_sigmoid(a.data)
    return record_op(out_data, (a,), lambda grad: (grad * out_data * (1.0 - out_data),))


def silu(a: TensorLike) -> Tensor:
    """x * sigmoid(x)"""
    a = as_tensor(a)
    sig = _stable_sigmoid(a.data)

    def backward(grad):
        return (grad * sig * (1.0 + a.data * (1.0 - sig)),)

    return record_op(a.data * sig, (a,), backward)


def softplus(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return record_op(np.logaddexp(0.0, a.data), (a,), lambda grad: (grad * _stable_sigmoid(a.data),))


def softmax(x: TensorLike, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along one axis"""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {x.shape}")
    _check_finite(x.data, "softmax")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    exps = np.exp(shifted)
    out_data = exps / np.sum(exps, axis=axis, keepdims=True)

    def backward(grad):
        return (out_data * (grad - np.sum(grad * out_data, axis=axis, keepdims=True)),)

    return record_op(out_data, (x,), backward)


def log_softmax(x: TensorLike, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"log_softmax axis {axis} out of range for shape {x.shape}")
    _check_finite(x.data, "log_softmax")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    out_data = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def backward(grad):
        return (grad - np.exp(out_data) * np.sum(grad, axis=axis, keepdims=True),)

    return record_op(out_data, (x,), backward)


# ----- shape manipulation and reductions -----

def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def backward(grad):
        return grad @ b.data.T, a.data.T @ grad

    return record_op(a.data @ b.data, (a, b), backward)


def transpose(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return record_op(a.data.T, (a,), lambda grad: (grad.T,))


def reshape(a: TensorLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return record_op(a.data.reshape(shape), (a,), lambda grad: (grad.reshape(a.shape),))


def take(a: TensorLike, index) -> Tensor:
    """Indexing with gradient scatter back into the source"""
    a = as_tensor(a)

    def backward(grad):
        full = np.zeros_like(a.data)
        np.add.at(full, index, grad)
        return (full,)

    return record_op(np.array(a.data[index]), (a,), backward)


def concat(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(grad):
        return tuple(np.split(grad, cuts, axis=axis))

    return record_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def flip(a: TensorLike, axis: int = 0) -> Tensor:
    """Reverse along an axis (time reversal for sequences)"""
    a = as_tensor(a)
    return record_op(np.flip(a.data, axis=axis).copy(), (a,), lambda grad: (np.flip(grad, axis=axis).copy(),))


def tensor_sum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(grad):
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, a.shape).copy(),)

    return record_op(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tensor_sum(a, axis=axis, keepdims=keepdims) / float(count)


# ----- layers -----

def linear(x: TensorLike, weight: TensorLike, bias: Optional[TensorLike] = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def layer_norm(x: TensorLike, gain: TensorLike, bias: TensorLike, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply gain and bias"""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(
            f"layer_norm gain {gain.shape} / bias {bias.shape} must match last axis {width}"
        )
    centered = x.data - np.mean(x.data, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True) + eps)
    normalized = centered * inv_std

    def backward(grad):
        reduce_axes = tuple(range(x.ndim - 1))
        grad_gain = np.sum(grad * normalized, axis=reduce_axes)
        grad_bias = np.sum(grad, axis=reduce_axes)
        grad_norm = grad * gain.data
        grad_x = inv_std * (
            grad_norm
            - np.mean(grad_norm, axis=-1, keepdims=True)
            - normalized * np.mean(grad_norm * normalized, axis=-1, keepdims=True)
        )
        return grad_x, grad_gain, grad_bias

    return record_op(normalized * gain.data + bias.data, (x, gain, bias), backward)


def conv1d(x: TensorLike, kernel: TensorLike, causal: bool = True) -> Tensor:
    """
    Depthwise 1-D convolution along the sequence axis

    Causal mode computes y[t] = sum_j kernel[j] * x[t - j] (left padding only); otherwise the
    window is centred and padded on both sides so the output keeps length L.

    Args:
        x: Sequence of shape (L, D)
        kernel: Per-channel taps of shape (w, D)
        causal: Pad on the left only

    Returns:
        Tensor of shape (L, D)
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 2 or kernel.ndim != 2 or kernel.shape[1] != x.shape[1]:
        raise DimensionError(f"conv1d shape mismatch: x {x.shape}, kernel {kernel.shape}")
    width = kernel.shape[0]
    if width < 1:
        raise DimensionError("conv1d kernel width must be at least 1")

    length = x.shape[0]
    shift = 0 if causal else (width - 1) // 2
    left = width - 1 - shift
    padded = np.zeros((length + width - 1, x.shape[1]), dtype=x.data.dtype)
    padded[left:left + length] = x.data

    out_data = np.zeros_like(x.data)
    for tap in range(width):
        start = width - 1 - tap
        out_data += kernel.data[tap] * padded[start:start + length]

    def backward(grad):
        grad_padded = np.zeros_like(padded)
        grad_kernel = np.zeros_like(kernel.data)
        for tap in range(width):
            start = width - 1 - tap
            grad_padded[start:start + length] += kernel.data[tap] * grad
            grad_kernel[tap] = np.sum(grad * padded[start:start + length], axis=0)
        return grad_padded[left:left + length], grad_kernel

    return record_op(out_data, (x, kernel), backward)


def l2_normalize_rows(x: TensorLike, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit length; all-zero rows stay zero"""
    x = as_tensor(x)
    norms = sqrt(tensor_sum(x * x, axis=-1, keepdims=True) + eps)
    return x / norms


# ----- verification -----

def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    step: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-5,
) -> float:
    """
    Compare tape gradients with central finite differences

    Args:
        f: Deterministic closure returning a scalar loss tensor
        params: Parameters to perturb; frozen ones are skipped
        step: Finite-difference step
        max_entries: Optional cap on checked entries per parameter (seeded sample)
        seed: Seed for the entry sample
        floor: Absolute floor of the relative-error denominator

    Returns:
        Maximum relative error over all checked entries
    """
    if step <= 0:
        raise ValueError("step must be positive")

    checked = [p for p in params if not getattr(p, "frozen", False) and p.requires_grad]
    for parameter in params:
        parameter.grad = None

    loss = f()
    repeat = f()
    if loss.data.shape != () and loss.size != 1:
        raise DimensionError(f"grad_check needs a scalar loss, got shape {loss.shape}")
    if float(loss.data) != float(repeat.data):
        raise OracleError("Loss closure is not deterministic: repeated evaluation differs")
    loss.backward()

    analytic = {
        id(p): (np.zeros_like(p.data) if p.grad is None else p.grad.copy()).reshape(-1)
        for p in checked
    }
    rng = np.random.default_rng(seed)
    worst = 0.0

    with no_grad():
        for parameter in checked:
            flat = parameter.data.reshape(-1)
            if not np.shares_memory(flat, parameter.data):
                raise OracleError(f"Parameter '{parameter.name}' is not contiguous")
            indices = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                indices = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            for index in indices:
                original = flat[index]
                flat[index] = original + step
                plus = float(f().data)
                flat[index] = original - step
                minus = float(f().data)
                flat[index] = original
                numeric = (plus - minus) / (2.0 * step)
                exact = analytic[id(parameter)][index]
                error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
                worst = max(worst, error)

    logger.debug(f"grad_check over {len(checked)} parameters: max relative error {worst:.3e}")
    return worst
