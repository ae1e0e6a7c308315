import numpy as np
import pytest

from conftest import weighted_sum
from exceptions import DimensionError, NumericError, OracleError
from tools.numerics import (
    Parameter,
    ParameterGroup,
    absolute,
    concat,
    conv1d,
    div,
    exp,
    flip,
    grad_check,
    l2_normalize_rows,
    layer_norm,
    log_softmax,
    matmul,
    maximum,
    no_grad,
    power,
    sigmoid,
    silu,
    softmax,
    softplus,
    sqrt,
    take,
    tensor_sum,
)
from tools.optimizer import AdamOptimizer


def matmul_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def conv_loop(x, kernel, causal):
    length, width = x.shape[0], kernel.shape[0]
    shift = 0 if causal else (width - 1) // 2
    out = np.zeros_like(x)
    for t in range(length):
        for j in range(width):
            source = t - j + shift
            if 0 <= source < length:
                out[t] += kernel[j] * x[source]
    return out


# ----- matmul -----

def test_matmul_identity(rng):
    X = rng.normal(size=(3, 4))
    assert np.array_equal(matmul(np.eye(3), X).data, X)


def test_matmul_hand_case():
    assert matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]]).data.tolist() == [[3.0], [7.0]]


def test_matmul_matches_loop(rng):
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 2))
    np.testing.assert_allclose(matmul(a, b).data, matmul_loop(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_associative(rng):
    for _ in range(5):
        a, b, c = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5, 2))
        left = matmul(matmul(a, b), c).data
        right = matmul(a, matmul(b, c)).data
        np.testing.assert_allclose(left, right, rtol=0, atol=1e-9)


# ----- softmax -----

def test_softmax_uniform():
    np.testing.assert_allclose(softmax([0.0, 0.0, 0.0]).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_no_overflow():
    out = softmax([1000.0, 0.0]).data
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)


def test_softmax_matches_direct_formula(rng):
    x = rng.normal(size=6)
    expected = np.exp(np.longdouble(x)) / np.exp(np.longdouble(x)).sum()
    np.testing.assert_allclose(softmax(x).data, expected.astype(float), atol=1e-12)


def test_softmax_rows_are_distributions(rng):
    out = softmax(rng.normal(size=(5, 7)) * 10, axis=1).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_softmax_rejects_non_finite_input():
    with pytest.raises(NumericError):
        softmax([0.0, np.nan])


# ----- silu -----

def test_silu_values():
    assert silu([0.0]).data[0] == 0.0
    assert abs(silu([50.0]).data[0] - 50.0) < 1e-12


def test_silu_gradient(rng):
    x = Parameter(rng.normal(size=7) * 3)
    assert grad_check(lambda: tensor_sum(silu(x)), [x]) < 1e-6


# ----- layer_norm -----

def test_layer_norm_constant_row_is_zero():
    out = layer_norm(np.full((1, 4), 5.0), np.ones(4), np.zeros(4)).data
    assert np.all(out == 0.0)


def test_layer_norm_standardizes():
    out = layer_norm([[1.0, 2.0, 3.0]], np.ones(3), np.zeros(3), eps=0.0).data[0]
    assert abs(out.mean()) < 1e-12
    assert abs(out.var() - 1.0) < 1e-9


def test_layer_norm_gradient(rng):
    x = Parameter(rng.normal(size=(3, 5)))
    gain = Parameter(rng.normal(size=5))
    bias = Parameter(rng.normal(size=5))
    weights = rng.normal(size=(3, 5))
    error = grad_check(lambda: weighted_sum(layer_norm(x, gain, bias), weights), [x, gain, bias])
    assert error < 1e-5


def test_layer_norm_rejects_wrong_gain():
    with pytest.raises(DimensionError):
        layer_norm(np.ones((2, 3)), np.ones(4), np.zeros(4))


# ----- conv1d -----

def test_conv1d_unit_kernel_is_identity(rng):
    x = rng.normal(size=(6, 3))
    assert np.array_equal(conv1d(x, np.ones((1, 3))).data, x)


def test_conv1d_impulse_response():
    x = np.zeros((7, 1))
    x[2, 0] = 1.0
    kernel = np.array([[2.0], [3.0], [5.0]])
    out = conv1d(x, kernel, causal=True).data[:, 0]
    assert out.tolist() == [0.0, 0.0, 2.0, 3.0, 5.0, 0.0, 0.0]


@pytest.mark.parametrize("causal", [True, False])
def test_conv1d_matches_loop(rng, causal):
    x, kernel = rng.normal(size=(9, 4)), rng.normal(size=(3, 4))
    np.testing.assert_allclose(conv1d(x, kernel, causal=causal).data, conv_loop(x, kernel, causal), atol=1e-12)


@pytest.mark.parametrize("causal", [True, False])
def test_conv1d_gradient(rng, causal):
    x = Parameter(rng.normal(size=(8, 3)))
    kernel = Parameter(rng.normal(size=(3, 3)))
    weights = rng.normal(size=(8, 3))
    assert grad_check(lambda: weighted_sum(conv1d(x, kernel, causal), weights), [x, kernel]) < 1e-4


# ----- gradient oracle -----

def test_grad_check_quadratic():
    x = Parameter([3.0])
    assert grad_check(lambda: tensor_sum(x * x), [x]) < 1e-8
    np.testing.assert_allclose(x.grad, [6.0])


def test_grad_check_skips_frozen():
    frozen = Parameter([1.0, 2.0], frozen=True)
    assert grad_check(lambda: tensor_sum(frozen * frozen), [frozen]) == 0.0
    assert frozen.grad is None


def test_grad_check_detects_non_deterministic_closure():
    x = Parameter([1.0])
    noise = np.random.default_rng(0)
    with pytest.raises(OracleError):
        grad_check(lambda: tensor_sum(x * float(noise.normal())), [x])


def test_grad_check_needs_positive_step():
    x = Parameter([1.0])
    with pytest.raises(ValueError):
        grad_check(lambda: tensor_sum(x), [x], step=0.0)


OPERATIONS = {
    "exp": lambda a, b: exp(a),
    "sigmoid": lambda a, b: sigmoid(a),
    "softplus": lambda a, b: softplus(a),
    "softmax": lambda a, b: softmax(a, axis=1),
    "log_softmax": lambda a, b: log_softmax(a, axis=0),
    "div": lambda a, b: div(a, b),
    "power": lambda a, b: power(b, 3.0),
    "sqrt": lambda a, b: sqrt(b),
    "absolute": lambda a, b: absolute(a),
    "maximum": lambda a, b: maximum(a, b),
    "take": lambda a, b: take(a, np.array([2, 0, 2])),
    "concat": lambda a, b: concat([a, b], axis=0),
    "flip": lambda a, b: flip(a, axis=0),
    "normalize": lambda a, b: l2_normalize_rows(a),
    "matmul": lambda a, b: matmul(a, b.T),
}


@pytest.mark.parametrize("name", sorted(OPERATIONS))
def test_operation_gradients(rng, name):
    a = Parameter(rng.normal(size=(3, 4)))
    b = Parameter(rng.uniform(0.5, 2.0, size=(3, 4)))
    result = OPERATIONS[name](a, b)
    weights = rng.normal(size=result.shape)
    assert grad_check(lambda: weighted_sum(OPERATIONS[name](a, b), weights), [a, b]) < 1e-4


def test_broadcast_gradient_sums_over_rows(rng):
    x = Parameter(rng.normal(size=(4, 3)))
    bias = Parameter(rng.normal(size=3))
    weights = rng.normal(size=(4, 3))
    assert grad_check(lambda: weighted_sum(x + bias, weights), [x, bias]) < 1e-6
    np.testing.assert_allclose(bias.grad, weights.sum(axis=0))


# ----- tape behaviour -----

def test_no_grad_records_nothing():
    x = Parameter([1.0, 2.0])
    with no_grad():
        y = x * x
    assert not y.requires_grad


def test_backward_rejects_wrong_seed_shape():
    x = Parameter([1.0, 2.0])
    with pytest.raises(DimensionError):
        (x * 2.0).backward(np.ones(3))


def test_parameter_group_state_round_trip(rng):
    group = ParameterGroup()
    group.add_parameter("w", rng.normal(size=(2, 2)))
    child = group.add_child("child", ParameterGroup())
    child.add_parameter("b", rng.normal(size=2))
    state = group.state_dict()
    assert sorted(state) == ["child.b", "w"]

    other = ParameterGroup()
    other.add_parameter("w", np.zeros((2, 2)))
    other.add_child("child", ParameterGroup()).add_parameter("b", np.zeros(2))
    other.load_state_dict(state)
    assert all(np.array_equal(state[name], value) for name, value in other.state_dict().items())


def test_parameter_group_rejects_mismatched_state():
    group = ParameterGroup()
    group.add_parameter("w", np.zeros((2, 2)))
    with pytest.raises(DimensionError):
        group.load_state_dict({"w": np.zeros((3, 2))})
    with pytest.raises(DimensionError):
        group.load_state_dict({"v": np.zeros((2, 2))})


def test_frozen_parameter_unchanged_by_optimizer(rng):
    group = ParameterGroup()
    trainable = group.add_parameter("trainable", rng.normal(size=4))
    frozen = group.add_parameter("frozen", rng.normal(size=4), frozen=True)
    before = frozen.data.tobytes()
    optimizer = AdamOptimizer(group.named_parameters(), lr=0.1)
    for _ in range(10):
        optimizer.zero_grad()
        tensor_sum((trainable * frozen) * (trainable * frozen)).backward()
        optimizer.step()
    assert frozen.data.tobytes() == before
    assert frozen.grad is None


def test_optimizer_rejects_non_finite_gradient():
    group = ParameterGroup()
    w = group.add_parameter("w", np.ones(2))
    optimizer = AdamOptimizer(group.named_parameters())
    w.grad = np.array([np.inf, 0.0])
    with pytest.raises(NumericError, match="'w'"):
        optimizer.step()


def test_optimizer_state_round_trip(rng):
    group = ParameterGroup()
    w = group.add_parameter("w", rng.normal(size=3))
    optimizer = AdamOptimizer(group.named_parameters(), lr=0.01)
    w.grad = rng.normal(size=3)
    optimizer.step()

    restored = AdamOptimizer(group.named_parameters(), lr=0.01)
    restored.load_state_dict(optimizer.state_dict())
    assert restored.step_count == 1
    np.testing.assert_array_equal(restored.first_moment["w"], optimizer.first_moment["w"])
    np.testing.assert_array_equal(restored.second_moment["w"], optimizer.second_moment["w"])
