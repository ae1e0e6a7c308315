import numpy as np
import pytest

from conftest import weighted_sum
from exceptions import ValidationError
from tools.aligner import AlignerBlock, MambaAligner, aligner_forward, bench_block, block_forward
from tools.numerics import grad_check
from tools.ssm import SsmMode


def make_block(seed=0, **kwargs):
    options = {"d_model": 4, "d_inner": 6, "state_size": 3, "conv_width": 3}
    options.update(kwargs)
    return AlignerBlock(rng=np.random.default_rng(seed), out_scale=1.0, **options)


def test_block_keeps_shape(rng):
    Z = rng.normal(size=(10, 4))
    assert block_forward(make_block(), Z).shape == (10, 4)


def test_zero_output_projection_makes_block_the_identity(rng):
    block = make_block()
    block.out_proj.data[...] = 0.0
    Z = rng.normal(size=(7, 4))
    np.testing.assert_array_equal(block_forward(block, Z).data, Z)


def test_gate_mixes_both_directions(rng):
    out, parts = block_forward(make_block(), rng.normal(size=(6, 4)), return_parts=True)
    expected = parts["gate"].data * parts["y_forward"].data + (1.0 - parts["gate"].data) * parts["y_backward"].data
    np.testing.assert_allclose(parts["fused"].data, expected, atol=1e-14)
    assert set(parts) == {"x", "g", "gate", "y_forward", "y_backward", "fused"}


def test_forward_direction_is_causal(rng):
    block = make_block()
    Z = rng.normal(size=(8, 4))
    changed = Z.copy()
    changed[6] += 1.0
    _, before = block_forward(block, Z, return_parts=True)
    _, after = block_forward(block, changed, return_parts=True)
    np.testing.assert_array_equal(before["y_forward"].data[:6], after["y_forward"].data[:6])
    assert not np.allclose(before["y_backward"].data[:6], after["y_backward"].data[:6])


def test_late_tokens_reach_early_outputs(rng):
    block = make_block()
    Z = rng.normal(size=(8, 4))
    changed = Z.copy()
    changed[-1] += 1.0
    assert not np.allclose(block_forward(block, Z).data[0], block_forward(block, changed).data[0])


def test_sigmoid_gate_is_bounded(rng):
    _, parts = block_forward(make_block(gate="sigmoid"), rng.normal(size=(5, 4)), return_parts=True)
    assert np.all((parts["gate"].data > 0.0) & (parts["gate"].data < 1.0))


def test_unknown_gate_is_rejected():
    with pytest.raises(ValidationError):
        make_block(gate="tanh")


def test_parallel_and_recurrent_blocks_agree(rng):
    Z = rng.normal(size=(12, 4))
    recurrent = block_forward(make_block(seed=3, ssm_mode=SsmMode.SELECTIVE_RECURRENT), Z).data
    parallel = block_forward(make_block(seed=3, ssm_mode=SsmMode.SELECTIVE_PARALLEL_SCAN), Z).data
    np.testing.assert_allclose(parallel, recurrent, atol=1e-10)


@pytest.mark.parametrize("mode", [SsmMode.LTI_RECURRENT, SsmMode.LTI_KERNEL])
def test_lti_blocks_run(rng, mode):
    assert block_forward(make_block(ssm_mode=mode), rng.normal(size=(5, 4))).shape == (5, 4)


def test_block_gradients(rng):
    block = make_block(d_model=3, d_inner=3, state_size=2)
    Z = rng.normal(size=(6, 3))
    weights = rng.normal(size=(6, 3))
    error = grad_check(lambda: weighted_sum(block_forward(block, Z), weights), block.parameters(), max_entries=4)
    assert error < 1e-4


def test_stack_composes_its_blocks(rng):
    stack = MambaAligner(4, 6, 3, 2, rng)
    Z = rng.normal(size=(5, 4))
    expected = Z
    for block in stack.blocks:
        expected = block_forward(block, expected).data
    np.testing.assert_allclose(aligner_forward(stack, Z).data, expected, atol=0)
    assert stack.num_blocks == 3
    assert {name.split(".")[0] for name, _ in stack.named_parameters()} == {"block0", "block1", "block2"}


def test_stack_needs_a_block(rng):
    with pytest.raises(ValidationError):
        MambaAligner(4, 6, 0, 2, rng)


def test_bench_entry_point_needs_sorted_lengths():
    with pytest.raises(ValidationError):
        bench_block([64, 32])


def test_closed_gate_passes_the_backward_direction_through(rng):
    block = make_block()
    block.w_g.data[...] = 0.0
    _, parts = block_forward(block, rng.normal(size=(9, 4)), return_parts=True)
    np.testing.assert_array_equal(parts["gate"].data, 0.0)
    np.testing.assert_array_equal(parts["fused"].data, parts["y_backward"].data)


def test_tied_directions_mirror_each_other_on_a_palindrome(rng):
    block = make_block(conv_width=1)
    forward_params = dict(block.ssm_f.named_parameters())
    for name, parameter in block.ssm_b.named_parameters():
        parameter.data[...] = forward_params[name].data
    half = rng.normal(size=(5, 4))
    Z = np.concatenate([half, half[::-1]])
    _, parts = block_forward(block, Z, return_parts=True)
    np.testing.assert_allclose(parts["y_forward"].data, parts["y_backward"].data[::-1], rtol=0, atol=1e-9)


def right_to_left_recurrence(ssm, x):
    proj = ssm.selective_proj
    delta = np.logaddexp(0.0, x @ proj.w_delta.data + proj.b_delta.data)
    Bt = x @ proj.w_b.data + proj.b_b.data
    Ct = x @ proj.w_c.data + proj.b_c.data
    A = ssm.A.data
    h = np.zeros(A.shape)
    y = np.zeros(x.shape)
    for t in range(len(x) - 1, -1, -1):
        h = np.exp(delta[t][:, None] * A) * h + (delta[t] * x[t])[:, None] * Bt[t][None, :]
        y[t] = h @ Ct[t]
    return y


def test_backward_direction_matches_a_right_to_left_loop(rng):
    block = make_block(seed=4)
    _, parts = block_forward(block, rng.normal(size=(11, 4)), return_parts=True)
    expected = right_to_left_recurrence(block.ssm_b, parts["x"].data)
    np.testing.assert_allclose(parts["y_backward"].data, expected, rtol=0, atol=1e-10)


def test_stack_is_bitwise_deterministic(rng):
    Z = rng.normal(size=(10, 8))
    first = aligner_forward(MambaAligner(8, 16, 2, 4, np.random.default_rng(11)), Z).data
    second = aligner_forward(MambaAligner(8, 16, 2, 4, np.random.default_rng(11)), Z).data
    assert first.tobytes() == second.tobytes()


def test_stack_gradients(rng):
    stack = MambaAligner(8, 16, 2, 4, rng)
    Z = rng.normal(size=(12, 8))
    weights = rng.normal(size=(12, 8))
    error = grad_check(lambda: weighted_sum(aligner_forward(stack, Z), weights), stack.parameters(), max_entries=2)
    assert error < 1e-4
