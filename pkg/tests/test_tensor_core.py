import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import conv3d_loops
from xlstm_hved.tensor import (ContractViolation, NumericError, Tensor, activation, conv3d,
                               dtype_scope, finite_diff_check, group_norm, linear, no_grad,
                               resample, sigmoid, softmax)
from xlstm_hved.tensor import functional as F
from xlstm_hved.tensor.core import BranchTape, record_branches, replay_branches


def leaf(arr, dtype=np.float64):
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


# -- conv3d -----------------------------------------------------------------

def test_conv3d_unit_kernel_is_identity(rng):
    x = rng.normal(size=(2, 1, 4, 5, 3))
    out = conv3d(Tensor(x), Tensor(np.ones((1, 1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x.astype(np.float32))


def test_conv3d_ones_kernel_counts_neighbours():
    out = conv3d(Tensor(np.ones((1, 1, 5, 5, 5))), Tensor(np.ones((1, 1, 3, 3, 3))), padding=1)
    assert np.all(out.data[0, 0, 1:-1, 1:-1, 1:-1] == 27)
    assert out.data[0, 0, 0, 0, 0] == 8


@pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (2, 1, 3), (1, 0, 3), (2, 2, 5), (1, 0, 1)])
def test_conv3d_matches_loop_oracle(rng, stride, padding, k):
    x = rng.normal(size=(2, 3, 6, 7, 5))
    w = rng.normal(size=(4, 3, k, k, k))
    b = rng.normal(size=4)
    with dtype_scope(np.float64):
        out = conv3d(Tensor(x), Tensor(w), Tensor(b), stride, padding)
    np.testing.assert_allclose(out.data, conv3d_loops(x, w, b, stride, padding), rtol=1e-12, atol=1e-12)


def test_conv3d_output_extent_formula(rng):
    x = Tensor(rng.normal(size=(1, 1, 9, 8, 7)))
    out = conv3d(x, Tensor(rng.normal(size=(2, 1, 3, 3, 3))), stride=2, padding=1)
    assert out.shape == (1, 2, 5, 4, 4)


def test_conv3d_small_random_case_fd_at_h_1e3():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(1, 2, 2, 2, 2)).astype(np.float32), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 2, 3, 3, 3)).astype(np.float32), requires_grad=True)
    probe = rng.normal(size=(1, 2, 2, 2, 2))
    report = finite_diff_check(lambda t: F.sum(F.mul(conv3d(x, t, padding=1), probe)), w,
                               h=1e-3, tol=1e-3)
    assert report["pass"], report
    report = finite_diff_check(lambda t: F.sum(F.mul(conv3d(t, w, padding=1), probe)), x,
                               h=1e-3, tol=1e-3)
    assert report["pass"], report


@pytest.mark.parametrize("x_shape,w_shape,kw", [
    ((1, 2, 4, 4, 4), (1, 3, 3, 3, 3), {}),               # channel mismatch
    ((1, 1, 4, 4, 4), (1, 1, 2, 2, 2), {}),               # even kernel
    ((1, 1, 2, 2, 2), (1, 1, 3, 3, 3), {"stride": 2}),    # extent smaller than kernel
    ((1, 4, 4, 4), (1, 1, 3, 3, 3), {}),                  # wrong rank
])
def test_conv3d_contract_errors(x_shape, w_shape, kw):
    with pytest.raises(ContractViolation):
        conv3d(Tensor(np.zeros(x_shape)), Tensor(np.zeros(w_shape)), **kw)


# -- linear -------------------------------------------------------------------

def test_linear_hand_product():
    out = linear(Tensor([1.0, 2.0]), Tensor([[1.0, 1.0], [0.0, 1.0]]), Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [3.0, 2.0])


def test_linear_identity(rng):
    x = rng.normal(size=(3, 5, 4))
    out = linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
    np.testing.assert_allclose(out.data, x.astype(np.float32))


def test_linear_axis_mismatch():
    with pytest.raises(ContractViolation):
        linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


# -- activations --------------------------------------------------------------

def test_sigmoid_values():
    out = sigmoid(Tensor([-1.0, 0.0, 1.0]))
    np.testing.assert_allclose(out.data, [0.26894, 0.5, 0.73106], atol=1e-5)


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_activation_dispatch():
    x = Tensor([-2.0, 3.0])
    np.testing.assert_allclose(activation(x, "leaky_relu", alpha=0.1).data, [-0.2, 3.0])
    np.testing.assert_allclose(activation(x, "exp").data, np.exp([-2.0, 3.0]).astype(np.float32))
    with pytest.raises(ContractViolation):
        activation(x, "softmax", axis=3)
    with pytest.raises(ContractViolation):
        activation(x, "relu6")


finite_vectors = arrays(np.float64, st.integers(2, 12), elements=st.floats(-1e3, 1e3))


@given(finite_vectors, st.floats(-500, 500))
def test_softmax_shift_invariant_and_normalized(x, c):
    with dtype_scope(np.float64):
        a = softmax(Tensor(x)).data
        b = softmax(Tensor(x + c)).data
    np.testing.assert_allclose(a, b, atol=1e-9)
    assert abs(a.sum() - 1) <= 1e-6


@given(finite_vectors)
def test_primitives_stay_finite_on_bounded_inputs(x):
    t = Tensor(x)
    s = sigmoid(t).data
    assert np.all((s >= 0) & (s <= 1))
    for out in (softmax(t), F.log_sigmoid(t), F.leaky_relu(t), F.abs(t), F.clip(t, -1, 1)):
        assert np.isfinite(out.data).all()


def test_sigmoid_is_strictly_inside_unit_interval_for_moderate_inputs():
    s = sigmoid(Tensor(np.linspace(-15, 15, 101))).data
    assert np.all((s > 0) & (s < 1))


# -- group norm -----------------------------------------------------------------

def test_group_norm_statistics(rng):
    x = rng.normal(3.0, 5.0, size=(2, 8, 3, 3, 3))
    with dtype_scope(np.float64):
        out = group_norm(Tensor(x), 4, Tensor(np.ones(8)), Tensor(np.zeros(8)), eps=0.0).data
    grouped = out.reshape(2, 4, -1)
    np.testing.assert_allclose(grouped.mean(axis=2), 0, atol=1e-12)
    np.testing.assert_allclose(grouped.var(axis=2), 1, atol=1e-10)


def test_group_norm_constant_input_and_zero_gamma():
    ones = Tensor(np.ones(4))
    out = group_norm(Tensor(np.full((1, 4, 2, 2, 2), 7.0)), 2, ones, Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, 0)
    out = group_norm(Tensor(np.random.default_rng(0).normal(size=(1, 4, 2, 2, 2))), 2,
                     Tensor(np.zeros(4)), Tensor(np.full(4, 1.5)))
    np.testing.assert_array_equal(out.data, 1.5)


def test_group_norm_indivisible_channels():
    with pytest.raises(ContractViolation):
        group_norm(Tensor(np.zeros((1, 6, 2, 2, 2))), 4, Tensor(np.ones(6)), Tensor(np.zeros(6)))


# -- resample -------------------------------------------------------------------

def test_down2_mean_of_block():
    x = np.arange(8, dtype=np.float64).reshape(1, 1, 2, 2, 2)
    assert resample(Tensor(x), "down2").data.item() == 3.5


def test_down2_of_constant_volume():
    out = resample(Tensor(np.full((1, 2, 4, 6, 2), 2.5)), "down2")
    assert out.shape == (1, 2, 2, 3, 1)
    np.testing.assert_array_equal(out.data, 2.5)


@given(arrays(np.float64, (1, 2, 2, 3, 2), elements=st.floats(-10, 10)))
def test_up_then_down_roundtrip(block_values):
    with dtype_scope(np.float64):
        up = resample(Tensor(block_values), "up2")
        np.testing.assert_array_equal(resample(up, "down2").data, block_values)
        np.testing.assert_array_equal(resample(resample(up, "down2"), "up2").data, up.data)


def test_down2_rejects_odd_extent():
    with pytest.raises(ContractViolation):
        resample(Tensor(np.zeros((1, 1, 3, 4, 4))), "down2")


# -- backward -----------------------------------------------------------------------

def test_backward_of_sum_is_ones(rng):
    x = leaf(rng.normal(size=(3, 4)))
    F.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_product_rule(rng):
    x, y = leaf(rng.normal(size=5)), leaf(rng.normal(size=5))
    F.sum(F.mul(x, y)).backward()
    np.testing.assert_array_equal(x.grad, y.data)
    np.testing.assert_array_equal(y.grad, x.data)


def test_backward_requires_scalar_root():
    x = leaf(np.ones(3))
    with pytest.raises(ContractViolation):
        F.mul(x, 2.0).backward()


def test_backward_twice_is_bit_identical(rng):
    x = leaf(rng.normal(size=(1, 2, 4, 4, 4)), np.float32)
    w = leaf(rng.normal(size=(4, 2, 3, 3, 3)), np.float32)

    def run():
        x.grad = w.grad = None
        y = group_norm(conv3d(x, w, padding=1), 2, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        F.sum(F.mul(sigmoid(y), y)).backward()
        return x.grad.copy(), w.grad.copy()

    (gx1, gw1), (gx2, gw2) = run(), run()
    assert gx1.tobytes() == gx2.tobytes() and gw1.tobytes() == gw2.tobytes()


def test_composite_graph_matches_finite_differences(rng):
    with dtype_scope(np.float64):
        x = leaf(rng.normal(size=(1, 2, 3, 3, 3)))
        w = Tensor(rng.normal(size=(4, 2, 3, 3, 3)))
        gamma, beta = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
        report = finite_diff_check(
            lambda t: F.sum(sigmoid(group_norm(conv3d(t, w, padding=1), 2, gamma, beta))),
            x, h=1e-5, tol=1e-6, floor=1e-9)
    assert report.passed, report


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with no_grad():
        y = F.mul(x, x)
    assert not y.requires_grad and y.is_leaf


# -- numeric errors and the finite-difference harness ------------------------------------

def test_non_finite_output_raises():
    with pytest.raises(NumericError):
        F.exp(Tensor(np.array([1000.0])))
    with pytest.raises(NumericError):
        F.div(Tensor(np.array([1.0])), Tensor(np.array([0.0])))
    with pytest.raises(ContractViolation):
        F.log(Tensor(np.array([0.0])))


def test_fd_check_quadratic():
    theta = Tensor(np.array([1.0, 2.0]), dtype=np.float64)
    report = finite_diff_check(lambda t: F.sum(F.square(t)), theta, h=1e-5, tol=1e-8)
    assert report.passed and report.n_coords == 2


def test_fd_check_constant_is_zero_within_floor():
    theta = Tensor(np.array([0.3, -0.7]), dtype=np.float64)
    report = finite_diff_check(lambda t: F.add(F.mul(F.sum(t), 0.0), 4.0), theta, h=1e-5, tol=1e-6)
    assert report.passed and report.max_rel_err == 0.0


def test_fd_check_rejects_non_finite_objective():
    theta = Tensor(np.array([1.0]), dtype=np.float64)
    with pytest.raises(NumericError):
        finite_diff_check(lambda t: F.div(F.sum(t), F.mul(F.sum(t), 0.0)), theta, h=1e-5, tol=1e-6)


def test_fd_check_rejects_non_positive_step():
    with pytest.raises(ContractViolation):
        finite_diff_check(lambda t: F.sum(t), Tensor(np.ones(2)), h=0.0, tol=1e-3)


def test_fd_check_detects_a_wrong_backward_rule():
    def bad_square(t):
        out = t.data ** 2
        from xlstm_hved.tensor.core import make_result
        return make_result(out, "bad_square", (t,), lambda g: (g * 2.2 * t.data,))

    theta = Tensor(np.array([0.5, -1.5, 2.0]), dtype=np.float64)
    assert not finite_diff_check(lambda t: F.sum(bad_square(t)), theta, h=1e-5, tol=1e-3).passed


def test_fd_sampling_caps_coordinates(rng):
    theta = Tensor(rng.normal(size=(10, 10)), dtype=np.float64)
    report = finite_diff_check(lambda t: F.sum(F.square(t)), theta, h=1e-5, tol=1e-6, max_coords=7)
    assert report.n_coords == 7


def test_branch_replay_pins_kink_decisions():
    x = Tensor(np.array([1e-8, -1e-8]), dtype=np.float64)
    tape = BranchTape()
    with record_branches(tape):
        F.leaky_relu(x)
    x.data[:] = [-1.0, 1.0]
    with replay_branches(tape):
        out = F.leaky_relu(x).data
    np.testing.assert_allclose(out, [-1.0, 0.01])
    assert tape.cursor == 1


def test_branch_replay_overrun_is_an_error():
    tape = BranchTape()
    with record_branches(tape):
        F.leaky_relu(Tensor(np.ones(2)))
    with replay_branches(tape), pytest.raises(ContractViolation):
        F.leaky_relu(Tensor(np.ones(2)))
        F.leaky_relu(Tensor(np.ones(2)))


def test_kinked_objective_fd_without_freezing_can_disagree():
    # |x| at x = 1e-7 with h = 1e-5 straddles the kink
    theta = Tensor(np.array([1e-7]), dtype=np.float64)
    frozen = finite_diff_check(lambda t: F.sum(F.abs(t)), theta, h=1e-5, tol=1e-6)
    loose = finite_diff_check(lambda t: F.sum(F.abs(t)), theta, h=1e-5, tol=1e-6, freeze_branches=False)
    assert frozen.passed and not loose.passed
    assert math.isclose(loose.max_rel_err, 0.99, rel_tol=1e-6)
