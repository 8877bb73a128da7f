"""Forward values and finite-difference gradient checks for every tape op."""

import math
import zlib

import numpy as np
import pytest

from pisac import tensor as T
from pisac.gradcheck import gradient_check


def _param(rng, shape, scale=1.0):
    return T.Tensor(rng.normal(size=shape) * scale, requires_grad=True)


def test_tanh_fixed_point_at_zero():
    assert T.tanh(T.Tensor([0.0])).values[0] == 0.0


def test_logsumexp_direct_sum_oracle():
    # oracle: log(sum(exp(x))) computed by direct summation
    x = np.array([math.log(1.0), math.log(3.0)])
    expected = math.log(np.sum(np.exp(x)))  # = ln 4
    out = T.logsumexp(T.Tensor(x), axis=0)
    assert out.values == pytest.approx(expected, abs=1e-12)
    assert out.values == pytest.approx(1.3862943611198906, abs=1e-12)


def test_matmul_identity():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(3, 3))
    out = T.matmul(T.Tensor(np.eye(3)), T.Tensor(a))
    np.testing.assert_array_equal(out.values, a)


def test_matmul_shape_error_names_op():
    with pytest.raises(T.DimensionError, match="matmul"):
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))


def test_backward_sum_square_analytic():
    w = T.Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.sum(T.square(w)))
    np.testing.assert_allclose(w.grad, [2.0, 4.0])


def test_backward_requires_scalar_loss():
    w = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(T.ContractError):
        T.backward(T.square(w))
    T.clear_tape()


def test_stop_gradient_blocks_one_factor():
    w = T.Tensor([3.0], requires_grad=True)
    T.backward(T.sum(T.mul(T.stop_gradient(w), w)))
    np.testing.assert_allclose(w.grad, [3.0])


def test_stop_gradient_only_path_gives_zero_grad():
    w = T.Tensor([1.5, -0.5], requires_grad=True)
    u = T.Tensor([2.0, 2.0], requires_grad=True)
    T.backward(T.sum(T.add(T.square(T.stop_gradient(w)), u)))
    np.testing.assert_array_equal(w.grad, [0.0, 0.0])
    np.testing.assert_allclose(u.grad, [1.0, 1.0])


def test_unreachable_parameters_untouched():
    w = T.Tensor([1.0], requires_grad=True)
    other = T.Tensor([5.0], requires_grad=True)
    T.backward(T.sum(T.square(w)))
    np.testing.assert_array_equal(other.grad, [0.0])


def test_gradient_accumulation_is_additive_until_reset():
    w = T.Tensor([2.0], requires_grad=True)
    T.backward(T.sum(T.square(w)))
    T.backward(T.sum(T.square(w)))
    np.testing.assert_allclose(w.grad, [8.0])
    w.zero_grad()
    np.testing.assert_array_equal(w.grad, [0.0])


def test_no_grad_scope_records_nothing():
    w = T.Tensor([1.0], requires_grad=True)
    with T.no_grad():
        out = T.square(w)
    assert not out.requires_grad
    assert len(T.active_tape()) == 0


def test_forward_op_dispatch_and_unknown_name():
    out = T.forward_op("add", T.Tensor([1.0]), T.Tensor([2.0]))
    assert out.values[0] == 3.0
    with pytest.raises(T.ContractError):
        T.forward_op("householder", T.Tensor([1.0]))


def test_tape_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        w = _param(rng, (4, 3), 0.5)
        x = T.Tensor(rng.normal(size=(5, 4)))
        loss = T.mean(T.square(T.tanh(T.matmul(x, w))))
        T.backward(loss)
        return loss.values.copy(), w.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert np.array_equal(l1, l2) and np.array_equal(g1, g2)


def test_composite_of_many_op_kinds_matches_finite_differences():
    rng = np.random.default_rng(7)
    w1 = _param(rng, (5, 4), 0.4)
    b1 = _param(rng, (4,), 0.2)
    w2 = _param(rng, (4, 2), 0.4)
    x = T.Tensor(rng.normal(size=(6, 5)))

    def f():
        h = T.tanh(T.add(T.matmul(x, w1), b1))
        h2 = T.softplus(T.matmul(h, w2))
        s = T.logsumexp(h2, axis=1)
        return T.mean(T.mul(T.exp(T.mul(s, -1.0)), T.square(s)))

    rep = gradient_check(f, [w1, b1, w2])
    assert rep.passed(1e-6), rep


OP_CASES = {
    "add": lambda rng: (lambda a, b: T.sum(T.square(T.add(a, b))),
                        [((3, 4), 1.0), ((4,), 1.0)]),
    "sub": lambda rng: (lambda a, b: T.sum(T.square(T.sub(a, b))),
                        [((3, 4), 1.0), ((3, 4), 1.0)]),
    "mul": lambda rng: (lambda a, b: T.sum(T.mul(a, b)),
                        [((3, 4), 1.0), ((3, 1), 1.0)]),
    "matmul": lambda rng: (lambda a, b: T.sum(T.square(T.matmul(a, b))),
                           [((3, 4), 0.5), ((4, 2), 0.5)]),
    "tanh": lambda rng: (lambda a: T.sum(T.square(T.tanh(a))), [((6,), 1.0)]),
    "exp": lambda rng: (lambda a: T.sum(T.exp(a)), [((6,), 0.5)]),
    "log": lambda rng: (lambda a: T.sum(T.log(T.add(T.square(a), 1.0))), [((6,), 1.0)]),
    "square": lambda rng: (lambda a: T.sum(T.square(a)), [((6,), 1.0)]),
    "sum": lambda rng: (lambda a: T.square(T.sum(T.sum(a, axis=0))), [((3, 4), 1.0)]),
    "mean": lambda rng: (lambda a: T.square(T.mean(a)), [((3, 4), 1.0)]),
    "logsumexp": lambda rng: (lambda a: T.sum(T.logsumexp(a, axis=1)), [((3, 5), 1.0)]),
    "softplus": lambda rng: (lambda a: T.sum(T.softplus(a)), [((6,), 2.0)]),
    "min_elementwise": lambda rng: (lambda a, b: T.sum(T.min_elementwise(a, b)),
                                    [((6,), 1.0), ((6,), 1.0)]),
    "concat": lambda rng: (lambda a, b: T.sum(T.square(T.concat([a, b], axis=1))),
                           [((2, 3), 1.0), ((2, 4), 1.0)]),
    "reshape": lambda rng: (lambda a: T.sum(T.square(T.reshape(a, (6,)))), [((2, 3), 1.0)]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_backward_matches_central_differences_100_trials(name):
    for trial in range(100):
        rng = np.random.default_rng(hash(name) % (2 ** 32) + trial)
        f_builder, param_specs = OP_CASES[name](rng)
        params = [_param(rng, shape, scale) for shape, scale in param_specs]
        rep = gradient_check(lambda: f_builder(*params), params,
                             rng=np.random.default_rng(trial))
        assert rep.passed(1e-6), f"{name} trial {trial}: {rep}"


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_backward_matches_central_differences(stride):
    for trial in range(20):
        rng = np.random.default_rng(100 + trial)
        x = _param(rng, (2, 5, 5, 2), 0.7)
        w = _param(rng, (3, 3, 2, 3), 0.4)
        rep = gradient_check(
            lambda: T.mean(T.square(T.conv2d(x, w, stride=stride))), [x, w])
        assert rep.passed(1e-6), f"stride {stride} trial {trial}: {rep}"


def test_conv2d_shape_checks():
    with pytest.raises(T.DimensionError, match="conv2d"):
        T.conv2d(T.Tensor(np.zeros((2, 5, 5, 2))), T.Tensor(np.zeros((3, 3, 4, 3))))
    with pytest.raises(T.ContractError):
        T.conv2d(T.Tensor(np.zeros((2, 5, 5, 2))), T.Tensor(np.zeros((3, 3, 2, 3))), stride=3)


def test_conv2d_same_padding_output_shapes():
    x = T.Tensor(np.zeros((1, 16, 16, 3)))
    w = T.Tensor(np.zeros((3, 3, 3, 8)))
    assert T.conv2d(x, w, stride=1).shape == (1, 16, 16, 8)
    assert T.conv2d(x, w, stride=2).shape == (1, 8, 8, 8)


def test_frn_tlu_backward_matches_central_differences():
    for trial in range(20):
        rng = np.random.default_rng(200 + trial)
        x = _param(rng, (2, 4, 4, 3), 1.0)
        gamma = T.Tensor(1.0 + 0.3 * rng.normal(size=3), requires_grad=True)
        beta = _param(rng, (3,), 0.2)
        tau = _param(rng, (3,), 0.2)
        rep = gradient_check(
            lambda: T.mean(T.square(T.frn_tlu(x, gamma, beta, tau))),
            [x, gamma, beta, tau])
        assert rep.passed(1e-6), f"trial {trial}: {rep}"


def test_layer_norm_backward_matches_central_differences():
    for trial in range(20):
        rng = np.random.default_rng(300 + trial)
        x = _param(rng, (4, 6), 1.0)
        gain = T.Tensor(1.0 + 0.3 * rng.normal(size=6), requires_grad=True)
        bias = _param(rng, (6,), 0.2)
        rep = gradient_check(
            lambda: T.mean(T.square(T.layer_norm(x, gain, bias))), [x, gain, bias])
        assert rep.passed(1e-6), f"trial {trial}: {rep}"


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_backward_matches_central_differences(training):
    for trial in range(20):
        rng = np.random.default_rng(400 + trial)
        state = T.BatchNormState(5)
        state.running_mean = rng.normal(size=5)
        state.running_var = 0.5 + np.abs(rng.normal(size=5))
        x = _param(rng, (8, 5), 1.0)
        scale = T.Tensor(1.0 + 0.3 * rng.normal(size=5), requires_grad=True)
        offset = _param(rng, (5,), 0.2)
        rep = gradient_check(
            lambda: T.mean(T.square(T.batch_norm_mean(
                x, scale, offset, state, training=training, update_stats=False))),
            [x, scale, offset])
        assert rep.passed(1e-6), f"training={training} trial {trial}: {rep}"


def test_batch_norm_running_stats_track_batches():
    state = T.BatchNormState(2, momentum=0.9)
    x = np.array([[1.0, 2.0], [3.0, 6.0]])
    T.batch_norm_mean(T.Tensor(x), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)),
                      state, training=True)
    np.testing.assert_allclose(state.running_mean, 0.1 * np.array([2.0, 4.0]))
    np.testing.assert_allclose(state.running_var, 0.9 * 1.0 + 0.1 * np.array([1.0, 4.0]))


def test_batch_norm_eval_uses_running_stats():
    state = T.BatchNormState(2)
    state.running_mean = np.array([1.0, -1.0])
    state.running_var = np.array([4.0, 1.0])
    x = T.Tensor(np.array([[3.0, 0.0]]))
    out = T.batch_norm_mean(x, T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)),
                            state, training=False)
    np.testing.assert_allclose(
        out.values, [[2.0 / np.sqrt(4.0 + T.BN_EPS), 1.0 / np.sqrt(1.0 + T.BN_EPS)]])


def test_add_shape_error_names_shapes():
    with pytest.raises(T.DimensionError, match=r"add"):
        T.add(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 5))))
