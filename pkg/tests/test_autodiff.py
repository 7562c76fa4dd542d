import math

import numpy as np
import pytest

from crossdd import autodiff as ad
from oracles import gradcheck

CASES = 20
TOL = 1e-4


def rand(rs, *shape):
    return rs.standard_normal(shape)


def away_from_zero(rs, *shape):
    x = rs.standard_normal(shape)
    return np.where(np.abs(x) < 0.1, 0.1 * np.sign(x) + 0.1, x)


# Each entry builds (scalar function, list of input arrays) from a RNG.
PRIMITIVES = {
    "add": lambda rs: (lambda a, b: ad.sum_all(ad.mul(ad.add(a, b), ad.add(a, b))), [rand(rs, 3, 4), rand(rs, 4)]),
    "sub": lambda rs: (lambda a, b: ad.sum_all(ad.mul(ad.sub(a, b), a)), [rand(rs, 2, 3), rand(rs, 2, 3)]),
    "mul": lambda rs: (lambda a, b: ad.sum_all(ad.mul(a, b)), [rand(rs, 3, 2), rand(rs, 3, 2)]),
    "scalar_mul": lambda rs: (lambda a: ad.sum_all(ad.mul(ad.scalar_mul(a, -1.7), a)), [rand(rs, 5)]),
    "neg": lambda rs: (lambda a: ad.sum_all(ad.mul(ad.neg(a), a)), [rand(rs, 4)]),
    "matmul": lambda rs: (lambda a, b: ad.sum_all(ad.mul(ad.matmul(a, b), ad.matmul(a, b))), [rand(rs, 3, 4), rand(rs, 4, 2)]),
    "matmul_batched": lambda rs: (lambda a, b: ad.sum_all(ad.exp(ad.scalar_mul(ad.matmul(a, b), 0.3))), [rand(rs, 2, 3, 4), rand(rs, 2, 4, 3)]),
    "linear": lambda rs: (lambda x, W, b: ad.sum_all(ad.mul(ad.linear(x, W, b), ad.linear(x, W, b))), [rand(rs, 3, 4), rand(rs, 4, 5), rand(rs, 5)]),
    "relu": lambda rs: (lambda a: ad.sum_all(ad.mul(ad.relu(a), a)), [away_from_zero(rs, 6)]),
    "sigmoid": lambda rs: (lambda a: ad.sum_all(ad.mul(ad.sigmoid(a), a)), [rand(rs, 6)]),
    "gelu": lambda rs: (lambda a: ad.sum_all(ad.mul(ad.gelu(a), a)), [rand(rs, 6)]),
    "exp": lambda rs: (lambda a: ad.sum_all(ad.exp(a)), [rand(rs, 6)]),
    "log": lambda rs: (lambda a: ad.sum_all(ad.log(a)), [np.abs(rand(rs, 6)) + 0.5]),
    "layer_norm": lambda rs: (lambda x, g, b: ad.sum_all(ad.mul(ad.layer_norm(x, g, b), rand(np.random.default_rng(1), 3, 5))), [rand(rs, 3, 5), rand(rs, 5), rand(rs, 5)]),
    "softmax": lambda rs: (lambda a: ad.sum_all(ad.mul(ad.softmax_axis(a, 1), rand(np.random.default_rng(2), 2, 4))), [rand(rs, 2, 4)]),
    "log_softmax": lambda rs: (lambda a: ad.sum_all(ad.mul(ad.log_softmax_axis(a, 0), rand(np.random.default_rng(3), 3, 2))), [rand(rs, 3, 2)]),
    "sum_axis": lambda rs: (lambda a: ad.sum_all(ad.exp(ad.sum_axis(a, 1))), [rand(rs, 2, 3)]),
    "mean_axis": lambda rs: (lambda a: ad.sum_all(ad.exp(ad.mean_axis(a, 0))), [rand(rs, 3, 2)]),
    "mean_all": lambda rs: (lambda a: ad.mean_all(ad.mul(a, a)), [rand(rs, 3, 2)]),
    "concat_axis": lambda rs: (lambda a, b: ad.sum_all(ad.exp(ad.concat_axis([a, b], 1))), [rand(rs, 2, 3), rand(rs, 2, 1)]),
    "transpose": lambda rs: (lambda a: ad.sum_all(ad.mul(ad.transpose(a, (1, 0, 2)), rand(np.random.default_rng(4), 3, 2, 2))), [rand(rs, 2, 3, 2)]),
    "reshape": lambda rs: (lambda a: ad.sum_all(ad.mul(ad.reshape(a, (3, 2)), rand(np.random.default_rng(5), 3, 2))), [rand(rs, 2, 3)]),
    "clip": lambda rs: (lambda a: ad.sum_all(ad.mul(ad.clip(a, -0.5, 0.5), a)), [away_from_zero(rs, 6) * 0.4]),
    "grl": lambda rs: (lambda a: ad.sum_all(ad.mul(ad.grl(a, 0.7), a)), [rand(rs, 4)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    worst = 0.0
    for case in range(CASES):
        fn, arrays = PRIMITIVES[name](np.random.default_rng(case))
        if name == "grl":
            continue  # grl deliberately disagrees with the forward map; see test below
        worst = max(worst, gradcheck(fn, arrays))
    assert worst <= TOL


def test_grl_backward_is_negated_scaled_identity():
    rs = np.random.default_rng(0)
    x = rs.standard_normal((3, 4))
    w = rs.standard_normal((3, 4))
    for c in (0.0, 0.5, 1.0):
        tape = ad.Tape()
        xt = tape.watch(x)
        y = ad.grl(xt, c)
        assert np.array_equal(y.numpy(), x)
        g = ad.backward(tape, ad.sum_all(ad.mul(y, w)))[xt.node_id]
        assert np.array_equal(g, -c * w)


def test_grl_rejects_negative_constant():
    with pytest.raises(ValueError):
        ad.grl(ad.Tensor(np.ones(2)), -1.0)


def mlp_loss(x, W1, b1, W2, b2, W3, b3):
    h = ad.gelu(ad.linear(x, W1, b1))
    h = ad.sigmoid(ad.linear(h, W2, b2))
    return ad.mean_all(ad.mul(ad.linear(h, W3, b3), ad.linear(h, W3, b3)))


@pytest.mark.parametrize("seed", range(10))
def test_three_layer_network_gradient(seed):
    rs = np.random.default_rng(100 + seed)
    arrays = [rs.standard_normal(s) for s in [(4, 5), (5, 6), (6,), (6, 4), (4,), (4, 2), (2,)]]
    assert gradcheck(mlp_loss, arrays) <= TOL


def test_linear_examples():
    out = ad.linear(np.array([[1.0, 0.0]]), np.eye(2), np.zeros(2))
    assert np.array_equal(out.numpy(), [[1.0, 0.0]])
    out = ad.linear(np.array([[1.0, 2.0]]), np.array([[1.0], [1.0]]), np.array([3.0]))
    assert np.array_equal(out.numpy(), [[6.0]])


def test_linear_shape_mismatch_names_axes():
    with pytest.raises(ad.DimensionError, match="4"):
        ad.linear(np.ones((2, 3)), np.ones((4, 1)), np.zeros(1))


def test_layer_norm_examples():
    out = ad.layer_norm(np.array([5.0, 5.0, 5.0]), np.ones(3), np.zeros(3))
    assert np.array_equal(out.numpy(), np.zeros(3))
    out = ad.layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2), eps=0.0)
    assert np.allclose(out.numpy(), [1.0, -1.0], atol=1e-15)


def test_layer_norm_empty_axis():
    with pytest.raises(ad.DimensionError):
        ad.layer_norm(np.ones((2, 0)), np.ones(0), np.zeros(0))


def test_softmax_examples():
    assert np.array_equal(ad.softmax_axis(np.array([3.7])).numpy(), [1.0])
    assert np.array_equal(ad.softmax_axis(np.array([0.0, 0.0])).numpy(), [0.5, 0.5])
    got = ad.softmax_axis(np.log([1.0, 2.0, 3.0])).numpy()
    assert np.allclose(got, [1 / 6, 2 / 6, 3 / 6], rtol=0, atol=1e-15)


def test_softmax_is_stable_for_large_inputs():
    got = ad.softmax_axis(np.array([1000.0, 1000.0])).numpy()
    assert np.array_equal(got, [0.5, 0.5])


def test_elementwise_examples():
    assert ad.relu(np.array(-2.0)).item() == 0.0
    assert ad.relu(np.array(3.0)).item() == 3.0
    assert np.array_equal(ad.mean_axis(np.array([[2.0, 4.0]]), 1).numpy(), [3.0])


def test_matmul_shape_mismatch():
    with pytest.raises(ad.DimensionError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_add_shape_mismatch():
    with pytest.raises(ad.DimensionError):
        ad.add(np.ones((2, 3)), np.ones((4,)))


def test_backward_examples():
    tape = ad.Tape()
    x = tape.watch(np.array([1.0, -2.0, 5.0]))
    assert np.array_equal(ad.backward(tape, ad.sum_all(x))[x.node_id], [1.0, 1.0, 1.0])

    tape = ad.Tape()
    x = tape.watch(np.array(3.0))
    assert ad.backward(tape, ad.mul(x, x))[x.node_id] == 6.0


def test_untouched_leaves_get_zero_gradient():
    tape = ad.Tape()
    x = tape.watch(np.ones((2, 2)))
    unused = tape.watch(np.ones(3))
    grads = ad.backward(tape, ad.sum_all(x))
    assert np.array_equal(grads[unused.node_id], np.zeros(3))


def test_gradient_shapes_match_values():
    rs = np.random.default_rng(0)
    tape = ad.Tape()
    leaves = [tape.watch(rs.standard_normal(s)) for s in [(3, 4), (4, 2), (2,)]]
    grads = ad.backward(tape, mlp_like(*leaves))
    for t in leaves:
        assert grads[t.node_id].shape == t.shape


def mlp_like(x, W, b):
    return ad.sum_all(ad.relu(ad.linear(x, W, b)))


def test_non_scalar_output_rejected():
    tape = ad.Tape()
    x = tape.watch(np.ones(3))
    with pytest.raises(ad.DimensionError):
        ad.backward(tape, ad.mul(x, x))


def test_tape_is_topological():
    rs = np.random.default_rng(0)
    tape = ad.Tape()
    arrays = [rs.standard_normal(s) for s in [(4, 5), (5, 6), (6,), (6, 4), (4,), (4, 2), (2,)]]
    mlp_loss(*[tape.watch(a) for a in arrays])
    for i, node in enumerate(tape.nodes):
        assert all(j is None or j < i for j in node.inputs)


def test_forward_is_deterministic_and_backward_repeatable():
    rs = np.random.default_rng(7)
    arrays = [rs.standard_normal(s) for s in [(4, 5), (5, 6), (6,), (6, 4), (4,), (4, 2), (2,)]]
    tape = ad.Tape()
    leaves = [tape.watch(a) for a in arrays]
    out = mlp_loss(*leaves)
    again = mlp_loss(*[ad.Tensor(a) for a in arrays])
    assert out.item() == again.item()
    g1 = ad.backward(tape, out)
    g2 = ad.backward(tape, out)
    for t in leaves:
        assert np.array_equal(g1[t.node_id], g2[t.node_id])


def test_values_are_float64():
    assert ad.Tensor([1, 2]).data.dtype == np.float64
    assert math.isclose(ad.sigmoid(np.array(0.0)).item(), 0.5)
