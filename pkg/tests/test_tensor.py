import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from blockdiv import tensor as T
from blockdiv.tensor import Rng, Tensor

from conftest import numeric_grad, rel_err


def test_matmul_identity():
    a = Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal((a @ Tensor(np.eye(2))).data, [[1, 2], [3, 4]])


def test_matmul_row_by_column():
    out = T.matmul(Tensor([[1, 2]]), Tensor([[3], [4]]))
    assert out.shape == (1, 1)
    # 1*3 + 2*4
    assert out.data[0, 0] == 11.0


def test_matmul_grad_first_arg():
    a = T.parameter([[1.0, 2.0]])
    b = Tensor([[3.0], [4.0]])
    (ga,) = T.grad(T.sum_(a @ b), [a])
    fd = numeric_grad(lambda v: float((v @ b.data).sum()), a.data)
    np.testing.assert_allclose(ga, [[3.0, 4.0]], atol=0)
    np.testing.assert_allclose(fd, [[3.0, 4.0]], atol=1e-8)


def test_matmul_shape_mismatch():
    with pytest.raises(T.ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_layer_norm_constant_row_is_zero():
    out = T.layer_norm(Tensor([[5.0, 5.0, 5.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)), 1e-6)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_layer_norm_two_values():
    out = T.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-14)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-12)


def test_layer_norm_gradient(rng):
    x0 = rng.uniform((2, 4), -2, 2)
    gain0, bias0 = rng.uniform(4, -2, 2), rng.uniform(4, -2, 2)
    w = rng.normal((2, 4))

    def f(x, g, b):
        return T.sum_(T.layer_norm(x, g, b, 1e-5) * Tensor(w))

    x, g, b = T.parameter(x0), T.parameter(gain0), T.parameter(bias0)
    gx, gg, gb = T.grad(f(x, g, b), [x, g, b])
    assert rel_err(gx, numeric_grad(lambda v: f(Tensor(v), g, b).item(), x0)) <= 1e-6
    assert rel_err(gg, numeric_grad(lambda v: f(x, Tensor(v), b).item(), gain0)) <= 1e-6
    assert rel_err(gb, numeric_grad(lambda v: f(x, g, Tensor(v)).item(), bias0)) <= 1e-6


def test_layer_norm_rejects_bad_eps():
    with pytest.raises(ValueError):
        T.layer_norm(Tensor([[1.0, 2.0]]), eps=0.0)


def test_l2_normalize_examples():
    np.testing.assert_allclose(T.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8])
    np.testing.assert_array_equal(T.l2_normalize(Tensor([0.0, 0.0])).data, [0.0, 0.0])
    unit = np.array([0.0, 1.0, 0.0])
    np.testing.assert_array_equal(T.l2_normalize(Tensor(unit)).data, unit)


def test_l2_normalize_zero_vector_gradient_is_finite():
    x = T.parameter([0.0, 0.0])
    (g,) = T.grad(T.sum_(T.l2_normalize(x)), [x])
    assert np.isfinite(g).all()


def test_backward_square():
    x = T.parameter(3.0)
    (g,) = T.grad(T.square(x), [x])
    assert g == 6.0


def test_backward_silu_sum(rng):
    x0 = rng.uniform(8, -2, 2)
    x = T.parameter(x0)
    (g,) = T.grad(T.sum_(T.silu(x)), [x])
    fd = numeric_grad(lambda v: T.sum_(T.silu(Tensor(v))).item(), x0)
    assert rel_err(g, fd) <= 1e-6


def test_backward_graphs_are_isolated(rng):
    a0, b0 = rng.normal(5), rng.normal(5)
    a, b = T.parameter(a0), T.parameter(b0)
    la = T.sum_(T.square(a))
    lb = T.sum_(T.silu(b))
    ga_alone = T.grad(T.sum_(T.square(T.parameter(a0))), [T.parameter(a0)])
    first = T.backward(la)
    second = T.backward(lb)
    np.testing.assert_array_equal(first[a], 2 * a0)
    assert b not in first and a not in second
    np.testing.assert_array_equal(T.backward(la)[a], first[a])
    assert ga_alone[0].shape == (5,)


def test_backward_requires_scalar():
    with pytest.raises(T.ShapeError):
        T.backward(T.parameter([1.0, 2.0]) * 2.0)


def test_shared_subexpression_accumulates():
    x = T.parameter(2.0)
    y = x * x + x
    (g,) = T.grad(y, [x])
    assert g == 5.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_raises():
    with pytest.raises(T.NonFiniteError):
        T.div(Tensor([1.0]), Tensor([0.0]))
    with pytest.raises(T.NonFiniteError):
        T.exp(Tensor([1000.0]))


def test_binary_ops_reject_implicit_broadcast():
    with pytest.raises(T.ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(3))
    out = Tensor(np.ones((2, 3))) + 1.0
    assert out.shape == (2, 3)


def test_inputs_are_not_mutated(rng):
    x0 = rng.normal((3, 4))
    x = T.parameter(x0)
    before = x.data.copy()
    loss = T.sum_(T.softmax(x) * T.layer_norm(x))
    T.backward(loss)
    np.testing.assert_array_equal(x.data, before)
    with pytest.raises(ValueError):
        x.data[0, 0] = 1.0


def test_softmax_rows_sum_to_one(rng):
    out = T.softmax(Tensor(rng.uniform((5, 7), -20, 20)))
    np.testing.assert_allclose(out.data.sum(-1), 1.0, atol=1e-12)


def test_same_seed_identical_draws():
    a, b = Rng(7), Rng(7)
    np.testing.assert_array_equal(a.normal((4, 3)), b.normal((4, 3)))
    assert not np.array_equal(Rng(7).normal(4), Rng(8).normal(4))


def test_rng_hex_roundtrip():
    r = Rng(11)
    r.normal(5)
    clone = Rng.from_hex(r.state_hex())
    np.testing.assert_array_equal(r.normal(6), clone.normal(6))


def test_rng_copy_is_independent():
    r = Rng(3)
    c = r.copy()
    np.testing.assert_array_equal(r.uniform(4), c.uniform(4))


# every differentiable op against central differences on inputs in [-2, 2]

UNARY = {
    "neg": T.neg,
    "scale": lambda x: T.scale(x, -1.7),
    "square": T.square,
    "sqrt": lambda x: T.sqrt(T.square(x) + 0.5),
    "exp": T.exp,
    "abs": T.abs_,
    "silu": T.silu,
    "gelu": T.gelu,
    "softmax": T.softmax,
    "sum_axis": lambda x: T.sum_(x, 0),
    "mean_axis": lambda x: T.mean(x, 1),
    "max": lambda x: T.max_(x, -1),
    "reshape": lambda x: T.reshape(x, (4, 3)),
    "transpose": T.transpose,
    "broadcast": lambda x: T.broadcast_to(T.reshape(x, (3, 1, 4)), (3, 2, 4)),
    "getitem": lambda x: x[1:, ::2],
    "take_rows": lambda x: T.take_rows(x, np.array([0, 2, 2, 1])),
    "concat": lambda x: T.concat([x, T.square(x)], -1),
    "l2_normalize": lambda x: T.l2_normalize(x, 1e-8),
    "l2_normalize_cols": lambda x: T.l2_normalize(x, 1e-8, axis=0),
    "layer_norm": lambda x: T.layer_norm(x, eps=1e-5),
    "clamp_min": lambda x: T.clamp_min(x, 0.3),
}

BINARY = {
    "add": T.add,
    "sub": T.sub,
    "mul": T.mul,
    "div": lambda a, b: T.div(a, T.square(b) + 1.0),
    "cosine": T.cosine_similarity,
    "matmul_batched": lambda a, b: T.matmul(T.reshape(a, (3, 1, 4)), T.reshape(b, (3, 4, 1))),
    "linear": lambda a, b: T.linear(a, T.reshape(b, (4, 3)), None),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    rng = Rng(abs(hash(name)) % 1000)
    x0 = rng.uniform((3, 4), -2, 2)
    w = rng.normal(UNARY[name](Tensor(x0)).shape)
    fn = lambda v: T.sum_(UNARY[name](v) * Tensor(w))
    x = T.parameter(x0)
    (g,) = T.grad(fn(x), [x])
    fd = numeric_grad(lambda v: fn(Tensor(v)).item(), x0)
    assert rel_err(g, fd) <= 1e-5


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients(name):
    rng = Rng(abs(hash(name)) % 1000)
    a0, b0 = rng.uniform((3, 4), -2, 2), rng.uniform((3, 4), -2, 2)
    w = rng.normal(BINARY[name](Tensor(a0), Tensor(b0)).shape)
    fn = lambda a, b: T.sum_(BINARY[name](a, b) * Tensor(w))
    a, b = T.parameter(a0), T.parameter(b0)
    ga, gb = T.grad(fn(a, b), [a, b])
    assert rel_err(ga, numeric_grad(lambda v: fn(Tensor(v), b).item(), a0)) <= 1e-5
    assert rel_err(gb, numeric_grad(lambda v: fn(a, Tensor(v)).item(), b0)) <= 1e-5


def test_scalar_tensor_broadcast_gradient():
    x = T.parameter(np.arange(4.0))
    s = T.parameter(2.0)
    gx, gs = T.grad(T.sum_(x * s), [x, s])
    np.testing.assert_array_equal(gx, [2.0] * 4)
    assert gs == 6.0


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 5), elements=st.floats(-50, 50)))
def test_softmax_is_probability(x):
    out = T.softmax(Tensor(x)).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)
