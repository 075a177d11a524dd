import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semibev import tensor as T
from semibev.selftest import check_op_gradients, numerical_grad


def leaf(data):
    return T.Tensor(np.asarray(data, dtype=float), requires_grad=True)


# ------------------------------------------------------------ elementwise

def test_add_mul_sub_examples():
    assert np.array_equal(T.add(T.Tensor([1, 2]), T.Tensor([3, 4])).data, [4, 6])
    assert np.array_equal(T.mul(T.Tensor([2, 3]), 0).data, [0, 0])
    x = T.Tensor(np.arange(6.0).reshape(2, 3))
    d = T.sub(x, x)
    assert d.shape == (2, 3) and not d.data.any()


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
        T.add(T.Tensor([1.0, 2.0]), T.Tensor([1.0, 2.0, 3.0]))


def test_elementwise_dispatch():
    a, b = T.Tensor([6.0]), T.Tensor([3.0])
    assert [T.elementwise(k, a, b).item() for k in ("add", "sub", "mul", "div")] == [9, 3, 18, 2]
    with pytest.raises(ValueError):
        T.elementwise("pow", a, b)


def test_tensor_is_float64():
    assert T.Tensor([1, 2]).data.dtype == np.float64


# ----------------------------------------------------------------- matmul

def test_matmul_examples():
    m = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(T.Tensor(np.eye(2)), m).data, m.data)
    assert np.array_equal(T.matmul(T.Tensor([[1.0, 0.0]]), T.Tensor([[0.0], [1.0]])).data, [[0.0]])


def test_matmul_gradient_is_ones_times_bT(rng):
    a = leaf(rng.uniform(-2, 2, (3, 4)))
    b = T.Tensor(rng.uniform(-2, 2, (4, 2)))
    (ga,) = T.backward(T.sum(T.matmul(a, b)), [a])
    np.testing.assert_allclose(ga, np.ones((3, 2)) @ b.data.T, rtol=0, atol=1e-12)

    def f():
        return float((a.data @ b.data).sum())

    np.testing.assert_allclose(numerical_grad(f, a.data), ga, rtol=1e-4, atol=1e-7)


# ------------------------------------------------------------------- conv

def test_conv_scaling_kernel():
    out = T.conv2d(T.Tensor(np.ones((1, 3, 3))), T.Tensor(np.full((1, 1, 1, 1), 2.0)))
    assert np.array_equal(out.data, np.full((1, 3, 3), 2.0))


def test_conv_zero_kernel():
    out = T.conv2d(T.Tensor(np.eye(3)[None]), T.Tensor(np.zeros((1, 1, 3, 3))), padding=1)
    assert out.shape == (1, 3, 3) and not out.data.any()


def test_conv_matches_direct_correlation(rng):
    x = rng.normal(size=(2, 3, 7, 7))
    k = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 4, 4))
    for i in range(4):
        for j in range(4):
            patch = xp[:, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
            ref[:, :, i, j] = np.einsum("ncij,ocij->no", patch, k) + b
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_rejects_bad_geometry():
    with pytest.raises(ValueError):
        T.conv2d(T.Tensor(np.ones((1, 4, 4))), T.Tensor(np.ones((1, 1, 2, 2))))
    with pytest.raises(ValueError):
        T.conv2d(T.Tensor(np.ones((1, 8, 8))), T.Tensor(np.ones((1, 1, 3, 3))), stride=2, padding=1)


@pytest.mark.parametrize("stride,padding", [(1, 1), (1, 0), (2, (1, 0, 1, 0))])
def test_conv_gradients_match_finite_differences(rng, stride, padding):
    x = rng.uniform(-2, 2, (2, 8, 8))
    k = rng.uniform(-2, 2, (4, 2, 3, 3))
    ratio = check_op_gradients(lambda a, b: T.conv2d(a, b, stride=stride, padding=padding), [x, k])
    assert ratio <= 1.0


# ------------------------------------------------------------ activations

def test_activation_examples():
    x = leaf([0.0])
    s = T.sigmoid(x)
    assert s.item() == 0.5
    T.backward(T.sum(s))
    assert x.grad[0] == 0.25
    assert T.relu(T.Tensor([-3.0])).item() == 0.0


def test_sigmoid_is_stable_at_extremes():
    s = T.sigmoid(T.Tensor([-1000.0, 1000.0])).data
    assert np.all(np.isfinite(s)) and s[0] == 0.0 and s[1] == 1.0


# ------------------------------------------------------------- reductions

def test_reduction_examples():
    assert T.sum(T.Tensor([1.0, 2.0, 3.0])).item() == 6
    assert np.array_equal(T.mean(T.Tensor([[1.0, 3.0], [5.0, 7.0]]), 0).data, [3, 5])
    x = leaf(np.ones(5))
    T.backward(T.mean(x))
    np.testing.assert_allclose(x.grad, np.full(5, 0.2), rtol=0, atol=1e-15)


def test_reductions_are_bit_identical_across_runs(rng):
    x = rng.normal(size=(7, 33, 5))
    first = [T.sum(T.Tensor(x), ax).data for ax in (None, 0, (1, 2))]
    second = [T.sum(T.Tensor(x), ax).data for ax in (None, 0, (1, 2))]
    for a, b in zip(first, second):
        assert a.tobytes() == b.tobytes()


def test_reduce_dispatch_and_bad_axis():
    x = T.Tensor([[1.0, 3.0]])
    assert T.reduce("sum", x).item() == 4 and T.reduce("mean", x).item() == 2
    with pytest.raises(ValueError):
        T.sum(x, 2)


# ----------------------------------------------------------------- detach

def test_detach_examples():
    x = leaf([1.0, 2.0, 3.0])
    y = leaf([4.0, 5.0, 6.0])
    d = T.detach(x)
    assert np.array_equal(d.data, x.data)
    gx, gy = T.backward(T.sum(T.mul(d, y)), [x, y])
    assert not gx.any()
    assert np.array_equal(gy, [1.0, 2.0, 3.0])


def test_detach_cuts_the_only_path(rng):
    x = leaf(rng.normal(size=4))
    y = T.sigmoid(T.detach(T.mul(x, 3.0)))
    (gx,) = T.backward(T.sum(T.mul(y, y)), [x])
    assert not gx.any()


# --------------------------------------------------------------- backward

def test_backward_examples():
    x = leaf(np.zeros(4))
    T.backward(T.sum(x))
    assert np.array_equal(x.grad, np.ones(4))
    x = leaf([1.0, 2.0])
    T.backward(T.sum(T.power(x, 2)))
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_composite_conv_relu_mean(rng):
    x = rng.uniform(-2, 2, (2, 6, 6))
    k = rng.uniform(-2, 2, (3, 2, 3, 3))
    assert check_op_gradients(lambda a, b: T.mean(T.relu(T.conv2d(a, b, padding=1))), [x, k]) <= 1.0


def test_second_backward_on_same_graph_raises():
    x = leaf([1.0, 2.0])
    loss = T.sum(T.mul(x, x))
    T.backward(loss)
    with pytest.raises(RuntimeError):
        T.backward(loss)


def test_backward_needs_scalar():
    with pytest.raises(ValueError):
        T.backward(T.mul(leaf([1.0, 2.0]), 2.0))


def test_shared_subexpression_accumulates():
    x = leaf([3.0])
    y = T.mul(x, x)
    (g,) = T.backward(T.add(y, y), [x])
    assert g[0] == 12.0


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.Tape() as tape, T.no_grad():
        y = T.mul(x, 2.0)
    assert len(tape) == 0 and not y.requires_grad


def test_shape_ops_roundtrip():
    x = leaf(np.arange(6.0).reshape(2, 3))
    y = T.concat([T.transpose(T.reshape(x, (3, 2)), (1, 0)), T.flip(x, 1)], axis=0)
    assert y.shape == (4, 3)
    T.backward(T.sum(y))
    assert np.array_equal(x.grad, np.full((2, 3), 2.0))
    e = T.expand_to(T.Tensor([[1.0, 2.0]]), (3, 2))
    assert np.array_equal(e.data, [[1, 2]] * 3)


def test_linear_map_sparse_and_dense_agree(rng):
    import scipy.sparse as sp

    m = sp.random(6, 4, density=0.5, random_state=1, format="csr")
    x1 = leaf(rng.normal(size=(3, 6)))
    x2 = leaf(x1.data.copy())
    a = T.linear_map(x1, m)
    b = T.linear_map(x2, m.toarray())
    np.testing.assert_allclose(a.data, b.data, atol=1e-14)
    (g1,) = T.backward(T.sum(T.mul(a, a)), [x1])
    with T.Tape():
        b = T.linear_map(x2, m.toarray())
        (g2,) = T.backward(T.sum(T.mul(b, b)), [x2])
    np.testing.assert_allclose(g1, g2, atol=1e-13)


def test_reusing_a_consumed_intermediate_is_an_error():
    x = leaf([1.0, 2.0])
    y = T.mul(x, 3.0)
    T.backward(T.sum(y))
    with pytest.raises(RuntimeError):
        T.sum(y)


# --------------------------------------------------------------- property

UNARY = {
    "sigmoid": T.sigmoid,
    "relu": T.relu,
    "neg": T.neg,
    "square": lambda a: T.power(a, 2.0),
    "sum0": lambda a: T.sum(a, 0),
    "mean1": lambda a: T.mean(a, 1),
    "flip": lambda a: T.flip(a, 0),
    "transpose": lambda a: T.transpose(a, (1, 0)),
    "reshape": lambda a: T.reshape(a, (-1,)),
    "take": lambda a: T.take(a, 1),
}
BINARY = {
    "add": T.add,
    "sub": T.sub,
    "mul": T.mul,
    "div": lambda a, b: T.div(a, T.add(T.mul(b, b), 0.5)),
    "matmul": lambda a, b: T.matmul(a, T.transpose(b, (1, 0))),
    "concat": lambda a, b: T.concat([a, b], 1),
}


@settings(max_examples=40, deadline=None)
@given(name=st.sampled_from(sorted(UNARY)), seed=st.integers(0, 2**32 - 1),
       rows=st.integers(2, 4), cols=st.integers(2, 4))
def test_unary_ops_match_finite_differences(name, seed, rows, cols):
    x = np.random.default_rng(seed).uniform(-2, 2, (rows, cols))
    x = np.where(np.abs(x) < 1e-3, 0.5, x)  # relu kink
    assert check_op_gradients(UNARY[name], [x]) <= 1.0


@settings(max_examples=40, deadline=None)
@given(name=st.sampled_from(sorted(BINARY)), seed=st.integers(0, 2**32 - 1),
       rows=st.integers(2, 4), cols=st.integers(2, 4))
def test_binary_ops_match_finite_differences(name, seed, rows, cols):
    g = np.random.default_rng(seed)
    a, b = g.uniform(-2, 2, (rows, cols)), g.uniform(-2, 2, (rows, cols))
    assert check_op_gradients(BINARY[name], [a, b]) <= 1.0
