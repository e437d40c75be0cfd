import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cift.autograd import Tensor, finite_diff_check, no_grad, ops
from cift.errors import ConfigError, DimensionError, GraphError


def rand(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


# ---------------------------------------------------------------- matmul


def test_matmul_identity_and_projector():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ops.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)
    p = ops.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(p.data, [[5.0, 6.0], [0.0, 0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_matmul_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    rep = finite_diff_check(lambda: (ops.matmul(a, b) * ops.matmul(a, b)).sum(), [a, b], tolerance=1e-6)
    assert rep.passed, rep


# ----------------------------------------------------------- elementwise


def test_elementwise_values():
    assert ops.elementwise("sigmoid", Tensor(0.0)).item() == 0.5
    assert ops.elementwise("tanh", Tensor(0.0)).item() == 0.0
    assert np.array_equal(ops.elementwise("relu", Tensor([-1.0, 2.0])).data, [0.0, 2.0])
    assert ops.elementwise("add", Tensor(2.0), Tensor(3.0)).item() == 5.0
    assert ops.elementwise("mul", Tensor(2.0), Tensor(3.0)).item() == 6.0


def test_elementwise_rejects_non_leading_broadcast():
    with pytest.raises(DimensionError):
        ops.elementwise("add", Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 1))))
    out = ops.elementwise("add", Tensor(np.zeros((4, 2, 3))), Tensor(np.ones((2, 3))))
    assert out.shape == (4, 2, 3)


@pytest.mark.parametrize("kind", ["sigmoid", "tanh"])
def test_unary_grads_over_seeds(kind):
    for seed in range(100):
        x = rand(np.random.default_rng(seed), 5)
        rep = finite_diff_check(lambda: ops.elementwise(kind, x).sum(), x, tolerance=1e-6)
        assert rep.passed, (seed, rep)


def test_binary_grads_with_leading_broadcast():
    rng = np.random.default_rng(1)
    a, b = rand(rng, 3, 2, 4), rand(rng, 2, 4)
    rep = finite_diff_check(lambda: (ops.mul(a, b) + ops.div(a, ops.exp(b)) - b).sum(), [a, b])
    assert rep.passed, rep


def test_broadcast_to_backward_sums_expanded_axes():
    rng = np.random.default_rng(2)
    x = rand(rng, 3, 1, 4)
    rep = finite_diff_check(lambda: ops.tanh(ops.broadcast_to(x, (2, 3, 5, 4))).sum(), x)
    assert rep.passed


# ------------------------------------------------------------------ softmax


def test_softmax_uniform_and_stable():
    for c in (-7.0, 0.0, 3.5, 1e6):
        assert np.allclose(ops.softmax(Tensor([c] * 4)).data, 0.25, atol=0, rtol=1e-15)
    assert np.array_equal(ops.softmax(Tensor([1e6, 0.0])).data, [1.0, 0.0])


def test_exp_log_softmax_equals_softmax():
    x = np.random.default_rng(3).normal(size=(6, 9)) * 5
    a = np.exp(ops.log_softmax(Tensor(x)).data)
    assert np.max(np.abs(a - ops.softmax(Tensor(x)).data)) <= 1e-12
    assert np.array_equal(ops.softmax_logsoftmax(Tensor(x), -1, log=True).data, ops.log_softmax(Tensor(x)).data)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    s = ops.softmax(Tensor(x)).data
    assert np.all(np.abs(s.sum(axis=-1) - 1.0) <= 1e-12)
    assert np.isfinite(ops.log_softmax(Tensor(x)).data).all()


def test_softmax_grads():
    for seed in range(20):
        x = rand(np.random.default_rng(seed), 3, 5)
        w = Tensor(np.random.default_rng(seed + 100).normal(size=(3, 5)))
        assert finite_diff_check(lambda: (ops.softmax(x) * w).sum(), x).passed
        assert finite_diff_check(lambda: (ops.log_softmax(x) * w).sum(), x).passed


# --------------------------------------------------------------------- conv


def test_conv1d_identity_kernel():
    x = np.random.default_rng(4).normal(size=(7, 3))
    assert np.array_equal(ops.conv1d(Tensor(x), Tensor(np.eye(3)[None])).data, x)


def test_conv1d_hand_example():
    out = ops.conv1d(Tensor([[1.0], [2.0], [3.0]]), Tensor(np.ones((3, 1, 1))))
    assert np.array_equal(out.data.ravel(), [3.0, 6.0, 5.0])


def test_conv1d_even_kernel_is_config_error():
    with pytest.raises(ConfigError):
        ops.conv1d(Tensor(np.zeros((4, 1))), Tensor(np.zeros((2, 1, 1))))


@pytest.mark.parametrize("stride", [1, 2])
def test_conv1d_grads(stride):
    rng = np.random.default_rng(5)
    x, k = rand(rng, 2, 7, 3), rand(rng, 3, 3, 4)
    rep = finite_diff_check(lambda: ops.tanh(ops.conv1d(x, k, stride=stride)).sum(), [x, k], tolerance=1e-5)
    assert rep.passed, rep


def test_conv1d_stride_length():
    for t0 in range(1, 12):
        out = ops.conv1d(Tensor(np.zeros((t0, 2))), Tensor(np.zeros((3, 2, 2))), stride=2)
        assert out.shape[0] == (t0 + 1) // 2


# ---------------------------------------------------------------- attention


def test_attention_single_key_returns_value():
    rng = np.random.default_rng(6)
    v = rng.normal(size=(1, 4))
    out = ops.attention(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(1, 4))), Tensor(v))
    assert np.allclose(out.data, np.repeat(v, 3, axis=0), rtol=0, atol=1e-15)


def test_attention_equal_scores_average_values():
    rng = np.random.default_rng(7)
    k = np.tile(rng.normal(size=(1, 4)), (3, 1))
    v = rng.normal(size=(3, 4))
    out = ops.attention(Tensor(rng.normal(size=(2, 4))), Tensor(k), Tensor(v))
    assert np.allclose(out.data, v.mean(axis=0), atol=1e-14)


def test_attention_mask_excludes_keys_and_checks_shape():
    rng = np.random.default_rng(8)
    q, k, v = (Tensor(rng.normal(size=s)) for s in [(2, 4), (3, 4), (3, 4)])
    mask = np.array([[True, False, False], [True, False, False]])
    assert np.allclose(ops.attention(q, k, v, mask).data, np.repeat(v.data[:1], 2, axis=0))
    with pytest.raises(DimensionError):
        ops.attention(q, k, v, np.ones((3, 2), dtype=bool))


def test_attention_grads():
    rng = np.random.default_rng(9)
    q, k, v = rand(rng, 2, 4), rand(rng, 3, 4), rand(rng, 3, 4)

    def f():
        out = ops.attention(q, k, v)
        return (out * out).sum() + out.sum()

    rep = finite_diff_check(f, [q, k, v], tolerance=1e-5)
    assert rep.passed, rep


# ------------------------------------------------------------------ backward


def test_backward_sum_and_square():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])
    y = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    (y * y).sum().backward()
    assert np.array_equal(y.grad, 2 * y.data)


def test_backward_twice_is_graph_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(GraphError):
        (x * 2.0).backward()


def test_non_participating_leaf_has_zero_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor([5.0], requires_grad=True)
    for t in (x, unused):
        t.zero_grad()
    (x * x).sum().backward()
    assert np.array_equal(unused.grad, [0.0])


def test_shared_subexpression_accumulates():
    x = Tensor([0.3, -0.4], requires_grad=True)

    def f():
        h = ops.tanh(x)
        return (h * h + ops.sigmoid(h)).sum()

    assert finite_diff_check(f, x).passed


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert y.is_leaf and not y.requires_grad


def test_forward_determinism():
    rng = np.random.default_rng(10)
    a, b = rng.normal(size=(5, 6)), rng.normal(size=(6, 3))
    first = ops.log_softmax(ops.tanh(ops.matmul(Tensor(a), Tensor(b)))).data
    second = ops.log_softmax(ops.tanh(ops.matmul(Tensor(a), Tensor(b)))).data
    assert first.tobytes() == second.tobytes()


# ------------------------------------------------------------ gradcheck api


def test_finite_diff_identity_sum():
    x = Tensor(np.random.default_rng(11).normal(size=6))
    rep = finite_diff_check(lambda: x.sum(), x)
    assert rep.max_rel_err < 1e-9


def test_finite_diff_sigmoid_at_zero():
    from cift.autograd.gradcheck import numerical_gradient

    x = Tensor(np.zeros(4))
    num = numerical_gradient(lambda: ops.sigmoid(x).sum().item(), x)
    assert np.allclose(num, 0.25, atol=1e-10)
    assert finite_diff_check(lambda: ops.sigmoid(x).sum(), x).passed


def test_finite_diff_detects_wrong_gradient(monkeypatch):
    x = Tensor(np.random.default_rng(12).normal(size=3))
    monkeypatch.setattr(ops.Tanh, "backward", staticmethod(lambda ctx, g: (g,)))
    assert not finite_diff_check(lambda: ops.tanh(x).sum(), x).passed


def test_layer_norm_and_embedding_grads():
    rng = np.random.default_rng(13)
    x, g, b = rand(rng, 3, 5), rand(rng, 5), rand(rng, 5)
    assert finite_diff_check(lambda: (ops.layer_norm(x, g, b) * ops.layer_norm(x, g, b)).sum()
                             + ops.layer_norm(x, g, b).sum(), [x, g, b]).passed
    table = rand(rng, 4, 3)
    ids = np.array([[0, 3], [3, 1]])
    assert finite_diff_check(lambda: ops.tanh(ops.embedding(table, ids)).sum(), table).passed


def test_getitem_copies():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    y = x[0]
    y.data[0] = 100.0
    assert x.data[0, 0] == 0.0
