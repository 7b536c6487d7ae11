"""Tensor primitives: forward oracles and gradient checks."""

import numpy as np
import pytest

from dpsr import tensor as T
from dpsr.errors import ContractError, ShapeError
from dpsr.tensor import Tape, Tensor, grad_check


def t64(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------------------
# conv1d


def test_conv1d_identity_kernel():
    x = Tensor([[1.0], [2.0], [3.0]])
    w = Tensor(np.array([[[0.0, 1.0, 0.0]]]))
    out = T.conv1d(x, w)
    assert np.array_equal(out.data[:, 0], [1.0, 2.0, 3.0])


def test_conv1d_box_kernel_hand_values():
    # zero padding: [0,1,2,3,0] convolved with [1,1,1]
    x = Tensor([[1.0], [2.0], [3.0]])
    w = Tensor(np.array([[[1.0, 1.0, 1.0]]]))
    out = T.conv1d(x, w)
    assert np.allclose(out.data[:, 0], [3.0, 6.0, 5.0])


def test_conv1d_zero_input_gives_bias():
    x = Tensor(np.zeros((5, 2)))
    w = Tensor(np.random.default_rng(0).standard_normal((3, 2, 3)))
    b = Tensor([1.5, -2.0, 0.25])
    out = T.conv1d(x, w, b)
    assert np.allclose(out.data, np.broadcast_to(b.data, (5, 3)))


def test_conv1d_shape_error():
    x = Tensor(np.zeros((4, 3)))
    w = Tensor(np.zeros((2, 5, 3)))
    with pytest.raises(ShapeError):
        T.conv1d(x, w)


def test_conv1d_even_kernel_rejected():
    with pytest.raises(ContractError):
        T.conv1d(Tensor(np.zeros((4, 1))), Tensor(np.zeros((1, 1, 4))))


def _dense_conv1d_oracle(x, w, b=None):
    """Direct triple loop over the definition (zero same-padding)."""
    width, cin = x.shape
    cout, _, k = w.shape
    p = k // 2
    out = np.zeros((width, cout))
    for i in range(width):
        for o in range(cout):
            acc = 0.0
            for c in range(cin):
                for j in range(k):
                    src = i + j - p
                    if 0 <= src < width:
                        acc += w[o, c, j] * x[src, c]
            out[i, o] = acc + (b[o] if b is not None else 0.0)
    return out


def test_conv1d_matches_dense_oracle():
    rng = np.random.default_rng(7)
    for _ in range(10):
        x = rng.standard_normal((6, 3))
        w = rng.standard_normal((4, 3, 5))
        b = rng.standard_normal(4)
        got = T.conv1d(Tensor(x), Tensor(w), Tensor(b)).data
        assert np.allclose(got, _dense_conv1d_oracle(x, w, b), atol=1e-5)


def test_conv1d_linearity():
    rng = np.random.default_rng(8)
    w = Tensor(rng.standard_normal((2, 3, 3)))
    x1, x2 = rng.standard_normal((2, 5, 3))
    a, b = 0.7, -1.3
    lhs = T.conv1d(Tensor(a * x1 + b * x2), w).data
    rhs = a * T.conv1d(Tensor(x1), w).data + b * T.conv1d(Tensor(x2), w).data
    assert np.allclose(lhs, rhs, atol=1e-6)


# ---------------------------------------------------------------------------
# depthwise / causal conv


def test_depthwise_identity():
    x = Tensor(np.random.default_rng(1).standard_normal((4, 3)))
    w = np.zeros((3, 3))
    w[:, 1] = 1.0
    out = T.depthwise_conv1d(x, Tensor(w))
    assert np.allclose(out.data, x.data)


def test_depthwise_channel_separation():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((6, 4))
    w = Tensor(rng.standard_normal((4, 3)))
    base = T.depthwise_conv1d(Tensor(x), w).data
    x2 = x.copy()
    x2[:, 0] += rng.standard_normal(6)
    pert = T.depthwise_conv1d(Tensor(x2), w).data
    assert np.array_equal(base[:, 1:], pert[:, 1:])
    assert not np.array_equal(base[:, 0], pert[:, 0])


def test_depthwise_causal_kernel_vs_conv1d():
    x = np.array([[1.0], [2.0], [4.0]])
    w = np.array([[1.0, 1.0, 0.0]])
    got = T.depthwise_conv1d(Tensor(x), Tensor(w)).data
    ref = T.conv1d(Tensor(x), Tensor(w[None])).data
    assert np.array_equal(got, ref)
    assert np.allclose(got[:, 0], [1.0, 3.0, 6.0])


def test_depthwise_shape_error():
    with pytest.raises(ShapeError):
        T.depthwise_conv1d(Tensor(np.zeros((4, 3))), Tensor(np.zeros((2, 3))))


def test_causal_conv_matches_explicit_sum():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((5, 2, 3))
    w = rng.standard_normal((3, 4))
    got = T.causal_depthwise_conv(Tensor(x), Tensor(w)).data
    for y in range(5):
        for c in range(3):
            acc = np.zeros(2)
            for j in range(4):
                src = y - 3 + j
                if src >= 0:
                    acc += w[c, j] * x[src, :, c]
            assert np.allclose(got[y, :, c], acc, atol=1e-6)


def test_causal_conv_is_causal():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((6, 2, 3))
    w = Tensor(rng.standard_normal((3, 2)))
    base = T.causal_depthwise_conv(Tensor(x), w).data
    x2 = x.copy()
    x2[4:] += 100.0
    pert = T.causal_depthwise_conv(Tensor(x2), w).data
    assert np.array_equal(base[:4], pert[:4])


# ---------------------------------------------------------------------------
# layer norm / activations / elementwise


def test_layer_norm_constant_input_zeros():
    x = Tensor(np.full((3, 4), 2.5))
    out = T.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.allclose(out.data, 0.0, atol=1e-3)


def test_layer_norm_two_point_oracle():
    x = Tensor(np.array([[-1.0, 1.0]]))
    out = T.layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-5)


def test_layer_norm_standardizes():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((6, 8)).astype(np.float64))
    out = T.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    assert np.allclose(out.mean(axis=-1), 0.0, atol=1e-5)
    assert np.allclose(out.var(axis=-1), 1.0, atol=1e-5)


def test_layer_norm_gamma_annihilation():
    x = Tensor(np.random.default_rng(6).standard_normal((4, 3)))
    out = T.layer_norm(x, Tensor(np.zeros(3)), Tensor(np.full(3, 0.75)))
    assert np.allclose(out.data, 0.75)


def test_layer_norm_bad_eps():
    with pytest.raises(ContractError):
        T.layer_norm(Tensor(np.zeros((2, 2))), Tensor(np.ones(2)),
                     Tensor(np.zeros(2)), eps=0.0)


def test_silu_values():
    assert T.silu(Tensor([0.0])).data[0] == 0.0
    assert np.isclose(T.silu(Tensor([1.0])).data[0], 0.731059, atol=1e-5)
    xs = np.linspace(-4, 4, 100)
    got = T.silu(Tensor(xs)).data
    ref = xs / (1.0 + np.exp(-xs))
    assert np.allclose(got, ref, atol=1e-6)


def test_softplus_at_zero():
    assert np.isclose(T.softplus(Tensor([0.0])).data[0], np.log(2.0), atol=1e-6)


def test_linear_identity_and_hand_sum():
    x = Tensor([[1.0, 2.0]])
    assert np.allclose(T.linear(x, Tensor(np.eye(2))).data, x.data)
    out = T.linear(x, Tensor([[1.0, 1.0]]), Tensor([3.0]))
    assert np.allclose(out.data, [[6.0]])


def test_linear_dot_product_oracle():
    rng = np.random.default_rng(9)
    x = rng.standard_normal(3)
    w = rng.standard_normal((4, 3))
    got = T.linear(Tensor(x), Tensor(w)).data
    ref = np.array([sum(w[o, i] * x[i] for i in range(3)) for o in range(4)])
    assert np.allclose(got, ref, atol=1e-6)


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        T.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_split_half():
    a, b = T.split_half(Tensor([[1.0, 2.0, 3.0, 4.0]]))
    assert np.allclose(a.data, [[1.0, 2.0]])
    assert np.allclose(b.data, [[3.0, 4.0]])
    with pytest.raises(ShapeError):
        T.split_half(Tensor(np.zeros((2, 3))))


def test_mean_pool_constant():
    x = Tensor(np.full((5, 3), 1.25))
    out = T.reduce_mean(x, axis=-2, keepdims=True)
    assert np.allclose(out.data, 1.25)


def test_determinism_bitwise():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((6, 5)).astype(np.float32)
    w = rng.standard_normal((4, 5, 3)).astype(np.float32)
    a = T.conv1d(Tensor(x), Tensor(w)).data
    b = T.conv1d(Tensor(x), Tensor(w)).data
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# backward / tape


def test_backward_sum_gives_ones():
    x = t64(np.random.default_rng(11).standard_normal((3, 4)))
    with Tape() as tape:
        loss = T.reduce_sum(x)
    (g,) = tape.gradients(loss, [x])
    assert np.array_equal(g, np.ones((3, 4)))


def test_backward_silu_finite_difference():
    x = t64(np.random.default_rng(12).standard_normal(20))
    err = grad_check(lambda: T.reduce_sum(T.silu(x)), [x])
    assert err < 1e-7


def test_backward_unreachable_param_zero():
    x = t64(np.ones(3))
    orphan = t64(np.ones(2))
    with Tape() as tape:
        loss = T.reduce_sum(T.mul(x, x))
    gx, go = tape.gradients(loss, [x, orphan])
    assert np.allclose(gx, 2.0)
    assert np.array_equal(go, np.zeros(2))


def test_backward_rejects_nonscalar_loss():
    x = t64(np.ones(3))
    with Tape() as tape:
        y = T.mul(x, x)
    with pytest.raises(ContractError):
        T.backward(tape, y)


def test_grad_check_linear_layer():
    rng = np.random.default_rng(13)
    x = t64(rng.standard_normal((4, 3)), grad=False)
    w = t64(rng.standard_normal((2, 3)))
    b = t64(rng.standard_normal(2))
    err = grad_check(lambda: T.reduce_mean(T.mul(T.linear(x, w, b),
                                                 T.linear(x, w, b))), [w, b])
    assert err < 1e-7


def test_grad_check_constant_function():
    x = t64(np.ones(3))
    c = Tensor(np.array(2.0, dtype=np.float64))
    err = grad_check(lambda: T.add(T.mul(T.reduce_sum(x), 0.0), c), [x])
    assert err < 1e-8


def test_grad_check_requires_float64():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with pytest.raises(ContractError):
        grad_check(lambda: T.reduce_sum(x), [x])


# every primitive against central differences, many random instances
_UNARY = [
    ("silu", T.silu), ("sigmoid", T.sigmoid), ("softplus", T.softplus),
    ("exp", T.exp), ("relu", T.relu), ("neg", T.neg),
    ("abs", T.absolute),
]


@pytest.mark.parametrize("name,op", _UNARY)
def test_unary_gradients(name, op):
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(15):
        x = t64(rng.uniform(0.2, 1.5, size=(3, 4)) * rng.choice([-1.0, 1.0], (3, 4)))
        err = grad_check(lambda: T.reduce_mean(T.mul(op(x), op(x))), [x])
        assert err < 1e-6, f"{name}: {err}"


def test_binary_and_shape_op_gradients():
    rng = np.random.default_rng(99)
    for _ in range(15):
        a = t64(rng.uniform(0.5, 1.5, (3, 4)))
        b = t64(rng.uniform(0.5, 1.5, (3, 4)))
        c = t64(rng.uniform(0.5, 1.5, (4,)))

        def f():
            s = T.add(T.mul(a, b), T.div(a, c))       # broadcast div
            s = T.sub(s, T.sqrt(b))
            top = T.slice_axis(s, 0, 0, 2)
            rest = T.slice_axis(s, 0, 2, 3)
            s = T.concat([top, rest], axis=0)
            s = T.reshape(T.transpose(s, (1, 0)), (12,))
            return T.reduce_mean(T.mul(s, s))

        err = grad_check(f, [a, b, c])
        assert err < 1e-6


def test_reduce_and_stack_gradients():
    rng = np.random.default_rng(100)
    for _ in range(10):
        x = t64(rng.standard_normal((4, 3)) + 3.0)

        def f():
            m = T.reduce_max(x, axis=0, keepdims=True)
            s = T.reduce_sum(x, axis=1, keepdims=True)
            rows = [T.take_line(x, i) for i in range(4)]
            st = T.stack(rows, axis=0)
            y = T.add(T.mul(st, m), s)
            return T.reduce_mean(T.mul(y, T.arccos(T.clip(
                T.mul(x, 0.1), -0.9, 0.9))))

        err = grad_check(f, [x])
        assert err < 1e-6


def test_conv_gradients():
    rng = np.random.default_rng(101)
    for _ in range(8):
        x = t64(rng.standard_normal((5, 3)))
        w = t64(rng.standard_normal((2, 3, 3)))
        b = t64(rng.standard_normal(2))
        err = grad_check(
            lambda: T.reduce_mean(T.mul(T.conv1d(x, w, b), T.conv1d(x, w, b))),
            [x, w, b])
        assert err < 1e-6

        dw = t64(rng.standard_normal((3, 3)))
        err = grad_check(
            lambda: T.reduce_mean(T.mul(T.depthwise_conv1d(x, dw),
                                        T.depthwise_conv1d(x, dw))), [x, dw])
        assert err < 1e-6

        seq = t64(rng.standard_normal((4, 2, 3)))
        cw = t64(rng.standard_normal((3, 2)))
        cb = t64(rng.standard_normal(3))
        err = grad_check(
            lambda: T.reduce_mean(T.mul(T.causal_depthwise_conv(seq, cw, cb),
                                        T.causal_depthwise_conv(seq, cw, cb))),
            [seq, cw, cb])
        assert err < 1e-6


def test_layer_norm_gradients():
    rng = np.random.default_rng(102)
    for _ in range(10):
        x = t64(rng.standard_normal((3, 5)))
        g = t64(rng.uniform(0.5, 1.5, 5))
        b = t64(rng.standard_normal(5))
        err = grad_check(
            lambda: T.reduce_mean(T.mul(T.layer_norm(x, g, b),
                                        T.layer_norm(x, g, b))), [x, g, b])
        assert err < 1e-5
