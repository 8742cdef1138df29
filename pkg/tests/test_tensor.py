import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import check_gradients
from vesseldistill import tensor as T
from vesseldistill.errors import ConfigurationError, ContractError, DimensionError
from vesseldistill.optim import Adam, AdamState, adam_step


def loop_conv(x, w, b, stride, pad):
    """Seven nested loops: batch, out channel, three output axes, in channel, kernel cube."""
    B, C, D, H, W = x.shape
    co, _, k, _, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    od, oh, ow = [(n + 2 * pad - k) // stride + 1 for n in (D, H, W)]
    out = np.zeros((B, co, od, oh, ow))
    for n in range(B):
        for o in range(co):
            for i in range(od):
                for j in range(oh):
                    for l in range(ow):
                        acc = b[o]
                        for c in range(C):
                            patch = xp[n, c, i * stride:i * stride + k, j * stride:j * stride + k,
                                       l * stride:l * stride + k]
                            acc += float(np.sum(patch * w[o, c]))
                        out[n, o, i, j, l] = acc
    return out


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 4, 5, 3))
    out = T.conv3(x, np.ones((1, 1, 1, 1, 1)), np.zeros(1))
    assert np.array_equal(out.data, x)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.standard_normal((1, 1, 5, 5, 5))
    w = rng.standard_normal((2, 1, 3, 3, 3))
    b = rng.standard_normal(2)
    out = T.conv3(x, w, b, stride=stride, padding=pad).data
    ref = loop_conv(x, w, b, stride, pad)
    assert out.shape == ref.shape
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_conv_multichannel_loop_oracle():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 4, 5, 6))
    w = rng.standard_normal((4, 3, 3, 3, 3))
    b = rng.standard_normal(4)
    np.testing.assert_allclose(T.conv3(x, w, b, 1, 1).data, loop_conv(x, w, b, 1, 1), atol=1e-12)


def test_conv_errors_name_axis():
    with pytest.raises(DimensionError, match="axis 1"):
        T.conv3(np.zeros((1, 2, 4, 4, 4)), np.zeros((1, 3, 3, 3, 3)))
    with pytest.raises(DimensionError, match="axis 3"):
        T.conv3(np.zeros((1, 1, 4, 1, 4)), np.zeros((1, 1, 3, 3, 3)))
    with pytest.raises(ConfigurationError):
        T.conv3(np.zeros((1, 1, 4, 4, 4)), np.zeros((1, 1, 2, 2, 2)))
    with pytest.raises(ConfigurationError):
        T.conv3(np.zeros((1, 1, 4, 4, 4)), np.zeros((1, 1, 3, 3, 3)), stride=3)


@pytest.mark.parametrize("shape,stride,pad", [
    ((1, 2, 4, 4, 4), 1, 1), ((2, 1, 5, 4, 3), 2, 1), ((1, 3, 3, 3, 3), 1, 0)])
def test_conv_gradcheck(shape, stride, pad):
    rng = np.random.default_rng(1)
    w = rng.standard_normal((2, shape[1], 3, 3, 3))
    err = check_gradients(lambda x, k, b: T.conv3(x, k, b, stride, pad),
                          [rng.standard_normal(shape), w, rng.standard_normal(2)])
    assert err < 1e-4


def test_group_norm_constant_field():
    x = np.full((1, 4, 2, 2, 2), 3.7)
    out = T.group_norm(x, 2, np.ones(4), np.zeros(4))
    assert np.all(out.data == 0)


def test_group_norm_gamma_zero():
    x = np.random.default_rng(0).standard_normal((2, 4, 3, 3, 3))
    beta = np.array([0.5, -1.0, 2.0, 0.0])
    out = T.group_norm(x, 2, np.zeros(4), beta).data
    np.testing.assert_array_equal(out, np.broadcast_to(beta.reshape(1, 4, 1, 1, 1), out.shape))


def test_group_norm_statistics():
    x = np.random.default_rng(2).standard_normal((2, 6, 3, 2, 2)) * 4 + 1
    out = T.group_norm(x, 3, np.ones(6), np.zeros(6), eps=1e-12).data.reshape(2, 3, -1)
    np.testing.assert_allclose(out.mean(axis=2), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=2), 1, atol=1e-9)


def test_group_norm_rejects_bad_groups():
    with pytest.raises(ConfigurationError):
        T.group_norm(np.zeros((1, 6, 2, 2, 2)), 4, np.ones(6), np.zeros(6))


@pytest.mark.parametrize("shape,groups", [((1, 4, 2, 2, 2), 2), ((2, 6, 2, 3, 1), 3), ((1, 2, 3, 3, 3), 1)])
def test_group_norm_gradcheck(shape, groups):
    rng = np.random.default_rng(3)
    c = shape[1]
    err = check_gradients(lambda x, g, b: T.group_norm(x, groups, g, b),
                          [rng.standard_normal(shape), rng.standard_normal(c), rng.standard_normal(c)])
    assert err < 1e-4


def test_leaky_relu_values():
    np.testing.assert_array_equal(T.leaky_relu(np.array([-1.0, 0.0, 2.0]), 0.1).data, [-0.1, 0.0, 2.0])
    x = np.random.default_rng(0).standard_normal(10)
    np.testing.assert_array_equal(T.leaky_relu(x, 1.0).data, x)


def test_leaky_relu_zero_subgradient_uses_slope():
    x = T.Tensor(np.zeros(3), requires_grad=True)
    T.backward(T.tsum(T.leaky_relu(x, 0.2)))
    np.testing.assert_array_equal(x.grad, [0.2, 0.2, 0.2])


@pytest.mark.parametrize("shape", [(5,), (2, 3, 4), (1, 2, 2, 2, 2)])
def test_leaky_relu_gradcheck(shape):
    x = np.random.default_rng(4).standard_normal(shape)
    x[np.abs(x) < 0.05] = 0.5  # keep away from the kink
    assert check_gradients(lambda t: T.leaky_relu(t, 0.01), [x]) < 1e-6


def test_upsample_identity_and_single_voxel():
    x = np.random.default_rng(0).standard_normal((1, 2, 2, 3, 2))
    np.testing.assert_array_equal(T.upsample_nearest(x, 1).data, x)
    out = T.upsample_nearest(np.full((1, 1, 1, 1, 1), 4.5), 2).data
    assert out.shape == (1, 1, 2, 2, 2) and np.all(out == 4.5)


def test_upsample_backward_sums_blocks():
    rng = np.random.default_rng(1)
    x = T.Tensor(rng.standard_normal((1, 1, 2, 2, 2)), requires_grad=True)
    g = rng.standard_normal((1, 1, 6, 6, 6))
    T.backward(T.tsum(T.upsample_nearest(x, 3) * g))
    for i in range(2):
        for j in range(2):
            for k in range(2):
                block = g[0, 0, 3 * i:3 * i + 3, 3 * j:3 * j + 3, 3 * k:3 * k + 3]
                assert x.grad[0, 0, i, j, k] == pytest.approx(block.sum(), abs=1e-12)


@pytest.mark.parametrize("shape,f", [((1, 1, 2, 2, 2), 2), ((2, 3, 1, 2, 1), 2), ((1, 2, 1, 1, 2), 3)])
def test_upsample_gradcheck(shape, f):
    x = np.random.default_rng(5).standard_normal(shape)
    assert check_gradients(lambda t: T.upsample_nearest(t, f), [x]) < 1e-4


def _proj(rng, d):
    return [rng.standard_normal((d, d)) / math.sqrt(d) for _ in range(4)]


def test_attention_single_token():
    rng = np.random.default_rng(0)
    wq, wk, wv, wo = _proj(rng, 5)
    tok = rng.standard_normal((1, 1, 5))
    out = T.self_attention(tok, wq, wk, wv, wo).data
    np.testing.assert_allclose(out[0, 0], wo @ wv @ tok[0, 0], atol=1e-12)


def test_attention_identical_tokens_uniform():
    rng = np.random.default_rng(1)
    tok = np.repeat(rng.standard_normal((1, 1, 4)), 6, axis=1)
    _, attn = T.self_attention(tok, *_proj(rng, 4), return_weights=True)
    np.testing.assert_allclose(attn.data, 1 / 6, atol=1e-12)


def test_attention_rejects_non_square():
    rng = np.random.default_rng(2)
    wq, wk, wv, wo = _proj(rng, 4)
    with pytest.raises(DimensionError):
        T.self_attention(np.zeros((1, 2, 4)), wq, wk, np.zeros((4, 3)), wo)


@pytest.mark.parametrize("b,t,d", [(1, 4, 8), (2, 3, 4), (1, 1, 3)])
def test_attention_gradcheck(b, t, d):
    rng = np.random.default_rng(6)
    arrays = [rng.standard_normal((b, t, d))] + _proj(rng, d)
    assert check_gradients(lambda *a: T.self_attention(*a), arrays) < 1e-4


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(np.array([1.0, 1.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(T.softmax(np.array([0.0, math.log(3)])).data, [0.25, 0.75], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-100, 100))
def test_softmax_shift_invariance(vals, c):
    x = np.array(vals)
    a = T.softmax(x).data
    np.testing.assert_allclose(a, T.softmax(x + c).data, atol=1e-12)
    assert a.sum() == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("shape,axis", [((5,), -1), ((2, 3, 4), 1), ((3, 2), 0)])
def test_softmax_gradcheck(shape, axis):
    x = np.random.default_rng(7).standard_normal(shape)
    assert check_gradients(lambda t: T.softmax(t, axis), [x]) < 1e-4


def test_backward_examples():
    x = T.Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))
    y = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.backward(T.tsum(y * y))
    np.testing.assert_array_equal(y.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(x * 2)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_composed_graph_gradcheck(seed):
    rng = np.random.default_rng(seed)

    def build(x, k, g, b):
        h = T.conv3(x, k, None, 1, 1)
        return T.leaky_relu(T.group_norm(h, 2, g, b), 0.01)

    arrays = [rng.standard_normal((1, 2, 3, 3, 3)), rng.standard_normal((4, 2, 3, 3, 3)),
              rng.standard_normal(4), rng.standard_normal(4)]
    assert check_gradients(build, arrays) < 1e-4


@pytest.mark.parametrize("op", [T.exp, T.sigmoid, T.tabs, lambda t: T.log(t * t + 1.0),
                                lambda t: T.power(t * t + 1.0, 1.5), lambda t: T.mean(t, axis=1)])
def test_elementwise_gradcheck(op):
    x = np.random.default_rng(8).standard_normal((3, 4)) + 0.1
    assert check_gradients(op, [x]) < 1e-4


def test_matmul_and_broadcast_gradcheck():
    rng = np.random.default_rng(9)
    arrays = [rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5)), rng.standard_normal(5)]
    assert check_gradients(lambda a, b, c: T.matmul(a, b) / (c * c + 1.0), arrays) < 1e-4


def test_graph_topological_order_and_replay():
    rng = np.random.default_rng(3)
    x = T.Tensor(rng.standard_normal((1, 1, 3, 3, 3)), requires_grad=True)
    k = T.Tensor(rng.standard_normal((2, 1, 3, 3, 3)), requires_grad=True)
    h = T.leaky_relu(T.conv3(x, k, None, 1, 1))
    loss = T.tsum(h * h)
    g = T.Graph(loss)
    produced = set()
    leaves = {id(x), id(k)}
    for e in g.entries:
        assert all(i in produced or i in leaves for i in e.input_ids)
        produced.add(e.output_id)
    assert len(produced) == len(g)
    T.backward(loss)
    first = x.grad.copy()
    x.zero_grad()
    k.zero_grad()
    T.backward(loss)
    np.testing.assert_array_equal(first, x.grad)


def test_stop_gradient_blocks():
    x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.backward(T.tsum(T.stop_gradient(x) * x))
    np.testing.assert_array_equal(x.grad, [1.0, 2.0])


def test_no_grad_records_nothing():
    x = T.Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = x * 3
    assert not y.requires_grad


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_debug_mode_flags_non_finite():
    T.set_debug(True)
    try:
        with pytest.raises(FloatingPointError):
            T.exp(np.array([1000.0]))
    finally:
        T.set_debug(False)


def test_forward_determinism():
    rng = np.random.default_rng(11)
    x, w = rng.standard_normal((1, 2, 4, 4, 4)), rng.standard_normal((3, 2, 3, 3, 3))
    a = T.conv3(x, w, None, 2, 1).data
    b = T.conv3(x, w, None, 2, 1).data
    assert a.tobytes() == b.tobytes()


def test_adam_zero_grad_leaves_params():
    p = T.Tensor(np.array([1.0, -2.0]))
    adam_step([p], [np.zeros(2)], AdamState(), lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_is_lr_times_sign():
    p = T.Tensor(np.array([0.0, 0.0, 0.0]))
    g = np.array([3.0, -0.5, 1e-3])
    adam_step([p], [g], AdamState(), lr=0.01, eps=1e-8)
    np.testing.assert_allclose(p.data, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_two_step_scalar_oracle():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    g1, g2 = 0.5, -0.2
    # hand-evaluated recurrence
    m1, v1 = 0.1 * g1, 0.001 * g1 ** 2
    x1 = 1.0 - lr * (m1 / 0.1) / (math.sqrt(v1 / 0.001) + eps)
    m2, v2 = 0.9 * m1 + 0.1 * g2, 0.999 * v1 + 0.001 * g2 ** 2
    c1, c2 = 1 - 0.9 ** 2, 1 - 0.999 ** 2
    x2 = x1 - lr * (m2 / c1) / (math.sqrt(v2 / c2) + eps)
    p = T.Tensor(np.array([1.0]))
    state = AdamState()
    adam_step([p], [np.array([g1])], state, lr, (b1, b2), eps)
    assert p.data[0] == pytest.approx(x1, abs=1e-14)
    adam_step([p], [np.array([g2])], state, lr, (b1, b2), eps)
    assert p.data[0] == pytest.approx(x2, abs=1e-14)


def test_adam_decay_and_errors():
    p = T.Tensor(np.zeros(1))
    opt = Adam([p], lr=0.01, decay=0.97)
    opt.set_epoch(3)
    assert opt.lr == pytest.approx(0.01 * 0.97 ** 3)
    with pytest.raises(ConfigurationError):
        Adam([p], lr=0.0)
    with pytest.raises(ConfigurationError):
        adam_step([p], [np.ones(1)], AdamState(), lr=-1.0)
    with pytest.raises(ConfigurationError):
        Adam([p], scales=[1.0, 2.0])


def test_adam_state_roundtrip():
    rng = np.random.default_rng(0)
    p1, p2 = T.Tensor(np.zeros(3)), T.Tensor(np.zeros(3))
    a, b = Adam([p1]), Adam([p2])
    g = rng.standard_normal(3)
    p1.grad = g
    a.step()
    b.load_state_arrays(a.state_arrays())
    p2.data[:] = p1.data
    p1.grad = p2.grad = g
    a.step()
    b.step()
    np.testing.assert_array_equal(p1.data, p2.data)
