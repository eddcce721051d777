import numpy as np
import pytest
from hypothesis import given, strategies as st

from deeptopo import gradsuite
from deeptopo.tensor import (
    Tensor,
    attention_block,
    bilinear_sample,
    conv2d,
    depthwise_conv2d,
    grad_check,
    linear,
    no_grad,
    record_branches,
    relu,
    replay_branches,
    sigmoid,
)
from deeptopo.tensor.core import make_result

SEEDS = tuple(range(10))
HEAVY = {"wcap_forward", "atrm_forward", "attention_block", "freq_gate", "astb_forward"}


def naive_conv(x, w, b, stride, pad):
    c_out, c_in, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (xp.shape[1] - k) // stride + 1
    wo = (xp.shape[2] - k) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, i * stride:i * stride + k, j * stride:j * stride + k]
                out[o, i, j] = np.sum(patch * w[o]) + (b[o] if b is not None else 0)
    return out


@pytest.mark.parametrize("name", [n for n in gradsuite.OPERATORS if n not in HEAVY])
def test_operator_gradients_ten_seeds(name):
    r = gradsuite.check_operator(name, SEEDS)
    assert r.max_rel_err < 1e-4, r


@pytest.mark.parametrize("name", sorted(HEAVY))
def test_heavy_operator_gradients(name):
    r = gradsuite.check_operator(name, SEEDS[:3])
    assert r.max_rel_err < 1e-4, r


def test_wrong_gradient_is_detected():
    r = gradsuite.negative_control()
    assert not r.passed and r.max_rel_err > 1e-2


def test_branch_replay_freezes_relu_pattern():
    x = np.array([-1.0, 2.0, -3.0, 4.0])
    with record_branches() as tape:
        relu(Tensor(x))
    with replay_branches(tape):
        frozen = relu(Tensor(-x)).data
    np.testing.assert_array_equal(frozen, [0.0, -2.0, 0.0, -4.0])
    np.testing.assert_array_equal(relu(Tensor(-x)).data, [1.0, 0.0, 3.0, 0.0])
    with pytest.raises(RuntimeError, match="replay"), replay_branches(tape):
        relu(Tensor(np.ones(3)))


def test_branch_replay_extrapolates_bilinear_cell():
    img = np.arange(16.0).reshape(1, 4, 4) ** 2
    with record_branches() as tape:
        bilinear_sample(Tensor(img), Tensor(np.array([[1.9, 1.0]])))
    with replay_branches(tape):
        got = bilinear_sample(Tensor(img), Tensor(np.array([[2.1, 1.0]]))).data
    lo, hi = img[0, 1, 1], img[0, 2, 1]
    assert got[0, 0] == pytest.approx(lo + 1.1 * (hi - lo))


def test_end_to_end_check_flags_wrong_model_gradient():
    model, loss = gradsuite.toy_model_fixture(0)

    def skewed():
        out = loss()
        return make_result(out.data, (out,), "skew", lambda g: (1.05 * g,))

    errs = gradsuite.directional_check(model, skewed, per_tensor=False)
    assert errs["all"] > 1e-2
    assert gradsuite.directional_check(model, loss, per_tensor=False)["all"] < 1e-4


@pytest.mark.parametrize("stride,pad,k,c_in,c_out", [
    (1, 1, 3, 3, 4), (1, 0, 1, 5, 2), (2, 1, 3, 2, 3), (1, 2, 5, 2, 6), (1, 0, 3, 17, 3), (2, 0, 1, 3, 3),
])
def test_conv2d_matches_direct_loops(rng, stride, pad, k, c_in, c_out):
    x = rng.standard_normal((c_in, 9, 8))
    w = rng.standard_normal((c_out, c_in, k, k))
    b = rng.standard_normal(c_out)
    got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(got, naive_conv(x, w, b, stride, pad), atol=1e-12)


def test_conv2d_batched_equals_per_image(rng):
    x = rng.standard_normal((3, 4, 7, 7))
    w = rng.standard_normal((5, 4, 3, 3))
    out = conv2d(Tensor(x), Tensor(w), None, 1, 1).data
    for i in range(3):
        np.testing.assert_allclose(out[i], conv2d(Tensor(x[i]), Tensor(w), None, 1, 1).data, atol=1e-12)


def test_conv2d_rejects_even_kernel(rng):
    with pytest.raises(ValueError):
        conv2d(Tensor(rng.standard_normal((1, 5, 5))), Tensor(np.ones((1, 1, 2, 2))))


def test_depthwise_taps_equal_masked_kernel(rng):
    x = rng.standard_normal((2, 7, 7))
    w = rng.standard_normal((2, 5, 5))
    taps = [(0, 0), (-1, 1), (-2, 2)]
    mask = np.zeros((5, 5))
    for dr, dc in taps:
        mask[2 + dr, 2 + dc] = 1
    a = depthwise_conv2d(Tensor(x), Tensor(w), 2, taps).data
    b = depthwise_conv2d(Tensor(x), Tensor(w * mask), 2).data
    np.testing.assert_allclose(a, b, atol=1e-12)
    for c in range(2):
        ref = naive_conv(x[c:c + 1], (w[c] * mask)[None, None], None, 1, 2)[0]
        np.testing.assert_allclose(a[c], ref, atol=1e-12)


def test_bilinear_sample_reference(rng):
    x = rng.standard_normal((2, 5, 6))
    coords = np.array([[0.0, 0.0], [1.25, 2.5], [4.0, 5.0], [-0.5, 1.0], [4.5, 2.0], [-3.0, -3.0]])
    out = bilinear_sample(Tensor(x), Tensor(coords)).data

    def ref(c, r, q):
        r0, q0 = int(np.floor(r)), int(np.floor(q))
        val = 0.0
        for dr, dq in ((0, 0), (0, 1), (1, 0), (1, 1)):
            rr, qq = r0 + dr, q0 + dq
            wgt = (1 - abs(r - rr)) * (1 - abs(q - qq))
            if 0 <= rr < 5 and 0 <= qq < 6:
                val += wgt * x[c, rr, qq]
        return val

    for m, (r, q) in enumerate(coords):
        for c in range(2):
            assert out[c, m] == pytest.approx(ref(c, r, q), abs=1e-12)
    np.testing.assert_array_equal(out[:, 0], x[:, 0, 0])


def test_linear_and_attention_reference(rng):
    d, n, heads = 8, 5, 2
    x = rng.standard_normal((n, d))
    W, b = rng.standard_normal((3, d)), rng.standard_normal(3)
    np.testing.assert_allclose(linear(Tensor(x), Tensor(W), Tensor(b)).data, x @ W.T + b, atol=1e-12)

    p = {k: rng.standard_normal(s) * 0.3 for k, s in {
        "norm1.weight": (d,), "norm1.bias": (d,), "attn.qkv.weight": (3 * d, d), "attn.qkv.bias": (3 * d,),
        "attn.proj.weight": (d, d), "attn.proj.bias": (d,), "norm2.weight": (d,), "norm2.bias": (d,),
        "mlp.fc1.weight": (4 * d, d), "mlp.fc1.bias": (4 * d,), "mlp.fc2.weight": (d, 4 * d), "mlp.fc2.bias": (d,)}.items()}

    def ln(v, g, bb):
        mu = v.mean(-1, keepdims=True)
        var = ((v - mu) ** 2).mean(-1, keepdims=True)
        return (v - mu) / np.sqrt(var + 1e-5) * g + bb

    def gelu(v):
        return 0.5 * v * (1 + np.tanh(np.sqrt(2 / np.pi) * (v + 0.044715 * v ** 3)))

    h = ln(x, p["norm1.weight"], p["norm1.bias"])
    qkv = h @ p["attn.qkv.weight"].T + p["attn.qkv.bias"]
    q, k, v = np.split(qkv, 3, axis=-1)
    hd = d // heads
    ctx = np.zeros((n, d))
    for i in range(heads):
        s = slice(i * hd, (i + 1) * hd)
        sc = q[:, s] @ k[:, s].T / np.sqrt(hd)
        pr = np.exp(sc - sc.max(-1, keepdims=True))
        pr /= pr.sum(-1, keepdims=True)
        ctx[:, s] = pr @ v[:, s]
    y = x + ctx @ p["attn.proj.weight"].T + p["attn.proj.bias"]
    h2 = ln(y, p["norm2.weight"], p["norm2.bias"])
    ref = y + gelu(h2 @ p["mlp.fc1.weight"].T + p["mlp.fc1.bias"]) @ p["mlp.fc2.weight"].T + p["mlp.fc2.bias"]
    got = attention_block(Tensor(x), heads, {k: Tensor(v) for k, v in p.items()}).data
    np.testing.assert_allclose(got, ref, atol=1e-10)


def test_attention_rejects_indivisible_heads(rng):
    with pytest.raises(ValueError):
        attention_block(Tensor(rng.standard_normal((4, 6))), 4, {})


def test_grad_check_requires_float64():
    with pytest.raises(TypeError):
        grad_check(lambda t: (t * t).sum(), [Tensor(np.ones(3, dtype=np.float32))])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = sigmoid(x * 2.0)
    assert y.record is None


@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_backward_accumulates_over_reuse(a, b, seed):
    r = np.random.default_rng(seed)
    x = Tensor(r.standard_normal((a, b)), requires_grad=True)
    y = (x * x + x * 3.0).sum()
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 3.0, atol=1e-12)


@given(st.integers(1, 3), st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_float32_and_float64_agree(c, hw, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((c, hw, hw))
    w = r.standard_normal((2, c, 3, 3))
    a = conv2d(Tensor(x), Tensor(w), None, 1, 1).data
    b = conv2d(Tensor(x.astype(np.float32)), Tensor(w.astype(np.float32)), None, 1, 1).data
    assert b.dtype == np.float32
    np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-4)
