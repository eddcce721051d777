import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from deeptopo.tensor import Tensor, conv2d, depthwise_conv2d, linear, relu, sigmoid, softplus
from deeptopo.wcap import (
    CHOL_FLOOR,
    DESCRIPTOR_DIM,
    LAPLACIAN,
    METRIC_EPSILON,
    WCAP,
    base_grid,
    build_metric,
    freq_gate,
    identity_chol_bias,
    laplacian_highpass,
    metric_distance,
    metric_from_chol_params,
    project_descriptor,
    warp_offsets,
    warped_conv,
    wcap_forward,
)


def eig2(G):
    """Closed-form eigenvalues of a symmetric 2×2 matrix.

    The small one is taken as det/λ_max; ``mid - rad`` cancels badly when
    the matrix is nearly rank one.
    """
    a, b, d = G[..., 0, 0], G[..., 0, 1], G[..., 1, 1]
    mid = (a + d) / 2
    rad = np.hypot((a - d) / 2, b)
    hi = mid + rad
    return (a * d - b * b) / hi, hi


def random_lower(rng, n=None):
    shape = () if n is None else (n,)
    L = np.zeros(shape + (2, 2))
    L[..., 0, 0] = rng.uniform(0.2, 3.0, shape)
    L[..., 1, 1] = rng.uniform(0.2, 3.0, shape)
    L[..., 1, 0] = rng.uniform(-2.0, 2.0, shape)
    return L


def metric_params(rng, scale=1.0):
    return {
        "fc1.weight": Tensor(rng.standard_normal((16, DESCRIPTOR_DIM)) * scale),
        "fc1.bias": Tensor(rng.standard_normal(16) * scale),
        "fc2.weight": Tensor(rng.standard_normal((3, 16)) * scale),
        "fc2.bias": Tensor(rng.standard_normal(3) * scale),
    }


def test_project_descriptor_oracle(rng):
    lat = rng.standard_normal((4, 8))
    W, b = rng.standard_normal((6, 8)), rng.standard_normal(6)
    got = project_descriptor(Tensor(lat), Tensor(W), Tensor(b)).data
    np.testing.assert_allclose(got, W @ lat.mean(0) + b, atol=1e-12)
    v = rng.standard_normal(8)
    same = project_descriptor(Tensor(np.tile(v, (5, 1))), Tensor(W), Tensor(b)).data
    np.testing.assert_allclose(same, W @ v + b, atol=1e-12)
    np.testing.assert_array_equal(project_descriptor(Tensor(lat), Tensor(np.zeros((6, 8))), Tensor(b)).data, b)


def test_project_descriptor_empty_tokens():
    with pytest.raises(ValueError):
        project_descriptor(Tensor(np.zeros((0, 8))), Tensor(np.zeros((6, 8))), Tensor(np.zeros(6)))


def test_identity_factor():
    raw = identity_chol_bias()
    st_ = metric_from_chol_params(Tensor(np.array([raw, 0.0, raw])))
    np.testing.assert_allclose(st_.L.data, np.eye(2), atol=1e-15)
    np.testing.assert_allclose(st_.G.data, np.eye(2) * (1 + METRIC_EPSILON), atol=1e-15)


def test_diagonal_factor():
    raw = np.array([math.log(math.expm1(2 - CHOL_FLOOR)), 0.0, identity_chol_bias()])
    G = metric_from_chol_params(Tensor(raw)).G.data
    np.testing.assert_allclose(G, np.diag([4.0, 1.0]) + METRIC_EPSILON * np.eye(2), atol=1e-12)


def test_metric_rejects_bad_inputs():
    with pytest.raises(ValueError):
        metric_from_chol_params(Tensor(np.array([np.nan, 0.0, 0.0])))
    with pytest.raises(ValueError):
        metric_from_chol_params(Tensor(np.zeros(3)), epsilon=0.0)


def test_spd_over_ten_thousand_descriptors():
    rng = np.random.default_rng(7)
    p = metric_params(rng, 1.5)
    g = rng.standard_normal((10_000, DESCRIPTOR_DIM)) * 3
    st_ = build_metric(Tensor(g), p)
    G, L = st_.G.data, st_.L.data
    lo, hi = eig2(G)
    assert np.all(lo >= METRIC_EPSILON) and np.all(hi >= METRIC_EPSILON)
    np.testing.assert_array_equal(G, np.swapaxes(G, -1, -2))
    assert np.all(L[:, 0, 0] > 0) and np.all(L[:, 1, 1] > 0) and np.all(L[:, 0, 1] == 0)
    np.testing.assert_allclose(G, L @ np.swapaxes(L, -1, -2) + METRIC_EPSILON * np.eye(2), atol=1e-12)


def test_build_metric_composition(rng):
    p = metric_params(rng)
    g = rng.standard_normal(6)
    h = np.maximum(p["fc1.weight"].data @ g + p["fc1.bias"].data, 0)
    raw = p["fc2.weight"].data @ h + p["fc2.bias"].data
    sp = np.log1p(np.exp(raw))
    L = np.array([[sp[0] + CHOL_FLOOR, 0], [raw[1], sp[2] + CHOL_FLOOR]])
    np.testing.assert_allclose(build_metric(Tensor(g), p).L.data, L, atol=1e-12)


def test_metric_distance_cases(rng):
    assert metric_distance((1.0, 0.0), np.eye(2)) == 1.0
    assert metric_distance((1.0, 1.0), np.diag([4.0, 1.0])) == pytest.approx(math.sqrt(5), abs=1e-15)
    assert metric_distance((0.0, 0.0), np.diag([4.0, 1.0])) == 0.0
    for _ in range(20):
        dp = rng.standard_normal(2)
        L = random_lower(rng)
        G = L @ L.T
        q = G[0, 0] * dp[0] ** 2 + 2 * G[0, 1] * dp[0] * dp[1] + G[1, 1] * dp[1] ** 2
        assert metric_distance(dp, G) == pytest.approx(math.sqrt(q), abs=1e-12)


@given(st.floats(-50, 50), st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 2**31 - 1))
def test_metric_distance_homogeneous(s, x, y, seed):
    L = random_lower(np.random.default_rng(seed))
    G = L @ L.T
    assert metric_distance((s * x, s * y), G) == pytest.approx(abs(s) * metric_distance((x, y), G),
                                                              rel=1e-12, abs=1e-12)


def test_warp_identity_and_diagonal():
    f = warp_offsets(np.eye(2), 3)
    np.testing.assert_array_equal(f.warped_offsets.data, base_grid(3).astype(float))
    d = warp_offsets(np.diag([2.0, 1.0]), 3)
    i = [tuple(o) for o in base_grid(3)].index((1, 0))
    np.testing.assert_array_equal(d.warped_offsets.data[i], [0.5, 0.0])
    with pytest.raises(ValueError):
        base_grid(4)


def test_warp_isometry():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(500):
        L = random_lower(rng)
        for k in (3, 5):
            f = warp_offsets(L, k)
            d = metric_distance(f.warped_offsets.data, L @ L.T)
            worst = max(worst, np.max(np.abs(d - np.linalg.norm(f.base_offsets, axis=1))))
    assert worst <= 1e-10


def test_warp_matches_inverse_transpose(rng):
    L = random_lower(rng, 4)
    f = warp_offsets(L, 3)
    ref = np.einsum("nij,kj->nki", np.linalg.inv(np.swapaxes(L, -1, -2)), base_grid(3))
    np.testing.assert_allclose(f.warped_offsets.data, ref, atol=1e-12)


def test_identity_warp_equals_conv2d_float32():
    rng = np.random.default_rng(11)
    field = warp_offsets(np.eye(2, dtype=np.float32), 3)
    worst = 0.0
    for _ in range(100):
        c, co = rng.integers(1, 5), rng.integers(1, 5)
        h, w = rng.integers(3, 12, 2)
        x = rng.standard_normal((c, h, w)).astype(np.float32)
        wt = rng.standard_normal((co, c, 3, 3)).astype(np.float32)
        a = warped_conv(Tensor(x), Tensor(wt), field).data
        b = conv2d(Tensor(x), Tensor(wt), None, 1, 1).data
        assert a.dtype == np.float32
        worst = max(worst, float(np.max(np.abs(a - b))))
    assert worst <= 1e-6


def test_identity_warp_equals_conv2d_float64(rng):
    x = rng.standard_normal((2, 3, 7, 6))
    wt = rng.standard_normal((4, 3, 5, 5))
    a = warped_conv(Tensor(x), Tensor(wt), warp_offsets(np.eye(2), 5)).data
    np.testing.assert_allclose(a, conv2d(Tensor(x), Tensor(wt), None, 1, 2).data, atol=1e-12)


def test_warped_conv_constant_interior(rng):
    L = np.array([[1.3, 0.0], [0.2, 0.9]])
    wt = rng.standard_normal((2, 1, 3, 3))
    out = warped_conv(Tensor(np.full((1, 12, 12), 2.5)), Tensor(wt), warp_offsets(L, 3)).data
    expect = np.broadcast_to(2.5 * wt.sum(axis=(1, 2, 3))[:, None, None], (2, 4, 4))
    np.testing.assert_allclose(out[:, 4:-4, 4:-4], expect, atol=1e-12)


def test_warped_conv_errors(rng):
    with pytest.raises(ValueError):
        warped_conv(Tensor(np.zeros((2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))), warp_offsets(np.eye(2), 3))
    with pytest.raises(ValueError):
        warped_conv(Tensor(np.zeros((2, 5, 5))), Tensor(np.zeros((1, 2, 3, 3))), warp_offsets(np.eye(2), 5))


def test_laplacian(rng):
    const = laplacian_highpass(Tensor(np.full((2, 6, 6), 3.0))).data
    np.testing.assert_array_equal(const[:, 1:-1, 1:-1], 0.0)
    imp = np.zeros((1, 5, 5))
    imp[0, 2, 2] = 1
    out = laplacian_highpass(Tensor(imp)).data[0]
    assert out[2, 2] == -4 and out[1, 2] == out[3, 2] == out[2, 1] == out[2, 3] == 1
    assert np.count_nonzero(out) == 5
    x = rng.standard_normal((3, 6, 7))
    ref = depthwise_conv2d(Tensor(x), Tensor(np.broadcast_to(LAPLACIAN, (3, 3, 3)).copy()), 1).data
    np.testing.assert_allclose(laplacian_highpass(Tensor(x)).data, ref, atol=1e-12)


def gate_params(rng, c, zero_last=False):
    p = {"proj.weight": rng.standard_normal((32, c)), "proj.bias": rng.standard_normal(32),
         "fc1.weight": rng.standard_normal((32, 38)) * 0.2, "fc1.bias": rng.standard_normal(32),
         "fc2.weight": rng.standard_normal((c, 32)) * 0.2, "fc2.bias": rng.standard_normal(c)}
    if zero_last:
        p["fc2.weight"] = np.zeros((c, 32))
        p["fc2.bias"] = np.zeros(c)
    return {k: Tensor(v) for k, v in p.items()}


def test_freq_gate_oracle_and_range(rng):
    c = 5
    x = rng.standard_normal((c, 6, 6)) * 10
    g = rng.standard_normal(6)
    p = gate_params(rng, c)
    pd = {k: v.data for k, v in p.items()}
    h = pd["proj.weight"] @ x.mean(axis=(1, 2)) + pd["proj.bias"]
    z = np.maximum(pd["fc1.weight"] @ np.concatenate([h, g]) + pd["fc1.bias"], 0)
    ref = 1 / (1 + np.exp(-(pd["fc2.weight"] @ z + pd["fc2.bias"])))
    got = freq_gate(Tensor(x), Tensor(g), p).data
    np.testing.assert_allclose(got, ref, atol=1e-10)
    assert np.all((got > 0) & (got < 1))
    half = freq_gate(Tensor(x), Tensor(g), gate_params(rng, c, zero_last=True)).data
    np.testing.assert_array_equal(half, 0.5)


def make_wcap(rng, c, dtype=np.float64):
    return WCAP(c, 16, rng, dtype)


def test_closed_gate_gives_warped(rng):
    m = make_wcap(rng, 3)
    m.param_dict()["gate.fc2.bias"].data[...] = -1e4
    x = Tensor(rng.standard_normal((3, 8, 8)))
    g = Tensor(rng.standard_normal(6))
    out, parts = m(x, g, return_parts=True)
    np.testing.assert_array_equal(out.data, parts["f_warped"].data)


def test_identity_reduction_of_wcap(rng):
    c = 3
    m = make_wcap(rng, c)
    p = m.param_dict()
    p["metric.fc2.weight"].data[...] = 0
    p["metric.fc2.bias"].data[...] = [identity_chol_bias(), 0.0, identity_chol_bias()]
    ident = np.zeros((c, c, 3, 3))
    for i in range(c):
        ident[i, i, 1, 1] = 1
    p["warp_weight"].data[...] = ident
    x = rng.standard_normal((c, 8, 8))
    g = Tensor(rng.standard_normal(6))
    out, parts = m(Tensor(x), g, return_parts=True)
    lap = laplacian_highpass(Tensor(x)).data
    np.testing.assert_allclose(out.data, x + parts["gate"].data[:, None, None] * lap, atol=1e-12)


def test_wcap_batched_matches_single(rng):
    m = make_wcap(rng, 2)
    x = rng.standard_normal((3, 2, 6, 6))
    g = rng.standard_normal((3, 6))
    out = m(Tensor(x), Tensor(g)).data
    for i in range(3):
        np.testing.assert_allclose(out[i], m(Tensor(x[i]), Tensor(g[i])).data, atol=1e-12)


def test_wcap_starts_near_identity_metric():
    m = WCAP(4, 8, np.random.default_rng(0), np.float64)
    g = Tensor(np.zeros(6))
    p = m.param_dict()
    L = build_metric(g, {k[7:]: v for k, v in p.items() if k.startswith("metric.")}).L.data
    np.testing.assert_allclose(L, np.eye(2), atol=1e-12)
