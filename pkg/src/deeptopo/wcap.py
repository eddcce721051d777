"""Water-conditioned adaptive perception.

A global 6-d descriptor drives a 2×2 SPD metric ``G = L Lᵀ + εI``. The
nominal ``k×k`` convolution grid is replaced by offsets ``(Lᵀ)⁻¹ Δp`` whose
metric length equals the nominal Euclidean step, and a fixed Laplacian
high-pass stream is added back through a per-channel sigmoid gate.

Offsets are ``(row, col)`` pairs, matching :func:`bilinear_sample`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .nn import Linear, Module, he_normal
from .tensor.core import make_result
from .tensor import (
    Tensor,
    as_tensor,
    bilinear_sample,
    channel_mix,
    concat,
    depthwise_conv2d,
    global_avg_pool,
    linear,
    matmul,
    relu,
    reshape,
    sigmoid,
    softplus,
    stack,
    transpose,
)

DESCRIPTOR_DIM = 6
METRIC_EPSILON = 1e-4
CHOL_FLOOR = 1e-3
GATE_HIDDEN = 32

LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
_LAPLACIAN_TAPS = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)]


@dataclass
class MetricState:
    g: Tensor
    chol_params: Tensor
    L: Tensor
    G: Tensor
    epsilon: float


@dataclass
class SampleField:
    base_offsets: np.ndarray  # k²×2 integer (row, col)
    warped_offsets: Tensor  # k²×2, or N×k²×2 for a batch of images

    @property
    def k(self) -> int:
        return int(round(math.sqrt(self.base_offsets.shape[0])))


def base_grid(k: int) -> np.ndarray:
    if k % 2 != 1 or k < 1:
        raise ValueError(f"kernel size must be odd, got {k}")
    r = k // 2
    return np.array([(i - r, j - r) for i in range(k) for j in range(k)], dtype=np.int64)


def project_descriptor(latent: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Token-mean pooling followed by a learned ``D -> 6`` map.

    ``latent`` is ``N_tok×D`` (or ``B×N_tok×D``).
    """
    if latent.shape[-2] == 0:
        raise ValueError("project_descriptor: empty token set")
    pooled = latent.mean(axis=-2)
    return linear(pooled, weight, bias)


def metric_from_chol_params(raw: Tensor, epsilon: float = METRIC_EPSILON, g: Optional[Tensor] = None,
                            floor: float = CHOL_FLOOR) -> MetricState:
    """``raw = (ℓ11_raw, ℓ21, ℓ22_raw)`` -> lower-triangular L with softplus+floor diagonal."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if not np.all(np.isfinite(raw.data)):
        raise ValueError("metric parameters are not finite")
    single = raw.ndim == 1
    r2 = reshape(raw, (1, 3)) if single else raw
    l11 = softplus(r2[:, 0]) + floor
    l21 = r2[:, 1]
    l22 = softplus(r2[:, 2]) + floor
    zero = Tensor(np.zeros(r2.shape[0], dtype=raw.dtype))
    L = stack([stack([l11, zero], axis=-1), stack([l21, l22], axis=-1)], axis=-2)
    G = matmul(L, transpose(L, (0, 2, 1))) + epsilon * np.eye(2, dtype=raw.dtype)
    if single:
        L = reshape(L, (2, 2))
        G = reshape(G, (2, 2))
    return MetricState(g=g, chol_params=raw, L=L, G=G, epsilon=epsilon)


def build_metric(g: Tensor, params: Mapping[str, Tensor], epsilon: float = METRIC_EPSILON) -> MetricState:
    """Descriptor -> 2-layer MLP (6→16→3) -> Cholesky factor -> SPD metric."""
    h = relu(linear(g, params["fc1.weight"], params["fc1.bias"]))
    raw = linear(h, params["fc2.weight"], params["fc2.bias"])
    return metric_from_chol_params(raw, epsilon, g=g)


def metric_distance(dp, G) -> np.ndarray | float:
    """``sqrt(dpᵀ G dp)``; ``dp`` may carry leading axes."""
    dp = np.asarray(dp.data if isinstance(dp, Tensor) else dp, dtype=np.float64)
    G = np.asarray(G.data if isinstance(G, Tensor) else G, dtype=np.float64)
    q = np.einsum("...i,ij,...j->...", dp, G, dp)
    d = np.sqrt(np.maximum(q, 0.0))
    return float(d) if d.ndim == 0 else d


def warp_offsets(L, k: int = 3) -> SampleField:
    """Map the centred ``k×k`` grid through ``(Lᵀ)⁻¹``, differentiably in ``L``."""
    base = base_grid(k)
    L = as_tensor(L)
    if L.shape[-2:] != (2, 2):
        raise ValueError(f"warp_offsets: L must be 2×2, got {L.shape}")
    a = L[..., 0, 0]
    b = L[..., 1, 0]
    c = L[..., 1, 1]
    if np.any(a.data == 0) or np.any(c.data == 0):
        raise ValueError("warp_offsets: singular Cholesky factor")
    dp0 = base[:, 0].astype(L.dtype)
    dp1 = base[:, 1].astype(L.dtype)
    if L.ndim == 3:
        a, b, c = (reshape(t, (-1, 1)) for t in (a, b, c))
    col = dp1 / c
    row = (dp0 - b * col) / a
    return SampleField(base_offsets=base, warped_offsets=stack([row, col], axis=-1))


def warped_conv(f_in: Tensor, weight: Tensor, field: SampleField) -> Tensor:
    """``out(p) = Σ_ij weight_ij · sample(f_in, p + Δp'_ij)`` with a per-image uniform field."""
    x = f_in
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    n, c, h, w = x.shape
    c_out, c_w, k, k2 = weight.shape
    if c_w != c or k != k2:
        raise ValueError(f"warped_conv: weight {weight.shape} incompatible with input channels {c}")
    offs = field.warped_offsets
    if offs.ndim == 2:
        offs = reshape(offs, (1,) + offs.shape)
    if offs.shape[-2] != k * k:
        raise ValueError(f"warped_conv: field has {offs.shape[-2]} offsets, kernel needs {k * k}")
    if offs.shape[0] not in (1, n):
        raise ValueError("warped_conv: one sample field per image required")
    if offs.shape[0] != n:
        offs = offs + Tensor(np.zeros((n, 1, 1), dtype=offs.dtype))
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    grid = np.stack([yy.reshape(-1), xx.reshape(-1)], axis=-1).astype(x.dtype)  # HW×2
    coords = reshape(offs, (n, k * k, 1, 2)) + grid[None, None]
    coords = reshape(coords, (n, k * k * h * w, 2))
    sampled = bilinear_sample(x, coords)  # n × c × (k² HW)
    out = _mix_taps(weight, reshape(sampled, (n, c, k * k, h * w)))
    out = reshape(out, (n, c_out, h, w))
    return reshape(out, (c_out, h, w)) if single else out


def _mix_taps(weight: Tensor, taps: Tensor) -> Tensor:
    """``Σ_t weight[:, :, t] @ taps[:, :, t]``, accumulated the way conv2d does.

    Per-tap products summed in tap order when ``C_in >= C_out``, one
    im2col product otherwise, so an integer field rounds like conv2d.
    """
    c_out, c, k, _ = weight.shape
    n, _, kk, p = taps.shape
    wd, td = weight.data, taps.data
    if c >= c_out:
        out = None
        for t in range(kk):
            y = channel_mix(np.ascontiguousarray(wd[:, :, t // k, t % k]), td[:, :, t])
            out = y if out is None else out + y
    else:
        out = channel_mix(wd.reshape(c_out, c * kk), td.reshape(n, c * kk, p))

    def bw(g):
        w2 = wd.reshape(c_out, c * kk)
        gt = channel_mix(w2.T, g).reshape(taps.shape) if taps.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = np.matmul(g, td.reshape(n, c * kk, p).transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        return gw, gt

    return make_result(out, (weight, taps), "mix_taps", bw)


def laplacian_highpass(f: Tensor) -> Tensor:
    """Fixed, non-learnable 3×3 Laplacian applied to every channel with zero padding."""
    c = f.shape[-3]
    kernel = Tensor(np.broadcast_to(LAPLACIAN.astype(f.dtype), (c, 3, 3)).copy())
    return depthwise_conv2d(f, kernel, padding=1, taps=_LAPLACIAN_TAPS)


def freq_gate(f_hp: Tensor, g: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """GAP -> project to 32 -> concat descriptor (32+6) -> MLP 38→32→C -> sigmoid."""
    pooled = global_avg_pool(f_hp)
    h = linear(pooled, params["proj.weight"], params["proj.bias"])
    z = concat([h, g], axis=-1)
    z = relu(linear(z, params["fc1.weight"], params["fc1.bias"]))
    return sigmoid(linear(z, params["fc2.weight"], params["fc2.bias"]))


def _subparams(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def wcap_forward(f_in: Tensor, g: Tensor, params: Mapping[str, Tensor], k: int = 3,
                 epsilon: float = METRIC_EPSILON, return_parts: bool = False):
    """``f_out = f_warped + gate ⊙ laplacian(f_warped)``.

    ``params`` holds ``metric.*``, ``warp_weight`` and ``gate.*`` entries
    (the layout of :class:`WCAP`).
    """
    state = build_metric(g, _subparams(params, "metric."), epsilon)
    field = warp_offsets(state.L, k)
    f_warped = warped_conv(f_in, params["warp_weight"], field)
    f_hp = laplacian_highpass(f_warped)
    gate = freq_gate(f_hp, g, _subparams(params, "gate."))
    gate4 = reshape(gate, gate.shape + (1, 1))
    f_out = f_warped + gate4 * f_hp
    if return_parts:
        return f_out, {"state": state, "field": field, "f_warped": f_warped, "f_hp": f_hp, "gate": gate}
    return f_out


def identity_chol_bias() -> float:
    """Raw diagonal value whose softplus plus the floor equals exactly one."""
    return float(np.log(np.expm1(1.0 - CHOL_FLOOR)))


class _MetricMlp(Module):
    def __init__(self, rng, dtype):
        super().__init__()
        self.add("fc1", Linear(DESCRIPTOR_DIM, 16, rng, dtype))
        fc2 = self.add("fc2", Linear(16, 3, rng, dtype))
        # start from (nearly) the identity metric so the warp begins as a plain grid
        fc2.bias.data[[0, 2]] = identity_chol_bias()


class _Gate(Module):
    def __init__(self, channels: int, rng, dtype):
        super().__init__()
        self.add("proj", Linear(channels, GATE_HIDDEN, rng, dtype))
        self.add("fc1", Linear(GATE_HIDDEN + DESCRIPTOR_DIM, GATE_HIDDEN, rng, dtype))
        self.add("fc2", Linear(GATE_HIDDEN, channels, rng, dtype))


class WCAP(Module):
    """Parameter holder for :func:`wcap_forward`; the descriptor head lives here too."""

    def __init__(self, channels: int, latent_dim: int, rng: np.random.Generator, dtype=np.float32,
                 k: int = 3, epsilon: float = METRIC_EPSILON):
        super().__init__()
        self.k = k
        self.epsilon = epsilon
        self.add("descriptor", Linear(latent_dim, DESCRIPTOR_DIM, rng, dtype))
        self.add("metric", _MetricMlp(rng, dtype))
        self.warp_weight = self.param(
            "warp_weight", he_normal(rng, (channels, channels, k, k), channels * k * k, dtype))
        self.add("gate", _Gate(channels, rng, dtype))

    def descriptor(self, latent: Tensor) -> Tensor:
        head = self._modules["descriptor"]
        return project_descriptor(latent, head.weight, head.bias)

    def __call__(self, f_in: Tensor, g: Tensor, return_parts: bool = False):
        return wcap_forward(f_in, g, self.param_dict(), self.k, self.epsilon, return_parts)
