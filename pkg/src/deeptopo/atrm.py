"""Topology refinement decoder: progressive ×2 upsampling with a smoothing
envelope, each stage followed by an 8-orientation directional filter bank.

Orientation ``θ`` steps by the lattice direction ``(-round(sin θ), round(cos θ))``
in ``(row, col)``, so 0° points right and 90° points up; rotating an image
with ``np.rot90`` corresponds to shifting the angle index by +2.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .nn import BatchNorm2d, Conv2d, Module, he_normal
from .tensor import Tensor, bilinear_upsample_x2, channel_mix, depthwise_conv2d, relu
from .tensor.core import make_result

ANGLES = tuple(range(0, 360, 45))


def direction_step(angle_deg: float) -> tuple[int, int]:
    t = math.radians(angle_deg)
    return (-int(round(math.sin(t))), int(round(math.cos(t))))


@dataclass
class DirectionalKernelBank:
    angles: tuple[int, ...]
    kernels: Tensor  # 8 × C × length × length
    support_masks: np.ndarray  # 8 × length × length, bool
    offsets: list[list[tuple[int, int]]]

    @property
    def length(self) -> int:
        return self.kernels.shape[-1]

    @property
    def channels(self) -> int:
        return self.kernels.shape[1]

    def rotated(self, quarter_turns: int = 1) -> "DirectionalKernelBank":
        """Bank whose slot ``a + 2q`` holds the slot-``a`` kernel rotated by ``q`` quarter turns."""
        shift = 2 * quarter_turns
        k = np.rot90(self.kernels.data, quarter_turns, axes=(-2, -1))
        k = np.roll(k, shift, axis=0)
        return DirectionalKernelBank(self.angles, Tensor(np.ascontiguousarray(k)),
                                     self.support_masks, self.offsets)


def support_offsets(angle_deg: float, length: int) -> list[tuple[int, int]]:
    dr, dc = direction_step(angle_deg)
    return [(s * dr, s * dc) for s in range(length // 2 + 1)]


def make_direction_kernels(length: int = 5, channels: int = 1, dtype=np.float64) -> DirectionalKernelBank:
    """Half-line supports (centre plus ``length // 2`` steps along θ), weights ``1/|support|``."""
    if length % 2 != 1 or length < 3:
        raise ValueError(f"kernel length must be odd and >= 3, got {length}")
    r = length // 2
    masks = np.zeros((len(ANGLES), length, length), dtype=bool)
    offsets = []
    for a, ang in enumerate(ANGLES):
        offs = support_offsets(ang, length)
        offsets.append(offs)
        for dr, dc in offs:
            masks[a, r + dr, r + dc] = True
    weights = masks / masks.sum(axis=(1, 2), keepdims=True)
    kernels = np.broadcast_to(weights[:, None], (len(ANGLES), channels, length, length)).astype(dtype)
    return DirectionalKernelBank(ANGLES, Tensor(kernels.copy()), masks, offsets)


def directional_responses(f: Tensor, bank: DirectionalKernelBank) -> list[Tensor]:
    r = bank.length // 2
    return [depthwise_conv2d(f, bank.kernels[a], padding=r, taps=bank.offsets[a])
            for a in range(len(bank.angles))]


def orbit_sum(terms: Sequence) -> object:
    """Sum 8 per-angle terms as ``((t0+t4)+(t2+t6)) + ((t1+t5)+(t3+t7))``.

    Shifting the angle index by 2 only swaps operands of commutative
    additions, so the rounded result is invariant under quarter-turn shifts.
    """
    if len(terms) != 8:
        raise ValueError(f"orbit_sum expects 8 terms, got {len(terms)}")
    t = terms
    return ((t[0] + t[4]) + (t[2] + t[6])) + ((t[1] + t[5]) + (t[3] + t[7]))


def astb_forward(f: Tensor, bank: DirectionalKernelBank, fusion_weight: Tensor) -> Tensor:
    """``f + Σ_θ F_θ · (K_θ ⊛ f)``: 8 half-line depthwise responses, 1×1 fusion 8C -> C, residual.

    ``fusion_weight`` is ``C × 8C × 1 × 1`` with input channels angle-major.
    Evaluated as a single fused node; the per-angle fusion terms are combined
    with :func:`orbit_sum`.
    """
    c = f.shape[-3]
    n_ang = len(bank.angles)
    if bank.channels != c:
        raise ValueError(f"astb: bank has {bank.channels} channels, input has {c}")
    if fusion_weight.shape != (c, n_ang * c, 1, 1):
        raise ValueError(f"astb: fusion weight shape {fusion_weight.shape} != {(c, n_ang * c, 1, 1)}")
    single = f.ndim == 3
    x = f.data[None] if single else f.data
    n, _, h, w = x.shape
    r = bank.length // 2
    kd = bank.kernels.data
    fd = fusion_weight.data.reshape(c, n_ang, c)
    xp = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)))

    def view(arr, dr, dc):
        return arr[:, :, r + dr:r + dr + h, r + dc:r + dc + w]

    responses, terms = [], []
    for a, offs in enumerate(bank.offsets):
        resp = None
        for dr, dc in offs:
            t = kd[a, :, r + dr, r + dc][None, :, None, None] * view(xp, dr, dc)
            resp = t if resp is None else resp + t
        responses.append(resp.reshape(n, c, h * w))
        terms.append(channel_mix(fd[:, a], responses[-1]))
    out = (orbit_sum(terms) + x.reshape(n, c, h * w)).reshape(x.shape)
    if single:
        out = out[0]

    def bw(grad):
        g3 = grad.reshape(n, c, h * w)
        gf = gk = gw = None
        if fusion_weight.requires_grad:
            gw = np.empty((c, n_ang, c), dtype=grad.dtype)
            for a in range(n_ang):
                gw[:, a] = np.matmul(g3, responses[a].transpose(0, 2, 1)).sum(axis=0)
            gw = gw.reshape(fusion_weight.shape)
        need_k, need_f = bank.kernels.requires_grad, f.requires_grad
        if need_k or need_f:
            gk = np.zeros_like(kd)
            gxp = np.zeros_like(xp) if need_f else None
            for a, offs in enumerate(bank.offsets):
                gr = channel_mix(fd[:, a].T, g3).reshape(n, c, h, w)
                for dr, dc in offs:
                    if need_k:
                        gk[a, :, r + dr, r + dc] = np.einsum("nchw,nchw->c", gr, view(xp, dr, dc))
                    if need_f:
                        view(gxp, dr, dc)[...] += kd[a, :, r + dr, r + dc][None, :, None, None] * gr
            if need_f:
                gf = grad.reshape(x.shape) + gxp[:, :, r:r + h, r:r + w]
                if single:
                    gf = gf[0]
        return gf, (gk if need_k else None), gw

    return make_result(out, (f, bank.kernels, fusion_weight), "astb", bw)


def rotate_fusion_weight(fusion_weight: np.ndarray, channels: int, quarter_turns: int = 1) -> np.ndarray:
    """Permute fusion input columns so angle block ``a`` moves to ``a + 2q``."""
    n_angles = fusion_weight.shape[1] // channels
    blocks = fusion_weight.reshape(fusion_weight.shape[0], n_angles, channels, 1, 1)
    return np.roll(blocks, 2 * quarter_turns, axis=1).reshape(fusion_weight.shape)


@dataclass
class AtrmConfig:
    stages: int
    channels_per_stage: Sequence[int]
    kernel_length: int = 5
    width: int = 64
    use_astb: bool = True

    def __post_init__(self):
        if len(self.channels_per_stage) != self.stages:
            raise ValueError(
                f"{self.stages} stages need {self.stages} channel widths, got {list(self.channels_per_stage)}")

    def check_shapes(self, bottleneck: int, output: int) -> None:
        if bottleneck * 2 ** self.stages != output:
            raise ValueError(
                f"ATRM: {self.stages} ×2 stages from {bottleneck} give {bottleneck * 2 ** self.stages}, "
                f"expected {output}")


class ASTB(Module):
    def __init__(self, channels: int, length: int = 5, dtype=np.float32):
        super().__init__()
        bank = make_direction_kernels(length, channels, dtype)
        self.angles = bank.angles
        self.offsets = bank.offsets
        self.support_masks = bank.support_masks
        self.kernels = self.param("kernels", bank.kernels.data)
        self.set_mask("kernels", bank.support_masks[:, None].astype(dtype))
        # zero fusion: the block starts as the identity through its residual
        self.fusion = self.param("fusion", np.zeros((channels, len(ANGLES) * channels, 1, 1), dtype))

    @property
    def bank(self) -> DirectionalKernelBank:
        return DirectionalKernelBank(self.angles, self.kernels, self.support_masks, self.offsets)

    def __call__(self, f: Tensor) -> Tensor:
        return astb_forward(f, self.bank, self.fusion)


class UpsampleStage(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.add("conv", Conv2d(c_in, c_out, 3, rng, dtype, bias=False))
        self.add("bn", BatchNorm2d(c_out, dtype))

    def __call__(self, f: Tensor) -> Tensor:
        return upsample_stage(f, self)


def upsample_stage(f: Tensor, stage: UpsampleStage) -> Tensor:
    """Bilinear ×2, then 3×3 conv + batch norm + relu."""
    x = bilinear_upsample_x2(f)
    x = stage._modules["conv"](x)
    x = stage._modules["bn"](x)
    return relu(x)


class ATRM(Module):
    def __init__(self, in_channels: int, config: AtrmConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.config = config
        self.add("in_proj", Conv2d(in_channels, config.width, 1, rng, dtype))
        c = config.width
        for i, c_out in enumerate(config.channels_per_stage):
            self.add(f"stage{i}", UpsampleStage(c, c_out, rng, dtype))
            if config.use_astb:
                self.add(f"astb{i}", ASTB(c_out, config.kernel_length, dtype))
            c = c_out
        head = self.add("head", Conv2d(c, 1, 1, rng, dtype))
        head.weight.data[...] = he_normal(rng, head.weight.shape, c, dtype) * 0.5

    def __call__(self, f_dec: Tensor) -> Tensor:
        return atrm_forward(f_dec, self)


def atrm_forward(f_dec: Tensor, atrm: ATRM, target: Optional[int] = None) -> Tensor:
    """``[upsample_stage -> astb]`` per stage, then a 1×1 conv to one logit channel."""
    cfg = atrm.config
    if target is not None:
        cfg.check_shapes(f_dec.shape[-1], target)
    x = atrm._modules["in_proj"](f_dec)
    for i in range(cfg.stages):
        x = atrm._modules[f"stage{i}"](x)
        if cfg.use_astb:
            x = atrm._modules[f"astb{i}"](x)
    return atrm._modules["head"](x)
