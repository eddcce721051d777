"""Asymmetric masked autoencoder with a segmentation path.

One encoder pass over the visible tokens feeds both heads: a light
transformer decoder reconstructs the masked patches, and the segmentation
path re-inserts a learned token at masked positions, folds the tokens back
to a ``C×√N×√N`` grid, bridges it (WCAP or a plain 3×3 conv) and decodes it
with the ATRM.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .atrm import ATRM, AtrmConfig
from .nn import AttentionBlock, Conv2d, LayerNorm, Linear, Module, trunc_normal
from .rng import make_rng
from .tensor import Tensor, broadcast_to, concat, reshape, take_tokens, transpose
from .wcap import WCAP

ABLATIONS = ("full", "baseline", "wcap_only", "atrm_only")


@dataclass
class ModelConfig:
    image_size: int = 96
    patch_size: int = 8
    enc_dim: int = 64
    enc_depth: int = 2
    enc_heads: int = 4
    dec_dim: int = 48
    dec_depth: int = 1
    dec_heads: int = 4
    mask_ratio: float = 0.05
    wcap_kernel: int = 3
    atrm_stages: int = 3
    atrm_channels: tuple[int, ...] = (64, 32, 16)
    atrm_width: int = 64
    kernel_length: int = 5
    ablation: str = "full"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.atrm_channels = tuple(int(c) for c in self.atrm_channels)
        self.validate()

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if not 0 <= self.mask_ratio < 1:
            raise ValueError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if self.enc_dim % self.enc_heads or self.dec_dim % self.dec_heads:
            raise ValueError("transformer width must be divisible by its head count")
        if self.enc_dim % 4 or self.dec_dim % 4:
            raise ValueError("transformer widths must be multiples of 4 (2-d sinusoidal embedding)")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        AtrmConfig(self.atrm_stages, self.atrm_channels).check_shapes(self.grid_side, self.image_size)

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid_side ** 2

    @property
    def use_wcap(self) -> bool:
        return self.ablation in ("full", "wcap_only")

    @property
    def use_astb(self) -> bool:
        return self.ablation in ("full", "atrm_only")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MaskPlan:
    visible_indices: np.ndarray
    masked_indices: np.ndarray
    seed: int

    @property
    def n_tokens(self) -> int:
        return len(self.visible_indices) + len(self.masked_indices)


def n_masked(n_tokens: int, ratio: float) -> int:
    """``round(ratio · n)`` with halves rounded up."""
    return int(np.floor(ratio * n_tokens + 0.5))


def random_mask(n_tokens: int, ratio: float, seed: int) -> MaskPlan:
    """Uniform draw of ``round(ratio·n)`` masked tokens without replacement."""
    if not 0 <= ratio < 1:
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    perm = make_rng(seed).permutation(n_tokens)
    k = n_masked(n_tokens, ratio)
    return MaskPlan(np.sort(perm[k:]), np.sort(perm[:k]), seed)


def full_plan(n_tokens: int) -> MaskPlan:
    return MaskPlan(np.arange(n_tokens), np.zeros(0, dtype=np.int64), -1)


STANDARDIZE_EPS = 1e-3


def standardize(images) -> np.ndarray:
    """Per-image, per-channel zero mean and unit standard deviation.

    Takes ``3×H×W`` or ``B×3×H×W``; the floor on the deviation keeps flat
    images finite.
    """
    x = images.data if isinstance(images, Tensor) else np.asarray(images)
    mu = x.mean(axis=(-2, -1), keepdims=True)
    sd = x.std(axis=(-2, -1), keepdims=True)
    return ((x - mu) / (sd + STANDARDIZE_EPS)).astype(x.dtype)


def patchify(image: Tensor, patch: int) -> Tensor:
    """``3×H×W -> N×(3·p²)`` with patches in row-major order (batched form accepted)."""
    single = image.ndim == 3
    x = reshape(image, (1,) + image.shape) if single else image
    b, c, h, w = x.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}×{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = reshape(x, (b, c, gh, patch, gw, patch))
    x = transpose(x, (0, 2, 4, 1, 3, 5))
    x = reshape(x, (b, gh * gw, c * patch * patch))
    return reshape(x, x.shape[1:]) if single else x


def unpatchify(tokens: Tensor, patch: int, channels: int = 3, grid: Optional[tuple[int, int]] = None) -> Tensor:
    single = tokens.ndim == 2
    x = reshape(tokens, (1,) + tokens.shape) if single else tokens
    b, n, d = x.shape
    if d != channels * patch * patch:
        raise ValueError(f"token length {d} != {channels}·{patch}²")
    if grid is None:
        side = int(round(np.sqrt(n)))
        if side * side != n:
            raise ValueError(f"{n} tokens do not form a square grid")
        grid = (side, side)
    gh, gw = grid
    x = reshape(x, (b, gh, gw, channels, patch, patch))
    x = transpose(x, (0, 3, 1, 4, 2, 5))
    x = reshape(x, (b, channels, gh * patch, gw * patch))
    return reshape(x, x.shape[1:]) if single else x


def sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = pos.reshape(-1)[:, None] * omega[None]
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_2d(dim: int, side: int) -> np.ndarray:
    """Fixed 2-d sinusoidal position table, ``side²×dim``; half the width encodes rows."""
    rows, cols = np.meshgrid(np.arange(side, dtype=np.float64), np.arange(side, dtype=np.float64), indexing="ij")
    return np.concatenate([sincos_1d(dim // 2, rows), sincos_1d(dim // 2, cols)], axis=1)


def _indices(plans: Sequence[MaskPlan], attr: str) -> np.ndarray:
    return np.stack([getattr(p, attr) for p in plans]).astype(np.int64)


def _restore(tokens_kept: Tensor, fill: Tensor, plans: Sequence[MaskPlan]) -> Tensor:
    """Scatter kept tokens back to their positions with ``fill`` at masked slots."""
    b, k, d = tokens_kept.shape
    n = plans[0].n_tokens
    if k == n:
        return tokens_kept
    filler = broadcast_to(reshape(fill, (1, 1, d)), (b, n - k, d))
    both = concat([tokens_kept, filler], axis=1)
    order = np.concatenate([_indices(plans, "visible_indices"), _indices(plans, "masked_indices")], axis=1)
    restore = np.argsort(order, axis=1, kind="stable")
    return take_tokens(both, restore)


class DeepTopoNet(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        rng = make_rng(cfg.seed)
        dt = cfg.np_dtype
        p2 = 3 * cfg.patch_size ** 2
        side = cfg.grid_side
        self.enc_pos = sincos_2d(cfg.enc_dim, side).astype(dt)
        self.dec_pos = sincos_2d(cfg.dec_dim, side).astype(dt)

        self.add("patch_embed", Linear(p2, cfg.enc_dim, rng, dt))
        for i in range(cfg.enc_depth):
            self.add(f"enc{i}", AttentionBlock(cfg.enc_dim, cfg.enc_heads, rng, dt))
        self.add("enc_norm", LayerNorm(cfg.enc_dim, dt))

        self.add("dec_embed", Linear(cfg.enc_dim, cfg.dec_dim, rng, dt))
        self.dec_mask_token = self.param("dec_mask_token", trunc_normal(rng, (cfg.dec_dim,), 0.02, dt))
        for i in range(cfg.dec_depth):
            self.add(f"dec{i}", AttentionBlock(cfg.dec_dim, cfg.dec_heads, rng, dt))
        self.add("dec_norm", LayerNorm(cfg.dec_dim, dt))
        self.add("dec_pred", Linear(cfg.dec_dim, p2, rng, dt))

        self.seg_mask_token = self.param("seg_mask_token", trunc_normal(rng, (cfg.enc_dim,), 0.02, dt))
        if cfg.use_wcap:
            self.add("wcap", WCAP(cfg.enc_dim, cfg.enc_dim, rng, dt, k=cfg.wcap_kernel))
        else:
            self.add("bridge_conv", Conv2d(cfg.enc_dim, cfg.enc_dim, 3, rng, dt))
        self.add("bridge_proj", Conv2d(cfg.enc_dim, cfg.dec_dim, 1, rng, dt))
        atrm_cfg = AtrmConfig(cfg.atrm_stages, cfg.atrm_channels, cfg.kernel_length,
                              cfg.atrm_width, use_astb=cfg.use_astb)
        self.add("atrm", ATRM(cfg.dec_dim, atrm_cfg, rng, dt))

    # -- pieces ---------------------------------------------------------------
    def encode(self, tokens: Tensor, plans: Sequence[MaskPlan]) -> Tensor:
        """Patch embedding + fixed positions, then the encoder stack over visible tokens."""
        x = self._modules["patch_embed"](tokens) + self.enc_pos
        vis = _indices(plans, "visible_indices")
        if vis.shape[1] != x.shape[1]:
            x = take_tokens(x, vis)
        for i in range(self.cfg.enc_depth):
            x = self._modules[f"enc{i}"](x)
        return self._modules["enc_norm"](x)

    def decode_recon(self, latents: Tensor, plans: Sequence[MaskPlan]) -> Tensor:
        """Fill masked slots with the mask token, decode, and unpatchify to ``B×3×H×W``."""
        y = self._modules["dec_embed"](latents)
        y = _restore(y, self.dec_mask_token, plans) + self.dec_pos
        for i in range(self.cfg.dec_depth):
            y = self._modules[f"dec{i}"](y)
        y = self._modules["dec_pred"](self._modules["dec_norm"](y))
        return unpatchify(y, self.cfg.patch_size)

    def bridge(self, latents: Tensor, plans: Sequence[MaskPlan], return_parts: bool = False):
        full = _restore(latents, self.seg_mask_token, plans)
        b, n, d = full.shape
        side = self.cfg.grid_side
        grid = reshape(transpose(full, (0, 2, 1)), (b, d, side, side))
        parts = {}
        if self.cfg.use_wcap:
            wcap = self._modules["wcap"]
            g = wcap.descriptor(latents)
            out = wcap(grid, g, return_parts=return_parts)
            if return_parts:
                out, parts = out
                parts["g"] = g
        else:
            out = self._modules["bridge_conv"](grid)
        out = self._modules["bridge_proj"](out)
        return (out, parts) if return_parts else out

    def segment(self, latents: Tensor, plans: Sequence[MaskPlan]) -> Tensor:
        return self._modules["atrm"](self.bridge(latents, plans))

    # -- entry points ---------------------------------------------------------
    def prepare(self, images) -> Tensor:
        """Model input space: the standardised image (also the reconstruction target)."""
        return Tensor(standardize(images).astype(self.cfg.np_dtype, copy=False))

    def forward_train(self, images: Tensor, plans: Sequence[MaskPlan]) -> tuple[Tensor, Tensor]:
        """One shared encoder pass; returns ``(logits B×1×H×W, reconstruction B×3×H×W)``.

        The reconstruction is in input space, i.e. of ``prepare(images)``.
        """
        self.train(True)
        tokens = patchify(self.prepare(images), self.cfg.patch_size)
        latents = self.encode(tokens, plans)
        return self.segment(latents, plans), self.decode_recon(latents, plans)

    def seg_forward(self, images: Tensor, mode: str = "eval", plans: Optional[Sequence[MaskPlan]] = None) -> Tensor:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        single = images.ndim == 3
        x = self.prepare(images)
        if single:
            x = reshape(x, (1,) + x.shape)
        self.train(mode == "train")
        if mode == "eval" or plans is None:
            plans = [full_plan(self.cfg.n_tokens)] * x.shape[0]
        logits = self.segment(self.encode(patchify(x, self.cfg.patch_size), plans), plans)
        return reshape(logits, logits.shape[1:]) if single else logits


def parameter_groups(model: DeepTopoNet) -> dict[str, int]:
    """Parameter counts of the swappable components."""
    counts = {"wcap": 0, "astb": 0, "other": 0}
    for name, p in model.named_parameters():
        if name.startswith("wcap."):
            counts["wcap"] += p.size
        elif ".astb" in name:
            counts["astb"] += p.size
        else:
            counts["other"] += p.size
    return counts
