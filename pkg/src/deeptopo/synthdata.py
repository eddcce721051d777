"""Procedural deep-sea scenes with exact masks and skeletons.

Each scene holds one organism: an axis-aligned elliptical body plus a few
random-walk polyline limbs drawn with integer line stepping and a square
brush, so the mask is exact. The skeleton is the union of the limb
centrelines and the thinned body. Optics depend on the zone: per-channel
exponential attenuation toward a zone ambient colour, a spotlight in the
abyssal zone, and seeded Gaussian sensor noise.

On disk a dataset is a directory with ``images/<id>.ppm`` (P6),
``masks/<id>.pgm`` and ``skeletons/<id>.pgm`` (P5, values 0/255), and a
tab-separated ``manifest.tsv`` with one ``id zone seed limb_count`` record
per sample.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .metrics import skeletonize
from .rng import derive_seed, make_rng

ZONES = ("epipelagic", "mesopelagic", "abyssal")
MIN_SIZE = 32
MANIFEST = "manifest.tsv"

# 8-neighbourhood directions, counter-clockwise from "right"
_DIRS = ((0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1))


class DatasetError(Exception):
    """Base class for dataset read/write failures."""


class HeaderError(DatasetError):
    pass


class TruncatedError(DatasetError):
    pass


class ManifestError(DatasetError):
    pass


@dataclass(frozen=True)
class Spotlight:
    center: tuple[float, float]  # fraction of (height, width)
    radius: float  # fraction of the image side
    intensity: float
    floor: float = 0.15


@dataclass(frozen=True)
class ZoneOptics:
    attenuation: tuple[float, float, float]  # per unit depth, R >= G >= B
    ambient: tuple[float, float, float]
    noise_sigma: float
    depth_range: tuple[float, float]
    spotlight: Optional[Spotlight] = None

    def __post_init__(self):
        c = self.attenuation
        if min(c) < 0:
            raise ValueError("attenuation coefficients must be >= 0")
        if not c[0] >= c[1] >= c[2]:
            raise ValueError("attenuation must satisfy red >= green >= blue")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


ZONE_OPTICS = {
    "epipelagic": ZoneOptics((0.45, 0.15, 0.08), (0.20, 0.45, 0.55), 0.02, (0.3, 0.8)),
    "mesopelagic": ZoneOptics((0.90, 0.45, 0.25), (0.02, 0.10, 0.22), 0.03, (1.6, 2.4)),
    "abyssal": ZoneOptics((1.20, 0.70, 0.40), (0.01, 0.02, 0.04), 0.03, (2.0, 2.8),
                          Spotlight((0.5, 0.5), 0.45, 2.2)),
}


@dataclass
class SegSample:
    id: str
    image: np.ndarray  # 3×H×W float in [0, 1]
    mask: np.ndarray  # H×W bool
    skeleton: np.ndarray  # H×W bool
    zone: str
    seed: int
    limb_count: int
    limb_width_px: Optional[int] = None


# -- rasterisation -----------------------------------------------------------


def bresenham(r0: int, c0: int, r1: int, c1: int) -> list[tuple[int, int]]:
    """Integer line from ``(r0, c0)`` to ``(r1, c1)`` inclusive; 8-connected."""
    pts = []
    dr, dc = abs(r1 - r0), abs(c1 - c0)
    sr = 1 if r1 >= r0 else -1
    sc = 1 if c1 >= c0 else -1
    err = dc - dr
    r, c = r0, c0
    while True:
        pts.append((r, c))
        if r == r1 and c == c1:
            return pts
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c += sc
        if e2 < dc:
            err += dc
            r += sr


def ellipse_mask(size: int, cy: int, cx: int, ay: int, ax: int) -> np.ndarray:
    """Integer test ``(y-cy)²·ax² + (x-cx)²·ay² <= ay²·ax²``."""
    y, x = np.ogrid[:size, :size]
    return (y - cy) ** 2 * ax * ax + (x - cx) ** 2 * ay * ay <= ay * ay * ax * ax


def stamp(mask: np.ndarray, pts: Iterable[tuple[int, int]], width: int) -> None:
    """Square brush: ``width`` 1 is the point itself; 2 adds down/right; 3 is the 3×3 block."""
    lo = -1 if width == 3 else 0
    hi = 1 if width >= 2 else 0
    h, w = mask.shape
    for r, c in pts:
        mask[max(r + lo, 0):min(r + hi + 1, h), max(c + lo, 0):min(c + hi + 1, w)] = True


def _random_walk_limb(rng: np.random.Generator, body: np.ndarray, cy: int, cx: int,
                      size: int) -> list[tuple[int, int]]:
    """Polyline leaving the body along a random lattice direction, turning at most 45° per vertex."""
    d = int(rng.integers(8))
    r, c = cy, cx
    while body[r, c]:
        r, c = r + _DIRS[d][0], c + _DIRS[d][1]
    pts = [(r, c)]
    lo, hi = 2, size - 3
    for _ in range(int(rng.integers(3, 7))):
        d = (d + int(rng.integers(-1, 2))) % 8
        step = int(rng.integers(3, 8))
        r1 = min(max(r + _DIRS[d][0] * step + int(rng.integers(-1, 2)), lo), hi)
        c1 = min(max(c + _DIRS[d][1] * step + int(rng.integers(-1, 2)), lo), hi)
        if (r1, c1) == (r, c):
            break
        pts.extend(bresenham(r, c, r1, c1)[1:])
        r, c = r1, c1
    return pts


# -- optics ------------------------------------------------------------------


def spotlight_gain(size: int, spot: Spotlight) -> np.ndarray:
    y, x = np.mgrid[:size, :size].astype(np.float64)
    cy, cx = spot.center[0] * (size - 1), spot.center[1] * (size - 1)
    rad = spot.radius * size
    return spot.floor + spot.intensity * np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * rad * rad))


def attenuate(image: np.ndarray, optics: ZoneOptics, depth: float,
              rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """``x·t + ambient·(1 - t)`` with ``t_k = exp(-c_k·depth)``, plus seeded noise, clamped to [0, 1].

    The spotlight, when present, scales the scene before attenuation.
    """
    if depth < 0:
        raise ValueError(f"depth must be >= 0, got {depth}")
    img = np.asarray(image, dtype=np.float64)
    if optics.spotlight is not None:
        img = img * spotlight_gain(img.shape[-1], optics.spotlight)[None]
    t = np.exp(-np.asarray(optics.attenuation) * depth)[:, None, None]
    amb = np.asarray(optics.ambient)[:, None, None]
    out = img * t + amb * (1 - t)
    if optics.noise_sigma > 0 and rng is not None:
        out = out + rng.normal(0.0, optics.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def _smooth_field(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Bilinear upsampling of a ``cells×cells`` uniform grid to ``size×size``."""
    coarse = rng.random((cells, cells))
    pos = np.linspace(0, cells - 1, size)
    rows = np.stack([np.interp(pos, np.arange(cells), coarse[:, j]) for j in range(cells)], axis=1)
    return np.stack([np.interp(pos, np.arange(cells), rows[i]) for i in range(size)])


# -- scenes ------------------------------------------------------------------


def generate_scene(zone: str, size: int = 96, seed: int = 0, sample_id: str = "00000") -> SegSample:
    """One organism on a textured background, rendered under ``zone`` optics.

    Geometry and texture depend only on ``seed``, so matched seeds give the
    same organism in every zone.
    """
    if zone not in ZONES:
        raise ValueError(f"zone must be one of {ZONES}, got {zone!r}")
    if size < MIN_SIZE:
        raise ValueError(f"size {size} is below the minimum of {MIN_SIZE} needed to place an organism")
    rng = make_rng(derive_seed(seed, 0))
    # geometry
    ay = int(rng.integers(size // 16, size // 8 + 1))
    ax = int(rng.integers(size // 16, size // 8 + 1))
    margin = size // 4
    cy = int(rng.integers(margin, size - margin))
    cx = int(rng.integers(margin, size - margin))
    body = ellipse_mask(size, cy, cx, max(ay, 2), max(ax, 2))
    width = int(rng.integers(1, 4))
    limb_count = int(rng.integers(2, 6))
    limbs = np.zeros_like(body)
    centre = np.zeros_like(body)
    for _ in range(limb_count):
        pts = _random_walk_limb(rng, body, cy, cx, size)
        stamp(limbs, pts, width)
        stamp(centre, pts, 1)
    mask = body | limbs
    skeleton = (centre | skeletonize(body)) & mask

    # texture: camouflage colours close to the background
    bg_base = rng.uniform(0.35, 0.75, size=3)
    bg = bg_base[:, None, None] * (0.75 + 0.5 * _smooth_field(rng, size, 6))[None]
    bg = bg + 0.06 * (rng.random((3, size, size)) - 0.5)
    tint = rng.uniform(0.12, 0.25) * rng.choice([-1.0, 1.0], size=3)
    org = (bg_base + tint)[:, None, None] * (0.85 + 0.3 * _smooth_field(rng, size, 10))[None]
    scene = np.clip(np.where(mask[None], org, bg), 0.0, 1.0)

    # zone optics use an independent stream
    optics = ZONE_OPTICS[zone]
    orng = make_rng(derive_seed(seed, 1 + ZONES.index(zone)))
    depth = float(orng.uniform(*optics.depth_range))
    image = attenuate(scene, optics, depth, orng)
    return SegSample(sample_id, image, mask, skeleton, zone, int(seed), limb_count, width)


def generate_dataset(count: int, size: int = 96, seed: int = 0,
                     zones: Sequence[str] = ZONES) -> list[SegSample]:
    """Sample ``i`` uses seed ``derive_seed(seed, i)`` and zone ``zones[i % len(zones)]``."""
    if count < 0:
        raise ValueError("count must be >= 0")
    zones = list(zones)
    if not zones:
        raise ValueError("at least one zone is required")
    for z in zones:
        if z not in ZONES:
            raise ValueError(f"unknown zone {z!r}; expected a subset of {ZONES}")
    return [generate_scene(zones[i % len(zones)], size, derive_seed(seed, i), f"{i:05d}")
            for i in range(count)]


# -- PNM I/O -----------------------------------------------------------------


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(image, 0.0, 1.0) * 255 + 0.5).astype(np.uint8)


def encode_pnm(arr: np.ndarray) -> bytes:
    """``H×W`` -> P5, ``3×H×W`` -> P6, both maxval 255."""
    if arr.dtype != np.uint8:
        raise ValueError("PNM payload must be uint8")
    if arr.ndim == 2:
        h, w = arr.shape
        return b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes()
    if arr.ndim == 3 and arr.shape[0] == 3:
        _, h, w = arr.shape
        return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(arr.transpose(1, 2, 0)).tobytes()
    raise ValueError(f"cannot encode array of shape {arr.shape} as PNM")


def _tokens(data: bytes, count: int, name: str) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens (skipping comments); return them and the payload offset."""
    toks, i, n = [], 0, len(data)
    while len(toks) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
            j += 1
        if j == i:
            raise HeaderError(f"{name}: malformed header (expected {count} fields, found {len(toks)})")
        toks.append(data[i:j])
        i = j
    if i >= n or not data[i:i + 1].isspace():
        raise HeaderError(f"{name}: malformed header (no whitespace after maxval)")
    return toks, i + 1


def decode_pnm(data: bytes, name: str = "<bytes>", expect: Optional[str] = None) -> np.ndarray:
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise HeaderError(f"{name}: bad magic number {magic!r} (expected P5 or P6)")
    if expect is not None and magic.decode() != expect:
        raise HeaderError(f"{name}: expected {expect} but found {magic.decode()}")
    toks, off = _tokens(data[2:], 3, name)
    try:
        w, h, maxval = (int(t) for t in toks)
    except ValueError:
        raise HeaderError(f"{name}: non-integer header field in {toks!r}") from None
    if w <= 0 or h <= 0:
        raise HeaderError(f"{name}: invalid dimensions {w}×{h}")
    if maxval != 255:
        raise HeaderError(f"{name}: maxval {maxval} unsupported (expected 255)")
    ch = 3 if magic == b"P6" else 1
    payload = data[2 + off:]
    need = w * h * ch
    if len(payload) < need:
        raise TruncatedError(f"{name}: truncated payload ({len(payload)} of {need} bytes)")
    if len(payload) > need:
        raise HeaderError(f"{name}: {len(payload) - need} unexpected trailing bytes")
    arr = np.frombuffer(payload, dtype=np.uint8)
    if ch == 3:
        return arr.reshape(h, w, 3).transpose(2, 0, 1).copy()
    return arr.reshape(h, w).copy()


def write_pnm(path: Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_pnm(arr))


def read_pnm(path: Path, expect: Optional[str] = None) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise ManifestError(f"{path}: listed in manifest but missing") from None
    return decode_pnm(data, str(path), expect)


def _read_binary(path: Path) -> np.ndarray:
    arr = read_pnm(path, "P5")
    if not np.isin(arr, (0, 255)).all():
        raise HeaderError(f"{path}: mask values must be 0 or 255")
    return arr == 255


def write_dataset(samples: Sequence[SegSample], directory) -> Path:
    """Write images, masks, skeletons and the manifest; returns the manifest path."""
    root = Path(directory)
    for sub in ("images", "masks", "skeletons"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    lines = []
    for s in sorted(samples, key=lambda s: s.id):
        write_pnm(root / "images" / f"{s.id}.ppm", to_uint8(s.image))
        write_pnm(root / "masks" / f"{s.id}.pgm", s.mask.astype(np.uint8) * 255)
        write_pnm(root / "skeletons" / f"{s.id}.pgm", s.skeleton.astype(np.uint8) * 255)
        lines.append(f"{s.id}\t{s.zone}\t{s.seed}\t{s.limb_count}\n")
    manifest = root / MANIFEST
    tmp = manifest.with_suffix(".tmp")
    tmp.write_text("".join(lines), encoding="utf-8")
    os.replace(tmp, manifest)
    return manifest


def read_manifest(directory) -> list[tuple[str, str, int, int]]:
    path = Path(directory) / MANIFEST
    if not path.is_file():
        raise ManifestError(f"{path}: manifest not found")
    records = []
    for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ManifestError(f"{path}:{ln}: expected 4 tab-separated fields, got {len(parts)}")
        sid, zone, seed, limbs = parts
        try:
            records.append((sid, zone, int(seed), int(limbs)))
        except ValueError:
            raise ManifestError(f"{path}:{ln}: seed and limb_count must be integers") from None
    return records


def read_dataset(directory) -> list[SegSample]:
    """Inverse of :func:`write_dataset`; images come back quantised to 8 bits."""
    root = Path(directory)
    records = read_manifest(root)
    listed = {r[0] for r in records}
    on_disk = {p.stem for p in (root / "images").glob("*.ppm")} if (root / "images").is_dir() else set()
    extra = sorted(on_disk - listed)
    if extra:
        raise ManifestError(f"{root}: image {extra[0]}.ppm is not listed in the manifest")
    samples = []
    for sid, zone, seed, limbs in records:
        img = read_pnm(root / "images" / f"{sid}.ppm", "P6")
        mask = _read_binary(root / "masks" / f"{sid}.pgm")
        skel = _read_binary(root / "skeletons" / f"{sid}.pgm")
        if mask.shape != img.shape[1:] or skel.shape != mask.shape:
            raise ManifestError(f"{root}: sample {sid} has inconsistent image/mask/skeleton sizes")
        samples.append(SegSample(sid, img.astype(np.float64) / 255.0, mask, skel, zone, seed, limbs))
    return samples
