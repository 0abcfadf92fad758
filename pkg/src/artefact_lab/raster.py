"""Greyscale raster images, file I/O and the enhancement pipeline.

Every image in the toolkit is a single-channel float64 array with
intensities in [0, 1].  8-bit and 16-bit data are converted at the file
boundary only.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

LUMA = (0.299, 0.587, 0.114)


class ImageFormatError(ValueError):
    """Raised when a file is not a supported raster format."""


@dataclass
class RasterImage:
    data: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError(f"expected a 2-D intensity grid, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("image contains non-finite intensities")
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ValueError("intensities must lie in [0, 1]")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @classmethod
    def from_array(cls, arr, **meta) -> "RasterImage":
        """Wrap an array, clipping into [0, 1]."""
        arr = np.asarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite intensities")
        return cls(np.clip(arr, 0.0, 1.0), dict(meta))


@dataclass(frozen=True)
class PreprocessConfig:
    target_size: int = 300
    tv_weight: float = 8.0
    tv_iterations: int = 100
    clahe_tiles: int = 8
    clahe_clip: float = 0.01

    def __post_init__(self):
        if self.target_size <= 0:
            raise ValueError("target_size must be positive")
        if self.tv_weight < 0:
            raise ValueError("tv_weight must be non-negative")
        if self.tv_iterations < 1:
            raise ValueError("tv_iterations must be >= 1")
        if self.clahe_tiles < 1:
            raise ValueError("clahe_tiles must be >= 1")
        if not 0.0 < self.clahe_clip <= 1.0:
            raise ValueError("clahe_clip must lie in (0, 1]")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def _read_pnm_tokens(buf: bytes, count: int, pos: int):
    tokens = []
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise OSError("truncated PGM header")
        tokens.append(buf[start:pos])
    return tokens, pos


def _load_pgm(raw: bytes) -> np.ndarray:
    magic = raw[:2]
    try:
        (w, h, maxval), pos = _read_pnm_tokens(raw, 3, 2)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ImageFormatError("malformed PGM header") from exc
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise ImageFormatError("invalid PGM dimensions or maxval")
    if magic == b"P5":
        pos += 1  # single whitespace byte before the raster
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = w * h * dtype.itemsize
        payload = raw[pos:pos + need]
        if len(payload) < need:
            raise OSError("truncated PGM raster")
        arr = np.frombuffer(payload, dtype=dtype).reshape(h, w)
    else:
        toks = raw[pos:].split()
        if len(toks) < w * h:
            raise OSError("truncated PGM raster")
        arr = np.array([int(t) for t in toks[:w * h]]).reshape(h, w)
    return arr.astype(np.float64) / maxval


def load_image(path) -> RasterImage:
    """Read a PNG or PGM file as a greyscale image.

    Colour data is reduced with the 0.299/0.587/0.114 luminance weights.
    """
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] in (b"P5", b"P2"):
        data = _load_pgm(raw)
    elif raw[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            with Image.open(path) as im:
                im.load()
                mode = im.mode
                if mode in ("I;16", "I;16B", "I"):
                    arr = np.asarray(im, dtype=np.float64)
                    data = arr / (65535.0 if arr.max(initial=0) > 255 or mode != "I" else 255.0)
                elif mode in ("L", "LA"):
                    data = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
                else:
                    rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
                    data = rgb @ np.array(LUMA)
        except UnidentifiedImageError as exc:
            raise ImageFormatError(str(exc)) from exc
        except (SyntaxError, ValueError) as exc:
            raise OSError(f"unreadable PNG {path}: {exc}") from exc
    else:
        raise ImageFormatError(f"{path}: unsupported raster format (PNG or PGM expected)")
    return RasterImage(np.clip(data, 0.0, 1.0), {"source": str(path)})


def save_pgm(img: RasterImage, path) -> None:
    """Write a binary 16-bit PGM (maxval 65535)."""
    q = np.round(img.data * 65535.0).astype(">u2")
    header = f"P5\n{img.width} {img.height}\n65535\n".encode()
    Path(path).write_bytes(header + q.tobytes())


def save_png(img: RasterImage, path) -> None:
    q = np.round(img.data * 255.0).astype(np.uint8)
    Image.fromarray(q, mode="L").save(path, optimize=False)


def write_sidecar(img: RasterImage, cfg: PreprocessConfig, path) -> None:
    meta = {
        "original_size": img.meta.get("original_size"),
        "config_hash": cfg.digest(),
        "config": asdict(cfg),
    }
    Path(path).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------------------
# Total-variation restoration
# ---------------------------------------------------------------------------

def _grad(u):
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[:, :-1] = u[:, 1:] - u[:, :-1]
    gy[:-1, :] = u[1:, :] - u[:-1, :]
    return gx, gy


def _div(px, py):
    # negative adjoint of _grad
    d = np.zeros_like(px)
    d[:, :-1] += px[:, :-1]
    d[:, 1:] -= px[:, :-1]
    d[:-1, :] += py[:-1, :]
    d[1:, :] -= py[:-1, :]
    return d


def total_variation(u) -> float:
    """Isotropic discrete TV with forward differences."""
    u = u.data if isinstance(u, RasterImage) else np.asarray(u, dtype=np.float64)
    gx, gy = _grad(u)
    return float(np.sqrt(gx * gx + gy * gy).sum())


def tv_denoise(img: RasterImage, weight: float, iterations: int = 100,
               step: float = 0.248) -> RasterImage:
    """Approximate the ROF minimiser of TV(u) + weight/2 * ||u - f||^2.

    Chambolle's dual projection iteration; larger ``weight`` keeps the
    result closer to the input.  ``weight == 0`` returns the mean image,
    the exact minimiser in that limit.
    """
    if weight < 0:
        raise ValueError("weight must be non-negative")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    f = np.asarray(img.data, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise ValueError("non-finite intensity")
    if weight == 0:
        return RasterImage(np.full_like(f, f.mean()), dict(img.meta))
    theta = 1.0 / weight
    px = np.zeros_like(f)
    py = np.zeros_like(f)
    for _ in range(iterations):
        gx, gy = _grad(_div(px, py) - f / theta)
        norm = 1.0 + step * np.sqrt(gx * gx + gy * gy)
        px = (px + step * gx) / norm
        py = (py + step * gy) / norm
    u = f - theta * _div(px, py)
    return RasterImage(np.clip(u, 0.0, 1.0), dict(img.meta))


# ---------------------------------------------------------------------------
# CLAHE
# ---------------------------------------------------------------------------

def _tile_edges(n, tiles):
    return np.linspace(0, n, tiles + 1).round().astype(int)


def clahe(img: RasterImage, tiles: int = 8, clip: float = 0.01, bins: int = 256) -> RasterImage:
    """Contrast-limited adaptive histogram equalisation.

    ``clip`` is the per-bin ceiling as a fraction of the tile's pixel
    count; clipped mass is spread evenly over all bins.  Each tile maps a
    value to the inclusive CDF of its bin, and mappings of the four
    nearest tile centres are blended bilinearly.  A tile whose histogram
    has a single occupied bin maps every value to itself.
    """
    if tiles < 1:
        raise ValueError("tiles must be >= 1")
    if not 0.0 < clip <= 1.0:
        raise ValueError("clip must lie in (0, 1]")
    f = img.data
    h, w = f.shape
    if h < tiles or w < tiles:
        raise ValueError(f"{tiles} tiles per axis exceed image size {w}x{h}")
    q = np.clip(np.round(f * (bins - 1)), 0, bins - 1).astype(np.intp)
    ys, xs = _tile_edges(h, tiles), _tile_edges(w, tiles)

    maps = np.empty((tiles, tiles, bins))
    identity = np.zeros((tiles, tiles), dtype=bool)
    for ty in range(tiles):
        for tx in range(tiles):
            block = q[ys[ty]:ys[ty + 1], xs[tx]:xs[tx + 1]]
            hist = np.bincount(block.ravel(), minlength=bins).astype(np.float64)
            if np.count_nonzero(hist) <= 1:
                identity[ty, tx] = True
                continue
            total = hist.sum()
            limit = clip * total
            excess = np.maximum(hist - limit, 0.0).sum()
            hist = np.minimum(hist, limit) + excess / bins
            maps[ty, tx] = np.cumsum(hist) / total

    # per-tile mapped values for every pixel, then bilinear blend by tile centre
    cy = (ys[:-1] + ys[1:] - 1) / 2.0
    cx = (xs[:-1] + xs[1:] - 1) / 2.0

    def _coords(centres, n):
        pos = np.arange(n, dtype=np.float64)
        i1 = np.clip(np.searchsorted(centres, pos, side="right"), 1, max(len(centres) - 1, 1))
        i0 = i1 - 1
        if len(centres) == 1:
            return np.zeros(n, int), np.zeros(n, int), np.zeros(n)
        t = np.clip((pos - centres[i0]) / (centres[i1] - centres[i0]), 0.0, 1.0)
        return i0, i1, t

    y0, y1, wy = _coords(cy, h)
    x0, x1, wx = _coords(cx, w)

    def _lookup(ty, tx):
        out = maps[ty, tx, q]
        ident = identity[ty, tx]
        return np.where(ident, f, out)

    Y0, X0 = np.meshgrid(y0, x0, indexing="ij")
    Y1, X1 = np.meshgrid(y1, x1, indexing="ij")
    WY, WX = np.meshgrid(wy, wx, indexing="ij")
    out = ((1 - WY) * ((1 - WX) * _lookup(Y0, X0) + WX * _lookup(Y0, X1))
           + WY * ((1 - WX) * _lookup(Y1, X0) + WX * _lookup(Y1, X1)))
    return RasterImage(np.clip(out, 0.0, 1.0), dict(img.meta))


# ---------------------------------------------------------------------------
# Resize and the full enhancement chain
# ---------------------------------------------------------------------------

def resize(img: RasterImage, height: int, width: int | None = None) -> RasterImage:
    """Bilinear resample with pixel-centre alignment."""
    width = height if width is None else width
    h, w = img.data.shape
    if (h, w) == (height, width):
        return RasterImage(img.data.copy(), dict(img.meta))
    yy = (np.arange(height) + 0.5) * (h / height) - 0.5
    xx = (np.arange(width) + 0.5) * (w / width) - 0.5
    grid = np.meshgrid(yy, xx, indexing="ij")
    out = ndimage.map_coordinates(img.data, grid, order=1, mode="nearest")
    return RasterImage(np.clip(out, 0.0, 1.0), dict(img.meta))


def preprocess(img: RasterImage, cfg: PreprocessConfig = PreprocessConfig()) -> RasterImage:
    """Resize to a square, TV-restore, CLAHE, TV-restore again.

    Non-square inputs are stretched; the original size is kept in
    ``meta["original_size"]`` as (width, height).
    """
    meta = dict(img.meta)
    meta.setdefault("original_size", [img.width, img.height])
    out = resize(img, cfg.target_size)
    out = tv_denoise(out, cfg.tv_weight, cfg.tv_iterations)
    out = clahe(out, cfg.clahe_tiles, cfg.clahe_clip)
    out = tv_denoise(out, cfg.tv_weight, cfg.tv_iterations)
    out.meta = meta
    return out
