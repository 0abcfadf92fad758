"""Keypoints, gradient-histogram descriptors, coin circles and MSER features."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from scipy import ndimage

from .edges import canny
from .errors import ArtifactVersionError
from .raster import RasterImage

DESCRIPTOR_WIDTH = 64
MIN_SUPPORT = 16
DESCRIPTOR_MAGIC = b"ADSC1"
HARRIS_SCALES = (1.2, 2.0, 3.2, 5.0)


class DescriptorFormatError(ValueError):
    pass


class DescriptorVersionError(DescriptorFormatError, ArtifactVersionError):
    pass


class DetectionError(RuntimeError):
    pass


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    scale: float
    strength: float


@dataclass
class KeypointDescriptorSet:
    image_id: str
    keypoints: list
    descriptors: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.descriptors, dtype=np.float64)
        if d.size == 0:
            d = d.reshape(0, DESCRIPTOR_WIDTH if d.ndim < 2 else d.shape[1])
        self.descriptors = d
        if d.shape[0] != len(self.keypoints):
            raise ValueError("descriptor rows must match keypoint count")

    def __len__(self):
        return len(self.keypoints)

    @property
    def coords(self) -> np.ndarray:
        return np.array([(k.x, k.y) for k in self.keypoints], dtype=np.float64).reshape(-1, 2)

    @property
    def strengths(self) -> np.ndarray:
        return np.array([k.strength for k in self.keypoints], dtype=np.float64)


@dataclass(frozen=True)
class CoinCircle:
    cx: float
    cy: float
    radius: float

    def contains(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        return np.hypot(xy[:, 0] - self.cx, xy[:, 1] - self.cy) <= self.radius


@dataclass
class MserRegion:
    center: tuple
    stability: float
    area: int
    level: int
    polarity: str
    seed: tuple  # (row, col) of one member pixel
    pixels: np.ndarray | None = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# Descriptors
# ---------------------------------------------------------------------------

class _GradientPyramid:
    """Gradients of the image blurred at octave-spaced sigmas."""

    sigmas = (0.0, 1.0, 2.0, 4.0, 8.0, 16.0)

    def __init__(self, u: np.ndarray):
        self.levels = []
        for s in self.sigmas:
            b = ndimage.gaussian_filter(u, s, mode="nearest") if s > 0 else u
            gy, gx = np.gradient(b)
            self.levels.append((gx, gy))

    def pick(self, spacing: float):
        # blur roughly half the sample spacing to avoid aliasing
        want = 0.5 * spacing
        idx = int(np.argmin([abs(s - want) for s in self.sigmas]))
        return self.levels[idx]


def _describe_one(pyr: _GradientPyramid, x: float, y: float, scale: float) -> np.ndarray:
    radius = 3.0 * scale
    n = 16
    offs = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    oy, ox = np.meshgrid(offs * radius, offs * radius, indexing="ij")
    gx_img, gy_img = pyr.pick(2.0 * radius / n)
    coords = np.array([y + oy.ravel(), x + ox.ravel()])
    gx = ndimage.map_coordinates(gx_img, coords, order=1, mode="nearest")
    gy = ndimage.map_coordinates(gy_img, coords, order=1, mode="nearest")
    mag = np.hypot(gx, gy) * np.exp(-(ox.ravel() ** 2 + oy.ravel() ** 2) / (2 * radius ** 2))
    ang = np.mod(np.arctan2(gy, gx), 2 * np.pi) / (np.pi / 2)  # 4 bins
    b0 = np.floor(ang).astype(int) % 4
    frac = ang - np.floor(ang)
    b1 = (b0 + 1) % 4
    cell = (np.arange(n * n) // n // 4) * 4 + (np.arange(n * n) % n) // 4
    hist = np.zeros(DESCRIPTOR_WIDTH)
    np.add.at(hist, cell * 4 + b0, mag * (1 - frac))
    np.add.at(hist, cell * 4 + b1, mag * frac)
    norm = np.linalg.norm(hist)
    if norm < 1e-12:
        return None
    hist = np.minimum(hist / norm, 0.2)
    return hist / np.linalg.norm(hist)


def describe(img: RasterImage, keypoints) -> tuple[list, np.ndarray]:
    """64-d descriptors (4x4 cells x 4 orientation bins) for given keypoints.

    Keypoints whose patch has no gradient energy are dropped.
    """
    if min(img.data.shape) < MIN_SUPPORT:
        raise ValueError(f"image smaller than the {MIN_SUPPORT}px descriptor support")
    pyr = _GradientPyramid(img.data)
    kept, rows = [], []
    for kp in keypoints:
        d = _describe_one(pyr, kp.x, kp.y, kp.scale)
        if d is not None:
            kept.append(kp)
            rows.append(d)
    return kept, np.array(rows).reshape(-1, DESCRIPTOR_WIDTH)


def _sort_keypoints(kps):
    return sorted(kps, key=lambda k: (-k.strength, k.y, k.x))


def harris_keypoints(u: np.ndarray, max_keypoints: int = 500, k: float = 0.04,
                     rel_threshold: float = 0.01, nms_radius: int = 3) -> list:
    best = np.zeros_like(u)
    best_scale = np.zeros_like(u)
    for sd in HARRIS_SCALES:
        si = 2.0 * sd
        ix = ndimage.gaussian_filter(u, sd, order=(0, 1), mode="nearest") * sd
        iy = ndimage.gaussian_filter(u, sd, order=(1, 0), mode="nearest") * sd
        sxx = ndimage.gaussian_filter(ix * ix, si, mode="nearest")
        syy = ndimage.gaussian_filter(iy * iy, si, mode="nearest")
        sxy = ndimage.gaussian_filter(ix * iy, si, mode="nearest")
        r = sxx * syy - sxy * sxy - k * (sxx + syy) ** 2
        upd = r > best
        best = np.where(upd, r, best)
        best_scale = np.where(upd, si, best_scale)
    peak = best.max(initial=0.0)
    if peak <= 1e-12:
        return []
    local = ndimage.maximum_filter(best, size=2 * nms_radius + 1, mode="nearest")
    mask = (best >= local) & (best > rel_threshold * peak)
    ys, xs = np.nonzero(mask)
    kps = [Keypoint(float(x), float(y), float(best_scale[y, x]), float(best[y, x]))
           for y, x in zip(ys, xs)]
    return _sort_keypoints(kps)[:max_keypoints]


def detect_and_describe(img: RasterImage, max_keypoints: int = 500,
                        image_id: str = "") -> KeypointDescriptorSet:
    """Multi-scale Harris corners with gradient-histogram descriptors.

    The keypoint list is sorted by strength (descending), ties by (y, x).
    """
    if min(img.data.shape) < MIN_SUPPORT:
        raise ValueError(f"image smaller than the {MIN_SUPPORT}px descriptor support")
    kps = harris_keypoints(img.data, max_keypoints)
    kept, desc = describe(img, kps)
    return KeypointDescriptorSet(image_id, kept, desc)


# ---------------------------------------------------------------------------
# Descriptor file (ADSC1)
# ---------------------------------------------------------------------------

def export_descriptors(ks: KeypointDescriptorSet, path) -> None:
    """Little-endian: magic, u16 id length, utf-8 id, u32 n, u32 width, records."""
    ident = ks.image_id.encode("utf-8")
    n, w = ks.descriptors.shape
    head = DESCRIPTOR_MAGIC + struct.pack("<H", len(ident)) + ident + struct.pack("<II", n, w)
    rec = np.empty((n, 4 + w), dtype="<f8")
    if n:
        rec[:, 0] = [k.x for k in ks.keypoints]
        rec[:, 1] = [k.y for k in ks.keypoints]
        rec[:, 2] = [k.scale for k in ks.keypoints]
        rec[:, 3] = [k.strength for k in ks.keypoints]
        rec[:, 4:] = ks.descriptors
    Path(path).write_bytes(head + rec.tobytes())


def import_descriptors(path) -> KeypointDescriptorSet:
    raw = Path(path).read_bytes()
    if raw[:5] != DESCRIPTOR_MAGIC:
        raise DescriptorVersionError("bad magic; not an ADSC1 descriptor file")
    try:
        (idlen,) = struct.unpack_from("<H", raw, 5)
        ident = raw[7:7 + idlen].decode("utf-8")
        n, w = struct.unpack_from("<II", raw, 7 + idlen)
    except (struct.error, UnicodeDecodeError) as exc:
        raise DescriptorFormatError(f"malformed header: {exc}") from exc
    if w != DESCRIPTOR_WIDTH:
        raise DescriptorFormatError(f"descriptor width {w}, expected {DESCRIPTOR_WIDTH}")
    body = raw[15 + idlen:]
    if len(body) != n * (4 + w) * 8:
        raise DescriptorFormatError("record count does not match header")
    rec = np.frombuffer(body, dtype="<f8").reshape(n, 4 + w).astype(np.float64)
    if not np.all(np.isfinite(rec)):
        raise DescriptorFormatError("non-finite values in descriptor file")
    desc = rec[:, 4:].copy()
    norms = np.linalg.norm(desc, axis=1)
    if np.any(norms == 0):
        raise DescriptorFormatError("zero descriptor row")
    off = np.abs(norms - 1.0) > 1e-12
    desc[off] /= norms[off, None]
    kps = [Keypoint(*map(float, r[:4])) for r in rec]
    return KeypointDescriptorSet(ident, kps, desc)


# ---------------------------------------------------------------------------
# Coin circle (gradient-directed circular Hough transform)
# ---------------------------------------------------------------------------

def detect_coin_circle(img: RasterImage, r_min: float, r_max: float | None = None,
                       sigma: float = 2.0, t_low: float = 0.01, t_high: float = 0.03,
                       min_support: float = 0.3) -> CoinCircle:
    """Highest-vote circle among radii in [r_min, r_max].

    Each Canny edge pixel votes at distance r along both signs of its
    gradient.  Votes are summed over a 3x3x3 neighbourhood; a circle of
    radius r needs at least ``min_support * 2*pi*r`` votes.
    """
    h, w = img.data.shape
    r_max = min(h, w) / 2.0 if r_max is None else r_max
    if not 0 < r_min < r_max <= min(h, w) / 2.0 + 1e-9:
        raise ValueError("need 0 < r_min < r_max <= min(width, height)/2")
    edges, gx, gy = canny(img.data, sigma, t_low, t_high)
    ys, xs = np.nonzero(edges)
    if len(xs) == 0:
        raise DetectionError("no edges found")
    mag = np.hypot(gx[ys, xs], gy[ys, xs])
    ux, uy = gx[ys, xs] / mag, gy[ys, xs] / mag
    radii = np.arange(math.floor(r_min), math.ceil(r_max) + 1, dtype=np.float64)
    radii = radii[(radii >= r_min) & (radii <= r_max)]
    acc = np.zeros((len(radii), h, w), dtype=np.int32)
    for sign in (1.0, -1.0):
        cx = np.rint(xs[None, :] + sign * radii[:, None] * ux[None, :]).astype(int)
        cy = np.rint(ys[None, :] + sign * radii[:, None] * uy[None, :]).astype(int)
        ri = np.broadcast_to(np.arange(len(radii))[:, None], cx.shape)
        ok = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        np.add.at(acc, (ri[ok], cy[ok], cx[ok]), 1)
    votes = ndimage.uniform_filter(acc.astype(np.float64), size=3, mode="constant") * 27.0
    support = votes / (min_support * 2 * np.pi * radii[:, None, None])
    votes = np.where(support >= 1.0, votes, -1.0)
    best = int(np.argmax(votes))
    if votes.flat[best] < 0:
        raise DetectionError("no circle with sufficient edge support")
    ri, cy, cx = np.unravel_index(best, votes.shape)
    # sub-pixel refinement: vote-weighted centroid of the 3x3x3 neighbourhood
    sl = tuple(slice(max(c - 1, 0), c + 2) for c in (ri, cy, cx))
    block = acc[sl].astype(np.float64)
    grids = np.meshgrid(*[np.arange(s.start, s.start + n) for s, n in zip(sl, block.shape)],
                        indexing="ij")
    tot = block.sum()
    r_ref = float(np.interp((grids[0] * block).sum() / tot, np.arange(len(radii)), radii))
    return CoinCircle(float((grids[2] * block).sum() / tot), float((grids[1] * block).sum() / tot),
                      r_ref)


# ---------------------------------------------------------------------------
# MSER via a min-tree built with union-find
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _find(zpar, p):
    root = p
    while zpar[root] != root:
        root = zpar[root]
    while zpar[p] != root:
        nxt = zpar[p]
        zpar[p] = root
        p = nxt
    return root


@numba.njit(cache=True)
def _min_tree(q, order, h, w):
    n = h * w
    parent = np.full(n, -1, np.int64)
    zpar = np.full(n, -1, np.int64)
    for idx in range(n):
        p = order[idx]
        parent[p] = p
        zpar[p] = p
        r0, c0 = p // w, p % w
        for k in range(4):
            if k == 0:
                if r0 == 0:
                    continue
                nb = p - w
            elif k == 1:
                if r0 == h - 1:
                    continue
                nb = p + w
            elif k == 2:
                if c0 == 0:
                    continue
                nb = p - 1
            else:
                if c0 == w - 1:
                    continue
                nb = p + 1
            if zpar[nb] == -1:
                continue
            r = _find(zpar, nb)
            if r != p:
                parent[r] = p
                zpar[r] = p
    # canonicalise: every pixel points at the canonical pixel of its flat zone
    for idx in range(n - 1, -1, -1):
        p = order[idx]
        par = parent[p]
        if q[parent[par]] == q[par]:
            parent[p] = parent[par]
    return parent


@numba.njit(cache=True)
def _node_stats(q, parent, order, h, w):
    n = h * w
    node_of = np.full(n, -1, np.int64)
    nodes = []
    for idx in range(n):
        p = order[idx]
        if parent[p] == p or q[parent[p]] != q[p]:
            node_of[p] = len(nodes)
            nodes.append(p)
    m = len(nodes)
    area = np.zeros(m, np.int64)
    sx = np.zeros(m)
    sy = np.zeros(m)
    for p in range(n):
        c = p if node_of[p] >= 0 else parent[p]
        k = node_of[c]
        area[k] += 1
        sx[k] += p % w
        sy[k] += p // w
    npar = np.full(m, -1, np.int64)
    level = np.zeros(m, np.int64)
    canon = np.zeros(m, np.int64)
    for k in range(m):
        p = nodes[k]
        canon[k] = p
        level[k] = q[p]
        if parent[p] != p:
            npar[k] = node_of[parent[p]]
    # nodes are in ascending level order, children before parents
    for k in range(m):
        if npar[k] >= 0:
            area[npar[k]] += area[k]
            sx[npar[k]] += sx[k]
            sy[npar[k]] += sy[k]
    return npar, level, area, sx, sy, canon


@numba.njit(cache=True)
def _variation(npar, level, area, delta, top):
    m = len(npar)
    # main child: the child with the largest area
    main = np.full(m, -1, np.int64)
    for k in range(m):
        p = npar[k]
        if p >= 0 and (main[p] < 0 or area[k] > area[main[p]]):
            main[p] = k
    var = np.full(m, np.inf)
    for k in range(m):
        hi = level[npar[k]] if npar[k] >= 0 else top + 1
        best = np.inf
        for t in range(level[k], hi):
            a = k
            while npar[a] >= 0 and level[npar[a]] <= t + delta:
                a = npar[a]
            d = k
            while d >= 0 and level[d] > t - delta:
                d = main[d]
            a_down = area[d] if d >= 0 else 0
            v = (area[a] - a_down) / area[k]
            if v < best:
                best = v
        var[k] = best
    return var, main


def _mser_one(q, polarity, delta, max_variation, min_area, max_area):
    h, w = q.shape
    flat = q.ravel().astype(np.int64)
    order = np.argsort(flat, kind="stable").astype(np.int64)
    parent = _min_tree(flat, order, h, w)
    npar, level, area, sx, sy, canon = _node_stats(flat, parent, order, h, w)
    var, main = _variation(npar, level, area, delta, int(flat.max()))
    regions = []
    for k in range(len(npar)):
        if npar[k] < 0 or not (min_area <= area[k] <= max_area):
            continue
        v = var[k]
        if v > max_variation or not v < var[npar[k]]:
            continue
        if main[k] >= 0 and v > var[main[k]]:
            continue
        p = int(canon[k])
        regions.append(MserRegion(
            center=(float(sx[k] / area[k]), float(sy[k] / area[k])),
            stability=1.0 / max(v, 1e-6), area=int(area[k]), level=int(level[k]),
            polarity=polarity, seed=(p // w, p % w)))
    return regions


def quantize(u: np.ndarray, levels: int = 256) -> np.ndarray:
    lo, hi = float(u.min()), float(u.max())
    if hi - lo < 1e-12:
        return np.zeros(u.shape, dtype=np.int64)
    return np.rint((u - lo) / (hi - lo) * (levels - 1)).astype(np.int64)


def region_pixels(q: np.ndarray, region: MserRegion) -> np.ndarray:
    """(row, col) pixel list of a region from the quantised image it came from."""
    qq = q if region.polarity == "dark" else 255 - q
    labels, _ = ndimage.label(qq <= region.level)
    lab = labels[region.seed]
    return np.argwhere(labels == lab)


def detect_mser(img: RasterImage, delta: int = 2, max_variation: float = 0.25,
                min_area: int = 30, max_area_fraction: float = 0.01,
                polarities=("dark", "bright"), with_pixels: bool = False) -> list:
    """Maximally stable extremal regions over both polarities.

    Intensities are min-max normalised and quantised to 256 levels first,
    which makes the result invariant to positive affine rescaling.
    Variation of a region over its level range is the smallest value of
    (A(t+delta) - A(t-delta)) / A(t); stability is its reciprocal.
    """
    q = quantize(img.data)
    max_area = max_area_fraction * q.size
    out = []
    for pol in polarities:
        qq = q if pol == "dark" else 255 - q
        regs = _mser_one(qq, pol, delta, max_variation, min_area, max_area)
        if with_pixels:
            for r in regs:
                r.pixels = region_pixels(q, r)
        out.extend(regs)
    return out


def keep_count(n: int, fraction: float) -> int:
    if n == 0:
        return 0
    return max(1, math.ceil(n * fraction - 1e-9))


def detect_mser_features(img: RasterImage, delta: int = 2, max_variation: float = 0.25,
                         keep_fraction: float = 0.10, image_id: str = "",
                         **kw) -> KeypointDescriptorSet:
    """Keep the strongest ``keep_fraction`` of MSERs and describe their centres."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in (0, 1]")
    regions = detect_mser(img, delta, max_variation, **kw)
    regions.sort(key=lambda r: (-r.stability, -r.area, r.center[1], r.center[0]))
    regions = regions[:keep_count(len(regions), keep_fraction)]
    kps = [Keypoint(r.center[0], r.center[1], math.sqrt(r.area / math.pi), r.stability)
           for r in regions]
    kept, desc = describe(img, kps)
    return KeypointDescriptorSet(image_id, kept, desc)
