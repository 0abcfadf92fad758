"""Sherd outlines, Hu-moment invariants and sliding-window edge matching."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy import ndimage

from .edges import canny
from .raster import RasterImage

MIN_CLOSED_LENGTH = 32.0
LOG_FLOOR = 1e-30
TOP_K = 3


class ExtractionError(RuntimeError):
    pass


class DegenerateRegionError(ValueError):
    pass


@dataclass
class ContourPolyline:
    points: np.ndarray          # (n, 2) x, y; closed, last point joins the first
    spacing: float = 2.0
    ident: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 2 or len(self.points) < 8:
            raise ValueError("contour needs at least 8 (x, y) points")

    def __len__(self):
        return len(self.points)

    def perimeter(self) -> float:
        return float(np.linalg.norm(np.roll(self.points, -1, axis=0) - self.points, axis=1).sum())

    def reversed(self) -> "ContourPolyline":
        return ContourPolyline(self.points[::-1].copy(), self.spacing, self.ident)

    def window(self, start: int, length: int) -> np.ndarray:
        idx = (start + np.arange(length)) % len(self.points)
        return self.points[idx]


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------

# Moore neighbourhood, clockwise on screen (y down) starting west
_MOORE = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)]


def moore_trace(mask: np.ndarray) -> np.ndarray:
    """Outer boundary pixels of the single component in ``mask`` as (x, y) rows."""
    m = np.pad(np.asarray(mask, dtype=bool), 1)
    ys, xs = np.nonzero(m)
    if len(ys) == 0:
        raise ExtractionError("empty mask")
    start = (int(ys[0]), int(xs[0]))       # raster-scan first pixel
    if len(ys) == 1:
        return np.array([[start[1] - 1, start[0] - 1]], dtype=np.float64)
    direction = {off: k for k, off in enumerate(_MOORE)}
    cur, back = start, (start[0], start[1] - 1)
    path = [cur]
    first_step = None
    for _ in range(4 * int(m.sum()) + 8):
        d0 = direction[(back[0] - cur[0], back[1] - cur[1])]
        prev = back
        for k in range(1, 9):
            dy, dx = _MOORE[(d0 + k) % 8]
            cand = (cur[0] + dy, cur[1] + dx)
            if m[cand]:
                break
            prev = cand
        if cur == start:
            if first_step is None:
                first_step = cand
            elif cand == first_step:
                break
        back, cur = prev, cand
        path.append(cur)
    pts = np.array(path[:-1])
    return np.stack([pts[:, 1] - 1, pts[:, 0] - 1], axis=1).astype(np.float64)


def signed_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def resample_closed(pts: np.ndarray, spacing: float) -> np.ndarray:
    """Uniform arc-length resampling of a closed polyline."""
    closed = np.vstack([pts, pts[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    n = max(int(round(total / spacing)), 8)
    s = np.arange(n) * (total / n)
    return np.stack([np.interp(s, cum, closed[:, 0]), np.interp(s, cum, closed[:, 1])], axis=1)


def outline_mask(img: RasterImage, sigma: float = 2.0, t_low: float = 0.02,
                 t_high: float = 0.05) -> np.ndarray:
    """Filled region bounded by the largest closed Canny edge component."""
    edges, _, _ = canny(img.data, sigma, t_low, t_high)
    # bridge single-pixel breaks left by non-maximum suppression at junctions
    edges = ndimage.binary_dilation(edges, structure=np.ones((3, 3), bool))
    filled = ndimage.binary_fill_holes(edges)
    enclosed = filled & ~edges
    # a closed component is one whose hole fill added interior pixels
    lab, n = ndimage.label(filled, structure=np.ones((3, 3), bool))
    if n == 0:
        raise ExtractionError("no edges found")
    inner = np.bincount(lab[enclosed], minlength=n + 1)
    inner[0] = 0
    if inner.max() == 0:
        raise ExtractionError("no closed edge component")
    region = ndimage.binary_erosion(lab == int(np.argmax(inner)), structure=np.ones((3, 3), bool))
    # drop one-pixel bridges so the traced outline stays simple
    opened = ndimage.binary_opening(region, structure=np.ones((3, 3), bool))
    if opened.any():
        lab2, n2 = ndimage.label(opened)
        sizes = np.bincount(lab2.ravel())
        sizes[0] = 0
        region = lab2 == int(np.argmax(sizes))
    return region


def extract_contour(img: RasterImage, sigma: float = 2.0, t_low: float = 0.02,
                    t_high: float = 0.05, spacing: float = 2.0, smooth: float = 1.0,
                    ident: str = "") -> ContourPolyline:
    """Canny outline, Moore-traced, lightly smoothed and resampled counter-clockwise."""
    region = outline_mask(img, sigma, t_low, t_high)
    raw = moore_trace(region)
    if len(raw) < 4 or np.linalg.norm(np.roll(raw, -1, axis=0) - raw, axis=1).sum() < MIN_CLOSED_LENGTH:
        raise ExtractionError("closed outline shorter than 32 px")
    if smooth > 0:
        raw = ndimage.gaussian_filter1d(raw, smooth, axis=0, mode="wrap")
    # counter-clockwise in image coordinates means negative shoelace area (y down)
    if signed_area(raw) > 0:
        raw = raw[::-1]
    # anchor the resampling phase on the point farthest from the centroid so
    # the samples move with the outline rather than with the pixel scan order
    far = np.linalg.norm(raw - raw.mean(axis=0), axis=1)
    raw = np.roll(raw, -int(np.argmax(far)), axis=0)
    return ContourPolyline(resample_closed(raw, spacing), spacing, ident)


# ---------------------------------------------------------------------------
# Hu moments
# ---------------------------------------------------------------------------

def _polygon_moments(pts: np.ndarray, order: int = 3) -> dict:
    """Raw moments m_pq (p + q <= order) of a polygon by Green's theorem."""
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    cross = x0 * y1 - x1 * y0
    out = {}
    for p in range(order + 1):
        for q in range(order + 1 - p):
            acc = np.zeros_like(x0)
            for k in range(p + 1):
                for l in range(q + 1):
                    acc += (math.comb(k + l, l) * math.comb(p + q - k - l, q - l)
                            * x0 ** k * x1 ** (p - k) * y0 ** l * y1 ** (q - l))
            out[(p, q)] = float((cross * acc).sum()) / (
                (p + q + 2) * (p + q + 1) * math.comb(p + q, p))
    return out


def _central_from_polygon(pts: np.ndarray) -> dict:
    pts = np.asarray(pts, dtype=np.float64)
    m = _polygon_moments(pts, 1)
    if m[(0, 0)] < 0:
        pts = pts[::-1]
        m = _polygon_moments(pts, 1)
    a = m[(0, 0)]
    if not abs(a) > 1e-12:
        raise DegenerateRegionError("polygon encloses zero area")
    c = np.array([m[(1, 0)] / a, m[(0, 1)] / a])
    return _polygon_moments(pts - c, 3)


def _central_from_raster(mask: np.ndarray) -> dict:
    ys, xs = np.nonzero(np.asarray(mask, dtype=bool))
    if len(xs) == 0:
        raise DegenerateRegionError("empty region")
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    return {(p, q): float((dx ** p * dy ** q).sum())
            for p in range(4) for q in range(4 - p)}


def hu_from_central(mu: dict) -> np.ndarray:
    m00 = mu[(0, 0)]
    if not m00 > 0:
        raise DegenerateRegionError("zero-area region")

    def eta(p, q):
        return mu[(p, q)] / m00 ** ((p + q) / 2 + 1)

    n20, n02, n11 = eta(2, 0), eta(0, 2), eta(1, 1)
    n30, n03, n21, n12 = eta(3, 0), eta(0, 3), eta(2, 1), eta(1, 2)
    a, b = n30 + n12, n21 + n03
    h = np.empty(7)
    h[0] = n20 + n02
    h[1] = (n20 - n02) ** 2 + 4 * n11 ** 2
    h[2] = (n30 - 3 * n12) ** 2 + (3 * n21 - n03) ** 2
    h[3] = a ** 2 + b ** 2
    h[4] = ((n30 - 3 * n12) * a * (a ** 2 - 3 * b ** 2)
            + (3 * n21 - n03) * b * (3 * a ** 2 - b ** 2))
    h[5] = (n20 - n02) * (a ** 2 - b ** 2) + 4 * n11 * a * b
    h[6] = ((3 * n21 - n03) * a * (a ** 2 - 3 * b ** 2)
            - (n30 - 3 * n12) * b * (3 * a ** 2 - b ** 2))
    return h


def hu_vector(region) -> np.ndarray:
    """Seven Hu invariants of a boolean raster or an (n, 2) closed polygon."""
    arr = np.asarray(region)
    if arr.dtype == bool:
        return hu_from_central(_central_from_raster(arr))
    if arr.ndim == 2 and arr.shape[1] == 2:
        return hu_from_central(_central_from_polygon(arr))
    raise ValueError("region must be a boolean raster or an (n, 2) polygon")


def log_hu(h: np.ndarray) -> np.ndarray:
    """sign(h) * log10|h|, NaN where |h| is below the skipping floor."""
    h = np.asarray(h, dtype=np.float64)
    out = np.full(h.shape, np.nan)
    ok = np.abs(h) >= LOG_FLOOR
    out[ok] = np.sign(h[ok]) * np.log10(np.abs(h[ok]))
    return out


def _distances_from_logs(ma: np.ndarray, mb: np.ndarray):
    ok = ~(np.isnan(ma) | np.isnan(mb))
    a = np.where(ok, ma, 1.0)
    b = np.where(ok, mb, 1.0)
    i1 = np.where(ok, np.abs(1.0 / a - 1.0 / b), 0.0).sum(axis=-1)
    i2 = np.where(ok, np.abs(a - b), 0.0).sum(axis=-1)
    i3 = np.where(ok, np.abs(a - b) / np.abs(a), 0.0).max(axis=-1, initial=0.0)
    return i1, i2, i3


def shape_distance(a, b) -> tuple:
    """(I1, I2, I3) between two Hu vectors on the signed log scale."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("Hu vectors must be finite")
    i1, i2, i3 = _distances_from_logs(log_hu(a), log_hu(b))
    return float(i1), float(i2), float(i3)


# ---------------------------------------------------------------------------
# Window matching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WindowMatch:
    start_a: int
    start_b: int
    window_len: int
    reversed_b: bool
    i1: float
    i2: float
    i3: float

    @property
    def score(self) -> float:
        return self.i1 ** 2 + self.i2 ** 2 + self.i3 ** 2


@dataclass
class MatchReport:
    pair: tuple
    matches: list = field(default_factory=list)
    top_k: int = TOP_K

    @property
    def best_score(self) -> float:
        return self.matches[0].score if self.matches else math.inf


WINDOW_FRACTION = 0.15


def default_window(ca: ContourPolyline, cb: ContourPolyline,
                   fraction: float = WINDOW_FRACTION) -> int:
    return max(16, int(round(fraction * min(len(ca), len(cb)))))


# near-straight windows enclose almost no area with their chord; their Hu
# vectors are numerically unstable and carry no shape information
MIN_WINDOW_BULGE = 0.02


def window_logs(c: ContourPolyline, window_len: int, stride: int):
    """Signed-log Hu vectors of every chord-closed window starting at 0, stride, ...

    Also returns the side (+1/-1) on which each window's chord-closed region
    lies relative to the direction of travel.
    """
    starts = np.arange(0, len(c), stride)
    logs = np.full((len(starts), 7), np.nan)
    side = np.zeros(len(starts))
    valid = np.zeros(len(starts), dtype=bool)
    for k, s in enumerate(starts):
        w = c.window(int(s), window_len)
        chord = np.linalg.norm(w[-1] - w[0])
        arc = np.linalg.norm(np.diff(w, axis=0), axis=1).sum()
        area = signed_area(w)
        if abs(area) < MIN_WINDOW_BULGE * max(chord, arc) ** 2:
            continue
        try:
            logs[k] = log_hu(hu_vector(w))
        except DegenerateRegionError:
            continue
        side[k] = np.sign(area)
        valid[k] = True
    return starts, logs, side, valid


def match_subcontours(ca: ContourPolyline, cb: ContourPolyline, window_len: int | None = None,
                      stride: int = 2, top_k: int = TOP_K, pair=("a", "b")) -> MatchReport:
    """Lowest-scoring window pairs between two outlines.

    ``cb`` is scanned reversed and forward.  Mating edges coincide once one
    side is reversed, so a reversed pair must enclose its chord regions on
    the same side of travel and a forward pair on opposite sides.
    """
    if window_len is None:
        window_len = default_window(ca, cb)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if window_len < 8:
        raise ValueError("window_len must be >= 8")
    if window_len > min(len(ca), len(cb)):
        raise ValueError("contour shorter than window")
    n_a, n_b = len(ca), len(cb)
    sa, la, side_a, va = window_logs(ca, window_len, stride)
    blocks = []
    for rev in (True, False):
        cbx = cb.reversed() if rev else cb
        sb, lb, side_b, vb = window_logs(cbx, window_len, stride)
        i1, i2, i3 = _distances_from_logs(la[:, None, :], lb[None, :, :])
        want = 1.0 if rev else -1.0
        ok = va[:, None] & vb[None, :] & (side_a[:, None] * side_b[None, :] == want)
        ia, ib = np.nonzero(ok)
        start_b = sb[ib]
        if rev:
            # express the start in cb's own indexing (window runs backwards from here)
            start_b = (n_b - 1 - start_b) % n_b
        blocks.append((np.full(len(ia), rev), sa[ia], start_b,
                       i1[ia, ib], i2[ia, ib], i3[ia, ib]))
    rev, st_a, st_b, j1, j2, j3 = (np.concatenate(col) for col in zip(*blocks))
    score = j1 ** 2 + j2 ** 2 + j3 ** 2
    order = np.lexsort((st_b, st_a, ~rev, score))
    # keep distinct locations: a pair overlapping an accepted one by more than
    # half a window on both contours repeats the same candidate edge
    kept = []
    for k in order:
        m = WindowMatch(int(st_a[k]), int(st_b[k]), window_len, bool(rev[k]),
                        float(j1[k]), float(j2[k]), float(j3[k]))
        lo_b = _first_index(m, n_b)
        if all(_circ(m.start_a, q.start_a, n_a) > window_len // 2
               or _circ(lo_b, _first_index(q, n_b), n_b) > window_len // 2 for q in kept):
            kept.append(m)
            if len(kept) == top_k:
                break
    return MatchReport(tuple(pair), kept, top_k)


def _first_index(m: WindowMatch, n: int) -> int:
    return (m.start_b - m.window_len + 1) % n if m.reversed_b else m.start_b


def _circ(a: int, b: int, n: int) -> int:
    d = abs(a - b) % n
    return min(d, n - d)


def window_points(c: ContourPolyline, start: int, window_len: int, reverse: bool = False):
    """Points of a reported window; reversed windows run backwards from ``start``."""
    if reverse:
        idx = (start - np.arange(window_len)) % len(c)
    else:
        idx = (start + np.arange(window_len)) % len(c)
    return c.points[idx]


def reconstruct_pairs(contours: list, window_len: int | None = None, stride: int = 2,
                      ids=None, window_fraction: float = WINDOW_FRACTION) -> list:
    """One report per unordered pair, best-matching pairs first."""
    if len(contours) < 2:
        raise ValueError("need at least two contours")
    ids = list(ids) if ids is not None else [c.ident or str(i) for i, c in enumerate(contours)]
    reports = []
    for i, j in combinations(range(len(contours)), 2):
        w = window_len if window_len is not None else default_window(contours[i], contours[j],
                                                                        window_fraction)
        w = min(w, len(contours[i]), len(contours[j]))
        reports.append(match_subcontours(contours[i], contours[j], w, stride, pair=(ids[i], ids[j])))
    reports.sort(key=lambda r: r.best_score)
    return reports
