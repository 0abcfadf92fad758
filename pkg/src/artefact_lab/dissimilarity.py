"""Pairwise coin metrics, the combined dissimilarity matrix and imputation."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .keypoints import KeypointDescriptorSet
from .matching import MatchSet, SimilarityTransform
from .raster import RasterImage

log = logging.getLogger(__name__)

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
MIN_LANDMARKS = 3


class EmptyMatrixError(ValueError):
    pass


@dataclass(frozen=True)
class PairMetrics:
    n_matched: int
    weighted_euclid: float
    ssim: float

    def __post_init__(self):
        if self.n_matched < 0:
            raise ValueError("n_matched must be non-negative")
        if not (math.isfinite(self.weighted_euclid) and math.isfinite(self.ssim)):
            raise ValueError("metrics must be finite")


@dataclass
class DissimilarityMatrix:
    values: np.ndarray
    missing_mask: np.ndarray
    ids: list | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        mask = np.array(self.missing_mask, dtype=bool)
        n = v.shape[0]
        if v.shape != (n, n) or mask.shape != (n, n):
            raise ValueError("values and mask must be square and equal-sized")
        if mask[np.diag_indices(n)].any():
            raise ValueError("diagonal entries cannot be missing")
        if not np.array_equal(mask, mask.T):
            raise ValueError("missing mask must be symmetric")
        v[mask] = np.nan
        known = ~mask
        if not np.allclose(v[known], v.T[known], rtol=0, atol=0):
            raise ValueError("values must be symmetric")
        if np.any(v[known] < 0) or np.any(np.diag(v) != 0):
            raise ValueError("values must be non-negative with zero diagonal")
        self.values = v
        self.missing_mask = mask
        if self.ids is None:
            self.ids = [str(i) for i in range(n)]

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def complete(self) -> bool:
        return not self.missing_mask.any()


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

def _block_sums(a, win):
    rows = np.arange(0, a.shape[0], win)
    cols = np.arange(0, a.shape[1], win)
    return np.add.reduceat(np.add.reduceat(a, rows, axis=0), cols, axis=1)


def ssim_map(x: np.ndarray, y: np.ndarray, win: int = 8) -> np.ndarray:
    """Per-window SSIM over the non-overlapping ``win`` x ``win`` tiling."""
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch {x.shape} vs {y.shape}")
    cnt = _block_sums(np.ones_like(x), win)
    mx = _block_sums(x, win) / cnt
    my = _block_sums(y, win) / cnt
    vx = np.maximum(_block_sums(x * x, win) / cnt - mx * mx, 0.0)
    vy = np.maximum(_block_sums(y * y, win) / cnt - my * my, 0.0)
    cxy = _block_sums(x * y, win) / cnt - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
    return num / den


def ssim(x: RasterImage, y: RasterImage, win: int = 8) -> float:
    """Mean local SSIM on the [0, 1] dynamic range."""
    return float(np.clip(ssim_map(x.data, y.data, win).mean(), -1.0, 1.0))


# ---------------------------------------------------------------------------
# Pair metrics
# ---------------------------------------------------------------------------

def rank_weights(ranks: np.ndarray) -> np.ndarray:
    w = 1.0 / (np.asarray(ranks, dtype=np.float64) + 1.0)
    return w / w.sum()


def warp_onto(a: RasterImage, shape, t: SimilarityTransform) -> RasterImage:
    """Resample ``a`` into the frame of an image of ``shape`` via a->b transform ``t``."""
    inv = t.inverse()
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    src = inv.apply(np.stack([xx.ravel(), yy.ravel()], axis=1))
    out = ndimage.map_coordinates(a.data, [src[:, 1], src[:, 0]], order=1, mode="nearest")
    return RasterImage(np.clip(out.reshape(shape), 0, 1))


def pair_metrics(img_a: RasterImage, img_b: RasterImage, ks_a: KeypointDescriptorSet,
                 ks_b: KeypointDescriptorSet, m: MatchSet,
                 alignment: SimilarityTransform | None) -> PairMetrics:
    n = len(m)
    if n:
        if m.ranks is None:
            raise ValueError("match set must be ranked first")
        diff = ks_a.descriptors[m.ia] - ks_b.descriptors[m.ib]
        sq = np.einsum("ij,ij->i", diff, diff)
        we = float(math.sqrt(float((rank_weights(m.ranks) * sq).sum())))
    else:
        we = 0.0
    warped = img_a if alignment is None else warp_onto(img_a, img_b.data.shape, alignment)
    if warped.data.shape != img_b.data.shape:
        raise ValueError("images must share dimensions for SSIM")
    return PairMetrics(n, we, ssim(warped, img_b))


# ---------------------------------------------------------------------------
# Matrix assembly
# ---------------------------------------------------------------------------

def _minmax(v):
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def normalized_components(metrics: list) -> np.ndarray:
    """Rows of (count, descriptor, SSIM) dissimilarities, each scaled to [0, 1]."""
    n = np.array([m.n_matched for m in metrics], dtype=np.float64)
    we = np.array([m.weighted_euclid for m in metrics], dtype=np.float64)
    ss = np.array([m.ssim for m in metrics], dtype=np.float64)
    comp = np.stack([1.0 - n / n.max(), we, 1.0 - ss], axis=1)
    return np.stack([_minmax(comp[:, k]) for k in range(3)], axis=1)


def combine(components: np.ndarray) -> np.ndarray:
    return np.sqrt((np.asarray(components, dtype=np.float64) ** 2).sum(axis=1))


def assemble_matrix(metrics: dict, n: int, ids=None) -> DissimilarityMatrix:
    """Build the dissimilarity matrix from ``{(i, j): PairMetrics}``.

    Pairs with fewer than three matched landmarks become missing entries.
    """
    values = np.zeros((n, n))
    missing = np.zeros((n, n), dtype=bool)
    surviving = []
    for (i, j), pm in metrics.items():
        if i == j:
            continue
        if pm.n_matched < MIN_LANDMARKS:
            missing[i, j] = missing[j, i] = True
        else:
            surviving.append(((i, j), pm))
    for i in range(n):
        for j in range(i + 1, n):
            if (i, j) not in metrics and (j, i) not in metrics:
                missing[i, j] = missing[j, i] = True
    if not surviving:
        raise EmptyMatrixError("every pair was excluded")
    surviving.sort(key=lambda kv: kv[0])
    vals = combine(normalized_components([pm for _, pm in surviving]))
    for ((i, j), _), v in zip(surviving, vals):
        values[i, j] = values[j, i] = v
    return DissimilarityMatrix(values, missing, ids)


# ---------------------------------------------------------------------------
# Ultrametric imputation
# ---------------------------------------------------------------------------

def ultrametric_impute(d: DissimilarityMatrix) -> DissimilarityMatrix:
    """Fill d[i, j] with min over k of max(d[i, k], d[k, j]).

    Repeated in passes (each pass reads only entries known at its start)
    until nothing changes; remaining holes take the largest known value.
    """
    v = d.values.copy()
    miss = d.missing_mask.copy()
    n = d.n
    while miss.any():
        known = np.where(miss, np.inf, v)
        np.fill_diagonal(known, np.inf)  # k must differ from i and j
        pi, pj = np.nonzero(np.triu(miss, 1))
        # paths through k: max(d_ik, d_kj), minimised over k
        cand = np.maximum(known[pi], known[pj]).min(axis=1)
        ok = np.isfinite(cand)
        if not ok.any():
            break
        v[pi[ok], pj[ok]] = v[pj[ok], pi[ok]] = cand[ok]
        miss[pi[ok], pj[ok]] = miss[pj[ok], pi[ok]] = False
    if miss.any():
        off = ~np.eye(n, dtype=bool)
        known_vals = v[~miss & off]
        top = float(known_vals.max()) if known_vals.size else 0.0
        isolated = [i for i in range(n) if miss[i][off[i]].all()]
        if isolated:
            log.warning("items %s have no known distances; imputing the global maximum", isolated)
        v[miss] = top
        miss[:] = False
    return DissimilarityMatrix(v, miss, list(d.ids))


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def matrix_to_csv(d: DissimilarityMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(d.ids)
    for i in range(d.n):
        w.writerow(["NA" if d.missing_mask[i, j] else _fmt(d.values[i, j]) for j in range(d.n)])
    return buf.getvalue()


def matrix_from_csv(text: str) -> DissimilarityMatrix:
    rows = list(csv.reader(io.StringIO(text)))
    ids, body = rows[0], rows[1:]
    n = len(ids)
    if len(body) != n or any(len(r) != n for r in body):
        raise ValueError("matrix CSV must have n header ids and n rows of n values")
    miss = np.array([[c == "NA" for c in r] for r in body])
    vals = np.array([[np.nan if c == "NA" else float(c) for c in r] for r in body])
    return DissimilarityMatrix(vals, miss, ids)


def save_matrix(d: DissimilarityMatrix, path) -> None:
    Path(path).write_text(matrix_to_csv(d))


def load_matrix(path) -> DissimilarityMatrix:
    return matrix_from_csv(Path(path).read_text())
