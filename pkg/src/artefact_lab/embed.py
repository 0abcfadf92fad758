"""Feature-matrix assembly, exact t-SNE and k-means for sherd descriptors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .keypoints import DESCRIPTOR_WIDTH
from .partition import Partition


@dataclass
class FeatureMatrix:
    data: np.ndarray
    provenance: list = field(default_factory=list)   # (image_id, sherd_id, set_id)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("feature data must be 2-D")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature data must be finite")
        if len(self.provenance) != self.data.shape[0]:
            raise ValueError("provenance length must equal row count")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    def set_ids(self) -> np.ndarray:
        return np.array([p[2] for p in self.provenance])

    def image_ids(self) -> list:
        return [p[0] for p in self.provenance]


@dataclass
class Embedding2D:
    points: np.ndarray
    final_kl: float
    initial_kl: float = float("nan")

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ValueError("embedding must be (n, 2)")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("embedding coordinates must be finite")


def standardize(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    out = np.zeros_like(x)
    ok = sd > 1e-12
    out[:, ok] = (x[:, ok] - mu[ok]) / sd[ok]
    return out


def build_feature_matrix(sets) -> FeatureMatrix:
    """Stack descriptor rows from ``[(KeypointDescriptorSet, sherd_id, set_id), ...]``."""
    rows, prov = [], []
    for ks, sherd_id, set_id in sets:
        desc = np.asarray(ks.descriptors, dtype=np.float64)
        if desc.ndim != 2:
            desc = desc.reshape(len(ks), -1 if len(ks) else DESCRIPTOR_WIDTH)
        if desc.shape[1] != DESCRIPTOR_WIDTH:
            raise ValueError(f"descriptor width {desc.shape[1]} != {DESCRIPTOR_WIDTH}")
        rows.append(desc)
        prov += [(ks.image_id, sherd_id, set_id)] * len(desc)
    data = np.vstack(rows) if rows else np.zeros((0, DESCRIPTOR_WIDTH))
    return FeatureMatrix(standardize(data) if len(data) else data, prov)


# ---------------------------------------------------------------------------
# t-SNE
# ---------------------------------------------------------------------------

def _sq_dists(x):
    s = (x * x).sum(axis=1)
    d = s[:, None] + s[None, :] - 2.0 * x @ x.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def conditional_affinities(x: np.ndarray, perplexity: float, tol: float = 1e-10,
                           max_iter: int = 200) -> np.ndarray:
    """Row-stochastic Gaussian affinities with each row's entropy at log(perplexity)."""
    d = _sq_dists(x)
    n = len(d)
    target = np.log(perplexity)
    p = np.zeros((n, n))
    for i in range(n):
        di = np.delete(d[i], i)
        di = di - di.min()
        lo, hi, beta = 0.0, np.inf, 1.0
        for _ in range(max_iter):
            w = np.exp(-di * beta)
            sw = w.sum()
            h = np.log(sw) + beta * (di * w).sum() / sw
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
        p[i, np.arange(n) != i] = w / sw
    return p


def joint_affinities(x: np.ndarray, perplexity: float) -> np.ndarray:
    p = conditional_affinities(x, perplexity)
    p = (p + p.T) / (2.0 * len(p))
    return p


def _q_matrix(y):
    num = 1.0 / (1.0 + _sq_dists(y))
    np.fill_diagonal(num, 0.0)
    return num, num / num.sum()


def kl_divergence(p: np.ndarray, y: np.ndarray) -> float:
    _, q = _q_matrix(y)
    nz = p > 0
    return float((p[nz] * np.log(p[nz] / np.maximum(q[nz], 1e-300))).sum())


def tsne(m: FeatureMatrix | np.ndarray, perplexity: float = 15.0, seed: int = 0,
         iterations: int = 1000, exaggeration: float = 12.0, exaggeration_iters: int = 250,
         learning_rate: float = 200.0) -> Embedding2D:
    x = m.data if isinstance(m, FeatureMatrix) else np.asarray(m, dtype=np.float64)
    n = len(x)
    if not 1 <= perplexity <= (n - 1) / 3:
        raise ValueError(f"perplexity must lie in [1, {(n - 1) / 3:.3g}] for {n} rows")
    p = np.maximum(joint_affinities(x, perplexity), 1e-12)
    np.fill_diagonal(p, 0.0)
    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    kl0 = kl_divergence(p, y)
    vel = np.zeros_like(y)
    gains = np.ones_like(y)
    for it in range(iterations):
        pe = p * exaggeration if it < exaggeration_iters else p
        mom = 0.5 if it < exaggeration_iters else 0.8
        num, q = _q_matrix(y)
        w = (pe - q) * num
        grad = 4.0 * (np.diag(w.sum(axis=1)) - w) @ y
        same = np.sign(grad) == np.sign(vel)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        vel = mom * vel - learning_rate * gains * grad
        y = y + vel
        y -= y.mean(axis=0)
    return Embedding2D(y, kl_divergence(p, y), kl0)


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

@dataclass
class KMeansResult:
    partition: Partition
    centers: np.ndarray
    wcss: float
    history: list        # WCSS after each Lloyd step of the winning restart


def _plusplus(x, k, rng):
    centers = [x[rng.integers(len(x))]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        tot = d2.sum()
        if tot <= 0:
            idx = rng.integers(len(x))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * tot, side="right"))
            idx = min(idx, len(x) - 1)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _lloyd(x, c, max_iter):
    hist = []
    labels = None
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - c[None]) ** 2).sum(axis=2)
        new = d2.argmin(axis=1)
        hist.append(float(d2[np.arange(len(x)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(len(c)):
            sel = labels == j
            if sel.any():
                c[j] = x[sel].mean(axis=0)
    return labels, c, hist


def kmeans_fit(points, k: int, seed: int = 0, restarts: int = 10,
               max_iter: int = 300) -> KMeansResult:
    x = points.points if isinstance(points, Embedding2D) else np.asarray(points, dtype=np.float64)
    if not 1 <= k <= len(x):
        raise ValueError(f"k must lie in [1, {len(x)}]")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        labels, c, hist = _lloyd(x, _plusplus(x, k, rng), max_iter)
        if best is None or hist[-1] < best[2][-1]:
            best = (labels, c, hist)
    labels, c, hist = best
    return KMeansResult(Partition(labels), c, hist[-1], hist)


def kmeans(points, k: int, seed: int = 0) -> Partition:
    return kmeans_fit(points, k, seed).partition


def image_majority(labels, image_ids) -> dict:
    """Assign each image the cluster held by most of its rows (ties to the lower id)."""
    votes: dict = {}
    for lab, img in zip(np.asarray(labels), image_ids):
        votes.setdefault(img, {}).setdefault(int(lab), 0)
        votes[img][int(lab)] += 1
    return {img: min(v, key=lambda c: (-v[c], c)) for img, v in votes.items()}
