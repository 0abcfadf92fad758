"""Landmark matching between two descriptor sets.

Approximate nearest neighbours come from a randomised k-d forest searched
with a fixed budget of distance checks.  Matches pass a ratio test and a
mutual-consistency check in both directions, then the coin-circle filter.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .keypoints import CoinCircle, KeypointDescriptorSet

RATIO = 0.8


class InsufficientMatchesError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Randomised k-d forest
# ---------------------------------------------------------------------------

class KDForest:
    """Randomised k-d trees with vectorised best-bin-first probing.

    Split dimensions are drawn from the five highest-variance dimensions
    of each node and split at the node mean.  A query visits leaves in
    increasing order of their lower-bound distance until ``checks``
    points have been examined in each tree.
    """

    def __init__(self, data: np.ndarray, n_trees: int = 4, leaf_size: int = 8,
                 seed: int = 0, top_dims: int = 5):
        self.data = np.asarray(data, dtype=np.float64)
        self.leaf_size = leaf_size
        rng = np.random.default_rng(seed)
        self.trees = [self._build(rng, top_dims) for _ in range(n_trees)]

    def _build(self, rng, top_dims):
        # node arrays: split dim, threshold, left child, right child; leaves have dim -1
        dims, thrs, left, right, leaves = [], [], [], [], []
        stack = [(np.arange(len(self.data)), None, None)]
        while stack:
            idx, par, side = stack.pop()
            node = len(dims)
            if par is not None:
                (left if side == 0 else right)[par] = node
            pts = self.data[idx]
            var = pts.var(axis=0) if len(idx) > 1 else np.zeros(self.data.shape[1])
            if len(idx) <= self.leaf_size or var.max() <= 0:
                dims.append(-1)
                thrs.append(0.0)
                left.append(-1)
                right.append(-1)
                leaves.append((node, idx))
                continue
            cand = np.argsort(-var, kind="stable")[:top_dims]
            cand = cand[var[cand] > 0]
            d = int(rng.choice(cand))
            t = float(pts[:, d].mean())
            go_left = pts[:, d] < t
            if go_left.all() or not go_left.any():
                t = float(np.median(pts[:, d]))
                go_left = pts[:, d] < t
                if go_left.all() or not go_left.any():
                    dims.append(-1)
                    thrs.append(0.0)
                    left.append(-1)
                    right.append(-1)
                    leaves.append((node, idx))
                    continue
            dims.append(d)
            thrs.append(t)
            left.append(-1)
            right.append(-1)
            stack.append((idx[~go_left], node, 1))
            stack.append((idx[go_left], node, 0))
        return (np.array(dims), np.array(thrs), np.array(left), np.array(right), leaves)

    def _leaf_bounds(self, tree, queries):
        dims, thrs, left, right, leaves = tree
        nq = len(queries)
        bound = {0: np.zeros(nq)}
        order = [0]
        out = {}
        while order:
            node = order.pop()
            b = bound.pop(node)
            if dims[node] < 0:
                out[node] = b
                continue
            diff = queries[:, dims[node]] - thrs[node]
            pen = diff * diff
            bound[left[node]] = b + np.where(diff >= 0, pen, 0.0)
            bound[right[node]] = b + np.where(diff < 0, pen, 0.0)
            order.extend((left[node], right[node]))
        return np.stack([out[n] for n, _ in leaves], axis=1)

    def candidates(self, queries: np.ndarray, checks: int) -> np.ndarray:
        """Boolean (queries x points) mask of points examined per query."""
        n = len(self.data)
        mask = np.zeros((len(queries), n), dtype=bool)
        per_tree = max(1, math.ceil(checks / len(self.trees)))
        for tree in self.trees:
            leaves = tree[4]
            sizes = np.array([len(ix) for _, ix in leaves])
            owner = np.concatenate([np.full(len(ix), k) for k, (_, ix) in enumerate(leaves)])
            members = np.concatenate([ix for _, ix in leaves])
            bounds = self._leaf_bounds(tree, queries)
            order = np.argsort(bounds, axis=1, kind="stable")
            csum = np.cumsum(sizes[order], axis=1)
            # a leaf is probed if the points checked before it are under budget
            probed_sorted = (csum - sizes[order]) < per_tree
            probed = np.zeros_like(probed_sorted)
            np.put_along_axis(probed, order, probed_sorted, axis=1)
            mask[:, members] |= probed[:, owner]
        return mask

    def query(self, queries: np.ndarray, k: int = 2, checks: int = 256):
        """Approximate k nearest neighbours: (indices, distances), inf-padded."""
        queries = np.asarray(queries, dtype=np.float64)
        mask = self.candidates(queries, checks)
        qi, pi = np.nonzero(mask)
        diff = queries[qi] - self.data[pi]
        dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        full = np.full(mask.shape, np.inf)
        full[qi, pi] = dist
        k_eff = min(k, full.shape[1])
        idx = np.argsort(full, axis=1, kind="stable")[:, :k_eff]
        d = np.take_along_axis(full, idx, axis=1)
        if k_eff < k:
            pad = k - k_eff
            idx = np.hstack([idx, np.full((len(queries), pad), -1)])
            d = np.hstack([d, np.full((len(queries), pad), np.inf)])
        idx = np.where(np.isfinite(d), idx, -1)
        return idx, d


def exact_knn(data: np.ndarray, queries: np.ndarray, k: int = 2):
    diff = queries[:, None, :] - data[None, :, :]
    full = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    idx = np.argsort(full, axis=1, kind="stable")[:, :k]
    return idx, np.take_along_axis(full, idx, axis=1)


_FOREST_CACHE: dict = {}


def forest_for(desc: np.ndarray) -> KDForest:
    key = hashlib.sha1(np.ascontiguousarray(desc).tobytes()).hexdigest() + str(desc.shape)
    forest = _FOREST_CACHE.get(key)
    if forest is None:
        if len(_FOREST_CACHE) > 256:
            _FOREST_CACHE.clear()
        forest = _FOREST_CACHE[key] = KDForest(desc)
    return forest


# ---------------------------------------------------------------------------
# Match sets
# ---------------------------------------------------------------------------

@dataclass
class MatchSet:
    image_pair: tuple
    ia: np.ndarray
    ib: np.ndarray
    dist: np.ndarray
    ranks: np.ndarray = field(default=None)

    def __post_init__(self):
        self.ia = np.asarray(self.ia, dtype=np.int64)
        self.ib = np.asarray(self.ib, dtype=np.int64)
        self.dist = np.asarray(self.dist, dtype=np.float64)
        if self.ranks is not None:
            self.ranks = np.asarray(self.ranks, dtype=np.int64)

    def __len__(self):
        return len(self.ia)

    @property
    def matches(self) -> list:
        return [(int(i), int(j), float(d)) for i, j, d in zip(self.ia, self.ib, self.dist)]

    def swapped(self) -> "MatchSet":
        return MatchSet(self.image_pair[::-1], self.ib, self.ia, self.dist, self.ranks)


def _ratio_nn(src: np.ndarray, dst: np.ndarray, checks: int):
    idx, d = forest_for(dst).query(src, k=2, checks=checks)
    ok = (idx[:, 0] >= 0) & (d[:, 0] < RATIO * d[:, 1])
    return idx[:, 0], d[:, 0], ok


def match_pair(a: KeypointDescriptorSet, b: KeypointDescriptorSet,
               circle_a: CoinCircle | None = None, circle_b: CoinCircle | None = None,
               checks: int = 256) -> MatchSet:
    """One-to-one landmark matches between two descriptor sets.

    Symmetric: swapping the arguments yields the same pairs swapped.
    """
    pair = (a.image_id, b.image_id)
    if len(a) == 0 or len(b) == 0:
        return MatchSet(pair, [], [], [])
    nn_ab, d_ab, ok_ab = _ratio_nn(a.descriptors, b.descriptors, checks)
    nn_ba, _, ok_ba = _ratio_nn(b.descriptors, a.descriptors, checks)
    ia = np.nonzero(ok_ab)[0]
    jb = nn_ab[ia]
    keep = ok_ba[jb] & (nn_ba[jb] == ia)
    ia, jb = ia[keep], jb[keep]
    if circle_a is not None:
        keep = circle_a.contains(a.coords[ia])
        ia, jb = ia[keep], jb[keep]
    if circle_b is not None:
        keep = circle_b.contains(b.coords[jb])
        ia, jb = ia[keep], jb[keep]
    dist = np.linalg.norm(a.descriptors[ia] - b.descriptors[jb], axis=1)
    order = np.lexsort((jb, ia, dist))
    used_a, used_b, out = set(), set(), []
    for k in order:
        i, j = int(ia[k]), int(jb[k])
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        out.append(k)
    out = np.array(sorted(out, key=lambda k: (ia[k], jb[k])), dtype=np.int64)
    return MatchSet(pair, ia[out], jb[out], dist[out])


# ---------------------------------------------------------------------------
# Gaussian-process landmark ranking
# ---------------------------------------------------------------------------

def gp_rank_order(xy: np.ndarray, strength: np.ndarray, jitter: float = 1e-9) -> np.ndarray:
    """Greedy maximum-variance ordering of landmark positions.

    Returns the landmark indices in rank order.  The first landmark is the
    strongest (ties: closest to the centroid, then lowest index).  Each
    subsequent landmark maximises the posterior variance of a unit
    squared-exponential GP conditioned on the landmarks already chosen;
    variance ties go to the lower index.
    """
    n = len(xy)
    centroid_dist = np.linalg.norm(xy - xy.mean(axis=0), axis=1) if n else np.zeros(0)
    by_strength = np.lexsort((np.arange(n), np.round(centroid_dist, 9), -strength))
    if n <= 1:
        return by_strength
    d = np.linalg.norm(xy[:, None, :] - xy[None, :, :], axis=2)
    pairwise = d[np.triu_indices(n, 1)]
    bw = float(np.median(pairwise))
    if bw <= 0:
        nz = pairwise[pairwise > 0]
        if len(nz) == 0:
            return by_strength
        bw = float(nz.mean())
    cov = np.exp(-0.5 * (d / bw) ** 2)
    cov[np.diag_indices(n)] += jitter
    order = [int(by_strength[0])]
    chosen = np.zeros(n, dtype=bool)
    for _ in range(n - 1):
        j = order[-1]
        chosen[j] = True
        cj = cov[:, j].copy()
        cov -= np.outer(cj, cj) / cj[j]
        var = np.where(chosen, -np.inf, np.diag(cov))
        # round so numerically equal variances tie deterministically
        var = np.round(var, 12)
        order.append(int(np.argmax(var)))
    return np.array(order, dtype=np.int64)


def rank_landmarks_gp(m: MatchSet, a: KeypointDescriptorSet) -> MatchSet:
    """Fill ``m.ranks`` (rank position per match, 0 = most informative)."""
    if len(m) == 0:
        raise ValueError("cannot rank an empty match set")
    xy = a.coords[m.ia]
    strength = a.strengths[m.ia]
    order = gp_rank_order(xy, strength)
    ranks = np.empty(len(m), dtype=np.int64)
    ranks[order] = np.arange(len(m))
    return MatchSet(m.image_pair, m.ia, m.ib, m.dist, ranks)


# ---------------------------------------------------------------------------
# Similarity alignment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimilarityTransform:
    rotation: float = 0.0
    scale: float = 1.0
    translation: tuple = (0.0, 0.0)
    residual_rms: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @property
    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return self.scale * np.array([[c, -s], [s, c]])

    def apply(self, xy: np.ndarray) -> np.ndarray:
        return np.asarray(xy, dtype=np.float64) @ self.matrix.T + np.asarray(self.translation)

    def inverse(self) -> "SimilarityTransform":
        inv_m = np.linalg.inv(self.matrix)
        t = -inv_m @ np.asarray(self.translation)
        return SimilarityTransform(-self.rotation, 1.0 / self.scale, (float(t[0]), float(t[1])))

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """self after other."""
        t = self.matrix @ np.asarray(other.translation) + np.asarray(self.translation)
        rot = math.atan2(math.sin(self.rotation + other.rotation), math.cos(self.rotation + other.rotation))
        return SimilarityTransform(rot, self.scale * other.scale, (float(t[0]), float(t[1])))


def fit_similarity(src: np.ndarray, dst: np.ndarray) -> SimilarityTransform:
    """Least-squares similarity (Umeyama) mapping src points onto dst."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 3:
        raise InsufficientMatchesError(f"need at least 3 correspondences, got {len(src)}")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    s0, d0 = src - mu_s, dst - mu_d
    var_s = (s0 ** 2).sum() / len(src)
    if var_s <= 0:
        raise InsufficientMatchesError("source points are coincident")
    cov = d0.T @ s0 / len(src)
    u, sv, vt = np.linalg.svd(cov)
    sign = np.diag([1.0, np.sign(np.linalg.det(u @ vt)) or 1.0])
    rot = u @ sign @ vt
    scale = float(np.trace(np.diag(sv) @ sign) / var_s)
    t = mu_d - scale * rot @ mu_s
    angle = math.atan2(rot[1, 0], rot[0, 0])
    pred = src @ (scale * rot).T + t
    rms = float(np.sqrt(((pred - dst) ** 2).sum(axis=1).mean()))
    return SimilarityTransform(angle, scale, (float(t[0]), float(t[1])), rms)


def estimate_alignment(m: MatchSet, a: KeypointDescriptorSet,
                       b: KeypointDescriptorSet) -> SimilarityTransform:
    if len(m) < 3:
        raise InsufficientMatchesError(f"need at least 3 matches, got {len(m)}")
    return fit_similarity(a.coords[m.ia], b.coords[m.ib])
