"""Distance-based Bayesian clustering with a micro-clustering prior.

Likelihood: within-cluster distances ~ Gamma(alpha_w, beta_w), between-
cluster distances ~ Gamma(alpha_b, beta_b), with both rates integrated out
under Gamma(a, b) hyperpriors.  Prior: negative-binomial cluster sizes and
a zero-truncated Poisson cluster count, with the K! labelling factor.
Sampling alternates a Gibbs sweep over item allocations with one random
split-merge Metropolis-Hastings move.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numba
import numpy as np

from .dissimilarity import DissimilarityMatrix

DIST_FLOOR = 1e-9


class InitializationError(RuntimeError):
    pass


def canonical(labels) -> np.ndarray:
    """Relabel clusters 0, 1, ... in order of first appearance."""
    labels = np.asarray(labels)
    _, first, inv = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    return rank[inv.ravel()]


@dataclass(frozen=True)
class Partition:
    labels: tuple

    def __init__(self, labels):
        object.__setattr__(self, "labels", tuple(int(x) for x in canonical(labels)))

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def k(self) -> int:
        return max(self.labels) + 1 if self.labels else 0

    def array(self) -> np.ndarray:
        return np.array(self.labels, dtype=np.int64)

    def sizes(self) -> list:
        """Cluster sizes, largest first."""
        return sorted(Counter(self.labels).values(), reverse=True)

    def blocks(self) -> list:
        out = [[] for _ in range(self.k)]
        for i, lab in enumerate(self.labels):
            out[lab].append(i)
        return out


def format_sizes(p: Partition) -> str:
    """Cluster sizes in parenthesised, descending form, e.g. '(59, 14, 7, 5)'."""
    return "(" + ", ".join(str(s) for s in p.sizes()) + ")"


@dataclass(frozen=True)
class McmcConfig:
    iterations: int = 20000
    burn_in: int = 5000
    thin: int = 10
    seed: int = 0
    alpha_w: float = 2.0
    alpha_b: float = 2.0
    a_w: float = 1.0
    b_w: float = 1.0
    a_b: float = 1.0
    b_b: float = 1.0
    r: float = 3.0
    p: float = 0.5
    lambda_k: float = 4.0

    def __post_init__(self):
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("need 0 <= burn_in < iterations")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if min(self.alpha_w, self.alpha_b, self.a_w, self.b_w, self.a_b, self.b_b, self.r) <= 0:
            raise ValueError("shape and rate hyperparameters must be positive")
        if not 0 < self.p < 1:
            raise ValueError("p must lie in (0, 1)")
        if self.lambda_k <= 0:
            raise ValueError("lambda_k must be positive")

    def params(self) -> np.ndarray:
        return np.array([self.alpha_w, self.alpha_b, self.a_w, self.b_w, self.a_b, self.b_b,
                         self.r, self.p, self.lambda_k], dtype=np.float64)


@dataclass
class McmcTrace:
    samples: np.ndarray            # (S, n) canonical labels
    log_posterior: np.ndarray      # (S,)
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.int64).reshape(len(self.log_posterior), -1)
        self.log_posterior = np.asarray(self.log_posterior, dtype=np.float64)

    def __len__(self):
        return len(self.log_posterior)

    def partitions(self) -> list:
        return [Partition(s) for s in self.samples]

    def mode(self) -> Partition:
        """Most frequently visited partition (first occurrence wins ties)."""
        counts = Counter(tuple(s) for s in self.samples)
        best = max(counts.values())
        for s in self.samples:
            if counts[tuple(s)] == best:
                return Partition(s)
        raise ValueError("empty trace")


# ---------------------------------------------------------------------------
# Log posterior (shared by the exact evaluator and the sampler kernel)
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _group_loglik(m, s, lsum, alpha, a, b):
    if m == 0:
        return 0.0
    return ((alpha - 1.0) * lsum - m * math.lgamma(alpha) + a * math.log(b) - math.lgamma(a)
            + math.lgamma(a + m * alpha) - (a + m * alpha) * math.log(b + s))


@numba.njit(cache=True)
def _log_nb(s, r, p):
    return (math.lgamma(s + r) - math.lgamma(r) - math.lgamma(s + 1.0)
            + r * math.log(p) + s * math.log(1.0 - p))


@numba.njit(cache=True)
def _log_poisson_trunc(k, lam):
    return k * math.log(lam) - lam - math.lgamma(k + 1.0) - math.log(1.0 - math.exp(-lam))


@numba.njit(cache=True)
def _loglik(mw, sw, lw, mt, st, lt, prm):
    return (_group_loglik(mw, sw, lw, prm[0], prm[2], prm[3])
            + _group_loglik(mt - mw, st - sw, lt - lw, prm[1], prm[4], prm[5]))


@numba.njit(cache=True)
def _within_stats(d, logd, labels):
    n = len(labels)
    mw = 0.0
    sw = 0.0
    lw = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            if labels[i] == labels[j]:
                mw += 1.0
                sw += d[i, j]
                lw += logd[i, j]
    return mw, sw, lw


@numba.njit(cache=True)
def _log_prior(sizes, prm):
    k = 0
    total = 0.0
    for s in sizes:
        if s > 0:
            k += 1
            total += _log_nb(float(s), prm[6], prm[7])
    return total + _log_poisson_trunc(float(k), prm[8]) + math.lgamma(k + 1.0)


@numba.njit(cache=True)
def _full_log_post(d, logd, labels, sizes, mt, st, lt, prm, use_lik):
    lp = _log_prior(sizes, prm)
    if use_lik:
        mw, sw, lw = _within_stats(d, logd, labels)
        lp += _loglik(mw, sw, lw, mt, st, lt, prm)
    return lp


def _prepare(d: DissimilarityMatrix):
    if not d.complete:
        raise ValueError("dissimilarity matrix must be complete (impute first)")
    v = np.maximum(d.values, DIST_FLOOR)
    np.fill_diagonal(v, 0.0)
    logd = np.zeros_like(v)
    off = ~np.eye(d.n, dtype=bool)
    logd[off] = np.log(v[off])
    iu = np.triu_indices(d.n, 1)
    return v, logd, float(len(iu[0])), float(v[iu].sum()), float(logd[iu].sum())


def partition_log_posterior(d: DissimilarityMatrix, part: Partition,
                            cfg: McmcConfig = McmcConfig()) -> float:
    v, logd, mt, st, lt = _prepare(d)
    labels = part.array()
    if len(labels) != d.n:
        raise ValueError("partition size does not match matrix")
    sizes = np.bincount(labels, minlength=d.n).astype(np.int64)
    return float(_full_log_post(v, logd, labels, sizes, mt, st, lt, cfg.params(), True))


# ---------------------------------------------------------------------------
# Sampler kernel
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _sweep(d, logd, labels, sizes, state, mt, st, lt, prm, perm, u_gibbs, u_sm, use_lik, stats):
    """One Gibbs sweep in ``perm`` order, then one split-merge proposal.

    ``state`` holds the within-cluster sufficient statistics (m, sum, logsum).
    """
    n = len(labels)
    rowsum = np.zeros(n)
    rowlog = np.zeros(n)
    logw = np.zeros(n + 1)
    slots = np.zeros(n + 1, np.int64)
    log_lam = math.log(prm[8])
    for step in range(n):
        i = perm[step]
        c = labels[i]
        for k in range(n):
            rowsum[k] = 0.0
            rowlog[k] = 0.0
        for j in range(n):
            if j != i:
                rowsum[labels[j]] += d[i, j]
                rowlog[labels[j]] += logd[i, j]
        sizes[c] -= 1
        mw = state[0] - sizes[c]
        sw = state[1] - rowsum[c]
        lw = state[2] - rowlog[c]
        # options: every occupied slot, then the first empty slot as a new cluster
        n_opt = 0
        new_slot = -1
        for k in range(n):
            if sizes[k] > 0:
                slots[n_opt] = k
                lp = _log_nb(sizes[k] + 1.0, prm[6], prm[7]) - _log_nb(float(sizes[k]), prm[6], prm[7])
                if use_lik:
                    lp += _loglik(mw + sizes[k], sw + rowsum[k], lw + rowlog[k], mt, st, lt, prm)
                logw[n_opt] = lp
                n_opt += 1
            elif new_slot < 0:
                new_slot = k
        slots[n_opt] = new_slot
        lp = _log_nb(1.0, prm[6], prm[7]) + log_lam
        if use_lik:
            lp += _loglik(mw, sw, lw, mt, st, lt, prm)
        logw[n_opt] = lp
        n_opt += 1
        top = -np.inf
        for o in range(n_opt):
            if logw[o] > top:
                top = logw[o]
        tot = 0.0
        for o in range(n_opt):
            logw[o] = math.exp(logw[o] - top)
            tot += logw[o]
        target = u_gibbs[step] * tot
        pick = n_opt - 1
        acc = 0.0
        for o in range(n_opt):
            acc += logw[o]
            if target < acc:
                pick = o
                break
        k = slots[pick]
        if k != c:
            stats[0] += 1
        labels[i] = k
        state[0] = mw + sizes[k]
        state[1] = sw + rowsum[k]
        state[2] = lw + rowlog[k]
        sizes[k] += 1

    _split_merge(d, logd, labels, sizes, state, mt, st, lt, prm, perm, u_sm, use_lik, stats)


@numba.njit(cache=True)
def _pair_score(dij, lij, alpha, beta):
    # log Gamma(d; alpha, beta) up to the terms shared by every allocation
    return (alpha - 1.0) * lij - beta * dij + alpha * math.log(beta) - math.lgamma(alpha)


@numba.njit(cache=True)
def _allocation(d, logd, prop, psizes, members, merged_slot, new_slot, a, b, prm,
                rates, use_lik, u, target):
    """Sequentially allocate ``members`` between the clusters seeded by a and b.

    Writes the drawn split into ``prop``/``psizes`` when ``target`` is None-like
    (empty), otherwise scores the given target split.  Returns log q.
    """
    log_q = 0.0
    na = 1
    nb = 1
    prop[a] = new_slot
    prop[b] = merged_slot
    placed = np.zeros(len(members) + 2, np.int64)
    side = np.zeros(len(members) + 2, np.int64)
    placed[0] = a
    side[0] = 0
    placed[1] = b
    side[1] = 1
    n_placed = 2
    for t in range(len(members)):
        x = members[t]
        sa = _log_nb(na + 1.0, prm[6], prm[7]) - _log_nb(float(na), prm[6], prm[7])
        sb = _log_nb(nb + 1.0, prm[6], prm[7]) - _log_nb(float(nb), prm[6], prm[7])
        if use_lik:
            for q in range(n_placed):
                y = placed[q]
                w = _pair_score(d[x, y], logd[x, y], prm[0], rates[0])
                bt = _pair_score(d[x, y], logd[x, y], prm[1], rates[1])
                if side[q] == 0:
                    sa += w - bt
                else:
                    sb += w - bt
        diff = sb - sa
        if diff > 0:
            pa = math.exp(-diff) / (1.0 + math.exp(-diff))
        else:
            pa = 1.0 / (1.0 + math.exp(diff))
        if len(target) > 0:
            to_a = target[x] == target[a]
        else:
            to_a = u[t] < pa
        if to_a:
            log_q += math.log(max(pa, 1e-300))
            prop[x] = new_slot
            side[n_placed] = 0
            na += 1
        else:
            log_q += math.log(max(1.0 - pa, 1e-300))
            prop[x] = merged_slot
            side[n_placed] = 1
            nb += 1
        placed[n_placed] = x
        n_placed += 1
    psizes[new_slot] = na
    psizes[merged_slot] = nb
    return log_q


@numba.njit(cache=True)
def _plugin_rates(mw, sw, mt, st, prm):
    rw = (prm[2] + prm[0] * mw) / (prm[3] + sw)
    rb = (prm[4] + prm[1] * (mt - mw)) / (prm[5] + st - sw)
    return np.array([rw, rb])


@numba.njit(cache=True)
def _split_merge(d, logd, labels, sizes, state, mt, st, lt, prm, perm, u_sm, use_lik, stats):
    """Sequentially-allocated split-merge move on a pair drawn through ``perm``."""
    n = len(labels)
    if n < 2:
        return
    a = perm[min(int(u_sm[0] * n), n - 1)]
    bpos = min(int(u_sm[1] * (n - 1)), n - 2)
    b = -1
    seen = 0
    for step in range(n):
        if perm[step] == a:
            continue
        if seen == bpos:
            b = perm[step]
            break
        seen += 1
    ca = labels[a]
    cb = labels[b]
    cur = _full_log_post(d, logd, labels, sizes, mt, st, lt, prm, use_lik)
    # merged configuration: everything in ca or cb lands in cb's slot
    merged = labels.copy()
    msizes = sizes.copy()
    if ca != cb:
        for x in range(n):
            if merged[x] == ca:
                merged[x] = cb
        msizes[cb] += msizes[ca]
        msizes[ca] = 0
    mw, sw, lw = _within_stats(d, logd, merged)
    rates = _plugin_rates(mw, sw, mt, st, prm)
    cnt = 0
    for step in range(n):
        x = perm[step]
        if x != a and x != b and merged[x] == cb:
            cnt += 1
    members = np.empty(cnt, np.int64)
    cnt = 0
    for step in range(n):
        x = perm[step]
        if x != a and x != b and merged[x] == cb:
            members[cnt] = x
            cnt += 1
    empty = np.empty(0, np.int64)
    if ca == cb:
        new_slot = 0
        while msizes[new_slot] > 0:
            new_slot += 1
        prop = merged.copy()
        psizes = msizes.copy()
        log_q = _allocation(d, logd, prop, psizes, members, cb, new_slot, a, b, prm,
                            rates, use_lik, u_sm[3:], empty)
        new = _full_log_post(d, logd, prop, psizes, mt, st, lt, prm, use_lik)
        log_acc = new - cur - log_q
        stats[1] += 1
    else:
        scratch = merged.copy()
        ssizes = msizes.copy()
        log_q = _allocation(d, logd, scratch, ssizes, members, cb, ca, a, b, prm,
                            rates, use_lik, u_sm[3:], labels)
        prop = merged
        psizes = msizes
        new = _full_log_post(d, logd, prop, psizes, mt, st, lt, prm, use_lik)
        log_acc = new - cur + log_q
        stats[3] += 1
    if math.log(max(u_sm[2], 1e-300)) < log_acc:
        if ca == cb:
            stats[2] += 1
        else:
            stats[4] += 1
        for x in range(n):
            labels[x] = prop[x]
            sizes[x] = psizes[x]
        mw, sw, lw = _within_stats(d, logd, labels)
        state[0] = mw
        state[1] = sw
        state[2] = lw


def _run(v, logd, mt, st, lt, cfg: McmcConfig, item_keys, use_lik: bool) -> McmcTrace:
    n = len(v)
    prm = cfg.params()
    keys = np.arange(n) if item_keys is None else np.asarray(item_keys)
    if sorted(keys.tolist()) != list(range(n)):
        raise ValueError("item_keys must be a permutation of range(n)")
    pos_of_key = np.empty(n, dtype=np.int64)
    pos_of_key[keys] = np.arange(n)
    labels = np.zeros(n, dtype=np.int64)
    if use_lik and n > 1:
        # start from the best-scoring average-linkage cut rather than one block
        best = -np.inf
        for cut in _linkage_cuts(v):
            sz = np.bincount(cut, minlength=n).astype(np.int64)
            lp = _full_log_post(v, logd, cut, sz, mt, st, lt, prm, True)
            if lp > best:
                best, labels = lp, cut.astype(np.int64)
    sizes = np.bincount(labels, minlength=n).astype(np.int64)
    state = np.array(_within_stats(v, logd, labels))
    init = _full_log_post(v, logd, labels, sizes, mt, st, lt, prm, use_lik)
    if not math.isfinite(init):
        raise InitializationError("non-finite log posterior at initialisation")
    rng = np.random.default_rng(cfg.seed)
    stats = np.zeros(5, dtype=np.int64)
    samples, lps = [], []
    for it in range(cfg.iterations):
        perm = pos_of_key[rng.permutation(n)]
        u_gibbs = rng.random(n)
        u_sm = rng.random(n + 3)
        _sweep(v, logd, labels, sizes, state, mt, st, lt, prm, perm, u_gibbs, u_sm,
               use_lik, stats)
        if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
            samples.append(canonical(labels))
            lps.append(_full_log_post(v, logd, labels, sizes, mt, st, lt, prm, use_lik))
    names = ("gibbs_moves", "split_proposed", "split_accepted", "merge_proposed", "merge_accepted")
    info = {k: int(x) for k, x in zip(names, stats)}
    info["sweeps"] = cfg.iterations
    return McmcTrace(np.array(samples).reshape(len(samples), n), np.array(lps), info)


def run_mcmc(d: DissimilarityMatrix, cfg: McmcConfig = McmcConfig(), item_keys=None) -> McmcTrace:
    """Sample partitions from the posterior given a complete dissimilarity matrix.

    ``item_keys`` names each row with a stable identity (a permutation of
    range(n)); sweep orders are drawn over keys, so relabelling the rows
    and passing matching keys reproduces the same chain.
    """
    v, logd, mt, st, lt = _prepare(d)
    return _run(v, logd, mt, st, lt, cfg, item_keys, True)


def sample_prior(n: int, cfg: McmcConfig = McmcConfig()) -> McmcTrace:
    """Run the same sampler with the likelihood switched off."""
    z = np.zeros((n, n))
    return _run(z, z, 0.0, 0.0, 0.0, cfg, None, False)


# ---------------------------------------------------------------------------
# Partition comparison and point estimation
# ---------------------------------------------------------------------------

def _check_pair(p: Partition, q: Partition):
    if p.n != q.n:
        raise ValueError(f"partitions over different item counts ({p.n} vs {q.n})")


def _contingency(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    table = np.zeros((p.max() + 1, q.max() + 1))
    np.add.at(table, (p, q), 1.0)
    return table


def vi_distance(p: Partition, q: Partition) -> float:
    """Variation of information H(p) + H(q) - 2 I(p, q), natural log."""
    _check_pair(p, q)
    n = p.n
    t = _contingency(p.array(), q.array()) / n
    a, b = t.sum(axis=1), t.sum(axis=0)
    nz = t > 0
    h_p = -np.sum(a * np.log(a))
    h_q = -np.sum(b * np.log(b))
    mi = np.sum(t[nz] * np.log(t[nz] / np.outer(a, b)[nz]))
    return float(max(h_p + h_q - 2.0 * mi, 0.0))


def rand_index(p: Partition, q: Partition) -> float:
    """Fraction of item pairs on which the two partitions agree."""
    _check_pair(p, q)
    n = p.n
    if n < 2:
        raise ValueError("Rand index needs at least two items")
    t = _contingency(p.array(), q.array()).astype(np.int64)

    def pairs(x):
        return int((x * (x - 1) // 2).sum())

    both = pairs(t)
    same_p = pairs(t.sum(axis=1))
    same_q = pairs(t.sum(axis=0))
    total = n * (n - 1) // 2
    agree = total + 2 * both - same_p - same_q
    return agree / total


def estimate_partition_vi(trace: McmcTrace) -> Partition:
    """Sampled partition with the smallest mean VI to the whole trace.

    Ties go to fewer clusters, then to the earliest sample.
    """
    if len(trace) == 0:
        raise ValueError("empty trace")
    uniq, first, counts = [], {}, Counter()
    for idx, s in enumerate(trace.samples):
        key = tuple(s)
        if key not in first:
            first[key] = idx
            uniq.append(key)
        counts[key] += 1
    parts = [Partition(u) for u in uniq]
    w = np.array([counts[u] for u in uniq], dtype=np.float64)
    m = len(parts)
    vi = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            vi[i, j] = vi[j, i] = vi_distance(parts[i], parts[j])
    loss = vi @ w / w.sum()
    best = min(range(m), key=lambda i: (round(loss[i], 12), parts[i].k, first[uniq[i]]))
    return parts[best]


# ---------------------------------------------------------------------------
# Agglomerative baseline
# ---------------------------------------------------------------------------

def _linkage_cuts(values: np.ndarray) -> list:
    """Average-linkage label vectors for every cut, index k-1 holding k clusters.

    Among equally close cluster pairs the one with the smallest member
    indices merges first.
    """
    n = len(values)
    clusters = {i: [i] for i in range(n)}
    dist = values.astype(np.float64).copy()
    active = list(range(n))

    def labels_now():
        lab = np.empty(n, dtype=np.int64)
        for c, key in enumerate(active):
            lab[clusters[key]] = c
        return canonical(lab)

    cuts = [labels_now()]
    while len(active) > 1:
        best = None
        for x, a in enumerate(active):
            for b in active[x + 1:]:
                key = (dist[a, b], min(clusters[a]), min(clusters[b]))
                if best is None or key < best[0]:
                    best = (key, a, b)
        _, a, b = best
        na, nb = len(clusters[a]), len(clusters[b])
        for c in active:
            if c not in (a, b):
                dist[a, c] = dist[c, a] = (na * dist[a, c] + nb * dist[b, c]) / (na + nb)
        clusters[a] = sorted(clusters[a] + clusters.pop(b))
        active.remove(b)
        cuts.append(labels_now())
    return cuts[::-1]


def linkage_baseline(d: DissimilarityMatrix, k: int) -> Partition:
    """Average-linkage agglomeration cut at ``k`` clusters."""
    if not d.complete:
        raise ValueError("dissimilarity matrix must be complete")
    if not 1 <= k <= d.n:
        raise ValueError(f"k must lie in [1, {d.n}]")
    return Partition(_linkage_cuts(d.values)[k - 1])
