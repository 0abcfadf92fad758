import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from artefact_lab.dissimilarity import DissimilarityMatrix
from artefact_lab.partition import (McmcConfig, McmcTrace, Partition, estimate_partition_vi,
                                    format_sizes, linkage_baseline, partition_log_posterior,
                                    rand_index, run_mcmc, sample_prior, vi_distance)

SHORT = dict(iterations=1500, burn_in=500, thin=5)


def planted(n=20, seed=0, within=0.1, between=1.0):
    """Gamma(shape 2) distances: small inside each half, large across."""
    rng = np.random.default_rng(seed)
    truth = np.repeat([0, 1], n // 2)
    v = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            mean = within if truth[i] == truth[j] else between
            v[i, j] = v[j, i] = rng.gamma(2.0, mean / 2.0)
    return DissimilarityMatrix(v, np.zeros((n, n), bool)), Partition(truth)


def _complete(v):
    v = np.asarray(v, float)
    return DissimilarityMatrix(v, np.zeros(v.shape, bool))


def test_partition_canonical():
    p = Partition([2, 2, 0, 1])
    assert p.labels == (0, 0, 1, 2)
    assert p.k == 3 and p.sizes() == [2, 1, 1]
    assert format_sizes(Partition([0] * 59 + [1] * 14 + [2] * 7 + [3] * 5)) == "(59, 14, 7, 5)"


def test_log_posterior_single_item():
    cfg = McmcConfig()
    lp = partition_log_posterior(_complete([[0.0]]), Partition([0]), cfg)
    nb = stats.nbinom.logpmf(1, cfg.r, cfg.p)
    pois = stats.poisson.logpmf(1, cfg.lambda_k) - math.log1p(-math.exp(-cfg.lambda_k))
    assert lp == pytest.approx(nb + pois, abs=1e-12)


def test_log_posterior_two_items_together_wins():
    # within-mean small relative to between-mean: rate hyperpriors favour tight pairs
    cfg = McmcConfig(a_w=1.0, b_w=0.01, a_b=1.0, b_b=10.0)
    d = _complete([[0, 0.01], [0.01, 0]])
    assert (partition_log_posterior(d, Partition([0, 0]), cfg)
            > partition_log_posterior(d, Partition([0, 1]), cfg))


def test_log_posterior_label_invariance():
    d, _ = planted(12, seed=1)
    rng = np.random.default_rng(2)
    lab = rng.integers(0, 4, 12)
    perm = rng.permutation(4)
    a = partition_log_posterior(d, Partition(lab))
    b = partition_log_posterior(d, Partition(perm[lab]))
    assert abs(a - b) <= 1e-12


def test_log_posterior_incomplete_rejected():
    v = np.array([[0, np.nan], [np.nan, 0]])
    with pytest.raises(ValueError):
        partition_log_posterior(DissimilarityMatrix(v, np.isnan(v)), Partition([0, 0]))


def test_zero_distance_floored():
    d = _complete([[0, 0.0, 1], [0.0, 0, 1], [1, 1, 0]])
    assert math.isfinite(partition_log_posterior(d, Partition([0, 0, 1])))


def test_trace_length_one():
    d, _ = planted(8)
    t = run_mcmc(d, McmcConfig(iterations=11, burn_in=10, thin=3))
    assert len(t) == 1 and t.samples.shape == (1, 8)


def test_config_validation():
    with pytest.raises(ValueError):
        McmcConfig(iterations=10, burn_in=10)
    with pytest.raises(ValueError):
        McmcConfig(p=1.0)
    with pytest.raises(ValueError):
        McmcConfig(lambda_k=0.0)


def test_mcmc_planted_recovered():
    d, truth = planted(20, seed=3)
    t = run_mcmc(d, McmcConfig(seed=1, **SHORT))
    assert rand_index(t.mode(), truth) == 1.0
    assert rand_index(estimate_partition_vi(t), truth) == 1.0


def test_mcmc_deterministic():
    d, _ = planted(12, seed=4)
    cfg = McmcConfig(seed=9, **SHORT)
    a, b = run_mcmc(d, cfg), run_mcmc(d, cfg)
    assert np.array_equal(a.samples, b.samples)
    assert a.log_posterior.tobytes() == b.log_posterior.tobytes()


def test_mcmc_item_order_invariance():
    n = 8
    d, _ = planted(n, seed=5, within=0.4, between=0.8)
    perm = np.random.default_rng(6).permutation(n)
    dp = _complete(d.values[np.ix_(perm, perm)])
    cfg = McmcConfig(seed=3, iterations=400, burn_in=100, thin=1)
    a = run_mcmc(d, cfg)
    # row r of dp is original item perm[r]; key it by that identity
    b = run_mcmc(dp, cfg, item_keys=perm)
    unperm = np.empty((len(b), n), dtype=np.int64)
    unperm[:, perm] = b.samples
    assert np.array_equal(np.array([Partition(s).labels for s in unperm]), a.samples)
    assert np.allclose(a.log_posterior, b.log_posterior, atol=1e-9)


def test_vi_point_estimate_examples():
    p, q = Partition([0, 0, 1, 1]), Partition([0, 1, 2, 3])
    t = McmcTrace(np.array([p.labels, p.labels, q.labels]), np.zeros(3))
    assert estimate_partition_vi(t) == p
    same = McmcTrace(np.array([q.labels] * 4), np.zeros(4))
    assert estimate_partition_vi(same) == q
    with pytest.raises(ValueError):
        estimate_partition_vi(McmcTrace(np.zeros((0, 4)), np.zeros(0)))


def test_vi_point_estimate_tie_prefers_fewer_clusters():
    p, q = Partition([0, 0]), Partition([0, 1])
    t = McmcTrace(np.array([q.labels, p.labels]), np.zeros(2))
    assert estimate_partition_vi(t) == p


def test_vi_and_rand_examples():
    assert vi_distance(Partition([0, 0]), Partition([0, 1])) == pytest.approx(math.log(2), abs=1e-12)
    assert rand_index(Partition([0, 0, 1]), Partition([0, 1, 2])) == 2 / 3
    p = Partition([0, 1, 1, 2])
    assert vi_distance(p, p) == 0 and rand_index(p, p) == 1.0
    with pytest.raises(ValueError):
        rand_index(Partition([0]), Partition([0]))
    with pytest.raises(ValueError):
        vi_distance(Partition([0, 0]), Partition([0, 0, 0]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=2, max_size=15), st.integers(0, 10**6))
def test_metrics_symmetric_and_bounded(a, seed):
    p = Partition(a)
    q = Partition(np.random.default_rng(seed).integers(0, 4, len(a)))
    assert abs(vi_distance(p, q) - vi_distance(q, p)) <= 1e-12
    r = rand_index(p, q)
    assert r == rand_index(q, p) and 0 <= r <= 1
    assert (r == 1.0) == (p == q)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6))
def test_vi_estimate_is_trace_element(seed):
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 3, (7, 6))
    t = McmcTrace(np.array([Partition(x).labels for x in s]), np.zeros(7))
    est = estimate_partition_vi(t)
    assert est.labels in {tuple(x) for x in t.samples}


def test_linkage_extremes_and_planted():
    d, truth = planted(20, seed=7)
    assert linkage_baseline(d, 20).k == 20
    assert linkage_baseline(d, 1).k == 1
    assert rand_index(linkage_baseline(d, 2), truth) == 1.0
    with pytest.raises(ValueError):
        linkage_baseline(d, 0)
    with pytest.raises(ValueError):
        linkage_baseline(d, 21)


def _crp_theta(target_k, n):
    lo, hi = 1e-6, 1e6
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        ek = sum(mid / (mid + i) for i in range(n))
        lo, hi = (mid, hi) if ek < target_k else (lo, mid)
    return math.sqrt(lo * hi)


def _crp_largest_fraction(n, theta, draws, rng):
    out = np.empty(draws)
    for t in range(draws):
        sizes = []
        for i in range(n):
            w = np.array(sizes + [theta], dtype=float)
            c = rng.choice(len(w), p=w / w.sum())
            if c == len(sizes):
                sizes.append(1)
            else:
                sizes[c] += 1
        out[t] = max(sizes) / n
    return out


@pytest.mark.slow
def test_micro_clustering_prior_vs_crp():
    n, draws = 200, 500
    t = sample_prior(n, McmcConfig(iterations=500 + draws * 4, burn_in=500, thin=4, seed=11))
    assert len(t) == draws
    ks = t.samples.max(axis=1) + 1
    ours = np.array([np.bincount(s).max() / n for s in t.samples])
    theta = _crp_theta(ks.mean(), n)
    crp = _crp_largest_fraction(n, theta, draws, np.random.default_rng(12))
    assert ours.mean() < crp.mean()
    assert stats.mannwhitneyu(ours, crp, alternative="less").pvalue < 0.01
