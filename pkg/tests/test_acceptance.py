"""Acceptance suite: one test per criterion, each recording a pass/fail line."""

import json
import math
import time
from itertools import combinations
from pathlib import Path

import numpy as np
import pytest
from scipy import optimize

from artefact_lab.contours import (extract_contour, hu_vector, match_subcontours,
                                   reconstruct_pairs, window_points)
from artefact_lab.dissimilarity import DissimilarityMatrix, load_matrix, ssim, ultrametric_impute
from artefact_lab.embed import kmeans, tsne
from artefact_lab.partition import (McmcConfig, Partition, partition_log_posterior, rand_index,
                                    run_mcmc, vi_distance)
from artefact_lab.pipeline import reconstruction_scores
from artefact_lab.raster import RasterImage, total_variation, tv_denoise
from artefact_lab.synth import is_mating, split_square, synth_vessel

from conftest import (CLUSTER_STAGES, COIN_STAGES, RECONSTRUCT_STAGES, record, run_cli,
                      run_pipeline, tree_digest, write_config)
from test_embed import blobs
from test_partition import planted

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
PIPELINES = {"coins": COIN_STAGES, "ceramics-cluster": CLUSTER_STAGES,
             "ceramics-reconstruct": RECONSTRUCT_STAGES}

pytestmark = pytest.mark.slow


def _run(name, root):
    corpus, work = root / "corpus", root / "work"
    t0 = time.perf_counter()
    run_pipeline(CONFIGS / f"{name}.yaml", corpus, work, PIPELINES[name])
    return corpus, work, time.perf_counter() - t0


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """Each shipped pipeline, run once end to end through the CLI."""
    cache = {}

    def get(name):
        if name not in cache:
            cache[name] = _run(name, tmp_path_factory.mktemp(name))
        return cache[name]
    return get


def _eval(work):
    return json.loads((work / "eval.json").read_text())


# 1 -------------------------------------------------------------------------

def test_criterion_01_coin_pipeline(runs):
    _, work, secs = runs("coins")
    ev = _eval(work)
    ok = ev["rand"] >= 0.90 and ev["baseline_rand"] >= 0.85 and secs <= 300
    assert record(1, ok, f"Rand {ev['rand']:.3f} (>= 0.90), baseline Rand "
                         f"{ev['baseline_rand']:.3f} (>= 0.85), sizes {tuple(ev['sizes'])}, "
                         f"runtime {secs:.0f} s (<= 300)")


# 2 -------------------------------------------------------------------------

def test_criterion_02_exclusion_rule(tmp_path):
    cfg = write_config(tmp_path / "blank.yaml", {
        "pipeline": "coins", "seed": 1,
        "synth": {"kind": "coins", "n_dies": 3, "coins_per_die": 4, "blank_coins": 1}})
    corpus, work = tmp_path / "corpus", tmp_path / "work"
    run_pipeline(cfg, corpus, work, ("preprocess", "detect", "match", "dist", "impute"))
    ids = json.loads((corpus / "ground_truth.json").read_text())["item_ids"]
    blank = ids[-1]
    d = load_matrix(work / "dissimilarity.csv")
    index = {k: i for i, k in enumerate(d.ids)}
    pairs = json.loads((work / "metrics.json").read_text())["pairs"]
    consistent = all((p["n_matched"] < 3) == bool(d.missing_mask[index[p["pair"][0]],
                                                                  index[p["pair"][1]]])
                     for p in pairs)
    blank_missing = sum(1 for p in pairs if blank in p["pair"] and p["n_matched"] < 3)
    imputed = load_matrix(work / "imputed.csv")
    ok = consistent and blank_missing > 0 and imputed.complete
    assert record(2, ok, f"missing iff < 3 landmarks on all {len(pairs)} pairs: {consistent}; "
                         f"blank-coin pairs excluded: {blank_missing}/{len(ids) - 1}; "
                         f"imputed matrix complete: {imputed.complete}")


# 3 -------------------------------------------------------------------------

def random_ultrametric(n, rng):
    """Distances read off a random binary merge tree with increasing heights."""
    clusters = [[i] for i in range(n)]
    heights = np.sort(rng.uniform(0.05, 1.0, n - 1))
    d = np.zeros((n, n))
    for h in heights:
        a, b = sorted(rng.choice(len(clusters), 2, replace=False))
        for i in clusters[a]:
            for j in clusters[b]:
                d[i, j] = d[j, i] = h
        clusters[a] = clusters[a] + clusters.pop(b)
    return d


def test_criterion_03_ultrametric_imputation():
    rng = np.random.default_rng(2024)
    exact, cherries = 0, 0
    trials = 200
    for _ in range(trials):
        n = int(rng.integers(3, 13))
        d = random_ultrametric(n, rng)
        i, j = sorted(rng.choice(n, 2, replace=False))
        w = d.copy()
        w[i, j] = w[j, i] = np.nan
        got = ultrametric_impute(DissimilarityMatrix(w, np.isnan(w))).values[i, j]
        if abs(got - d[i, j]) <= 1e-12:
            exact += 1
        elif all(d[i, k] > d[i, j] for k in range(n) if k not in (i, j)):
            cherries += 1
    assert record(3, exact == trials,
                  f"exact recovery {exact}/{trials}; every miss is a cherry pair "
                  f"({cherries} of {trials - exact}) that no third item can bound")


# 4 -------------------------------------------------------------------------

def test_criterion_04_ssim():
    x = RasterImage(np.random.default_rng(4).random((64, 64)))
    ident = ssim(x, x)
    const = ssim(RasterImage(np.zeros((64, 64))), RasterImage(np.ones((64, 64))))
    ok = abs(ident - 1.0) <= 1e-12 and abs(const - 9.999e-5) <= 1e-8
    assert record(4, ok, f"SSIM(x, x) = {ident!r}; SSIM(0, 1) = {const:.6e}")


# 5 -------------------------------------------------------------------------

def _blob(n=600):
    t = np.linspace(0, 2 * math.pi, n, endpoint=False)
    r = 80 + 12 * np.sin(3 * t + 0.4) + 7 * np.cos(5 * t + 1.0)
    return np.stack([r * np.cos(t) + 0.3 * r * np.sin(2 * t), r * np.sin(t)], axis=1)


def test_criterion_05_hu_invariants():
    size = 560
    yy, xx = np.mgrid[0:size, 0:size]
    disk = (xx + 0.5 - size / 2) ** 2 + (yy + 0.5 - size / 2) ** 2 <= 256.0 ** 2
    hr = hu_vector(disk)
    t = np.linspace(0, 2 * math.pi, 8192, endpoint=False)
    hp = hu_vector(np.stack([256 * np.cos(t), 256 * np.sin(t)], axis=1))
    poly = _blob()
    ha, hb = hu_vector(poly), hu_vector(poly[::-1] * np.array([-1.0, 1.0]))
    raster_ok = abs(hr[0] - 1 / (2 * math.pi)) <= 1e-3 and np.all(np.abs(hr[1:]) <= 1e-6)
    poly_ok = abs(hp[0] - 1 / (2 * math.pi)) <= 1e-3 and np.all(np.abs(hp[1:]) <= 1e-9)
    mirror_ok = (np.sign(ha[6]) == -np.sign(hb[6]) and abs(abs(ha[6]) - abs(hb[6])) <= 1e-6)
    assert record(5, raster_ok and poly_ok and mirror_ok,
                  f"raster disk h1 err {abs(hr[0] - 1 / (2 * math.pi)):.1e}, max|h2..h7| "
                  f"{np.abs(hr[1:]).max():.1e}; polygon max|h2..h7| {np.abs(hp[1:]).max():.1e}; "
                  f"mirror h7 {ha[6]:.3e} -> {hb[6]:.3e}")


# 6 -------------------------------------------------------------------------

def test_criterion_06_partition_metrics():
    p, q = Partition([0, 0, 1]), Partition([0, 1, 2])
    r, r_rev = rand_index(p, q), rand_index(q, p)
    a, b = Partition([0, 0]), Partition([0, 1])
    v, v_rev = vi_distance(a, b), vi_distance(b, a)
    ok = r == 2 / 3 and r_rev == r and abs(v - math.log(2)) <= 1e-12 and v_rev == v
    assert record(6, ok, f"Rand = {r!r} (2/3 exact, symmetric {r_rev == r}); "
                         f"VI = {v!r} (ln 2, symmetric {v_rev == v})")


# 7 -------------------------------------------------------------------------

def test_criterion_07_mcmc():
    hits = 0
    runs = 20
    for s in range(runs):
        d, truth = planted(20, seed=100 + s)
        trace = run_mcmc(d, McmcConfig(seed=s))
        hits += rand_index(trace.mode(), truth) == 1.0
    d, _ = planted(20, seed=7)
    lab = np.random.default_rng(8).integers(0, 5, 20)
    lp = partition_log_posterior(d, Partition(lab))
    lp_perm = partition_log_posterior(d, Partition(np.array([3, 0, 4, 1, 2])[lab]))
    cfg = McmcConfig(seed=5)
    t1, t2 = run_mcmc(d, cfg), run_mcmc(d, cfg)
    identical = (t1.samples.tobytes() == t2.samples.tobytes()
                 and t1.log_posterior.tobytes() == t2.log_posterior.tobytes())
    ok = hits >= 0.95 * runs and abs(lp - lp_perm) <= 1e-12 and identical
    assert record(7, ok, f"mode = truth in {hits}/{runs} runs; relabel delta "
                         f"{abs(lp - lp_perm):.1e}; bit-identical trace: {identical}")


# 8 -------------------------------------------------------------------------

def test_criterion_08_ceramics_clustering(runs):
    _, work, secs = runs("ceramics-cluster")
    ev = _eval(work)
    x, truth = blobs(seed=11)
    emb = tsne(x, perplexity=15, seed=12)
    blob_rand = rand_index(kmeans(emb, 3, seed=13), Partition(truth))
    ok = ev["rand"] >= 0.70 and blob_rand >= 0.95
    rows = json.loads((work / "embed.json").read_text())["rows"]
    assert record(8, ok, f"sherd features {rows}, t-SNE + k-means Rand {ev['rand']:.3f} "
                         f"(>= 0.70); 3-blob Rand {blob_rand:.3f} (>= 0.95); {secs:.0f} s")


# 9 -------------------------------------------------------------------------

VESSEL_SEEDS = range(10)


def _vessel_scores(seed):
    pieces, adj, _ = synth_vessel(7, seed=seed, texture=seed % 5)
    ids = [str(k) for k in range(len(pieces))]
    cs = [extract_contour(p.image, ident=i) for p, i in zip(pieces, ids)]
    reports = reconstruct_pairs(cs)
    return reconstruction_scores(reports, dict(zip(ids, cs)), dict(zip(ids, pieces)),
                                 [(ids[i], ids[j]) for i, j in adj])


def test_criterion_09_vessel_reconstruction(runs):
    pieces, _ = split_square(seed=0)
    ca, cb = (extract_contour(p.image) for p in pieces)
    rep = match_subcontours(ca, cb)
    square_ok = any(is_mating(pieces[0], pieces[1], window_points(ca, m.start_a, m.window_len),
                              window_points(cb, m.start_b, m.window_len, m.reversed_b))
                    for m in rep.matches)
    per = [_vessel_scores(s) for s in VESSEL_SEEDS]
    n_adj = sum(p["adjacent_pairs"] for p in per)
    mates = sum(p["mate_in_top_k"] * p["adjacent_pairs"] for p in per) / n_adj
    above = sum(p["above_nonadjacent_median"] * p["adjacent_pairs"] for p in per) / n_adj
    all_above = sum(p["above_nonadjacent_median"] == 1.0 for p in per)
    _, work, _ = runs("ceramics-reconstruct")
    cli = _eval(work)
    ok = square_ok and mates >= 0.80 and all_above == len(per)
    assert record(9, ok, f"split-square mate in top-3: {square_ok}; {len(per)} vessels, "
                         f"{n_adj} adjacent pairs: mate in top-3 {mates:.3f} (>= 0.80); "
                         f"adjacent above non-adjacent median {above:.3f} pooled, all pairs "
                         f"above in {all_above}/{len(per)} vessels; CLI vessel "
                         f"{cli['mate_in_top_k']:.2f}/{cli['above_nonadjacent_median']:.2f}")


# 10 ------------------------------------------------------------------------

def test_criterion_10_determinism(runs, tmp_path):
    diffs = {}
    for name in PIPELINES:
        corpus, work, _ = runs(name)
        c2, w2, _ = _run(name, tmp_path / name)
        a = {**{"corpus/" + k: v for k, v in tree_digest(corpus).items()},
             **{"work/" + k: v for k, v in tree_digest(work).items()}}
        b = {**{"corpus/" + k: v for k, v in tree_digest(c2).items()},
             **{"work/" + k: v for k, v in tree_digest(w2).items()}}
        diffs[name] = (len(a), sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k)))
    ok = all(not d for _, d in diffs.values())
    detail = "; ".join(f"{n}: {cnt} files, {len(d)} differ" for n, (cnt, d) in diffs.items())
    assert record(10, ok, detail)


# 11 ------------------------------------------------------------------------

def _rof_oracle(f, lam, eps=1e-12):
    """Brute-force minimiser of the discrete ROF objective (forward differences)."""
    shape = f.shape

    def obj(v):
        u = v.reshape(shape)
        gx = np.zeros_like(u)
        gy = np.zeros_like(u)
        gx[:, :-1] = u[:, 1:] - u[:, :-1]
        gy[:-1, :] = u[1:, :] - u[:-1, :]
        mag = np.sqrt(gx * gx + gy * gy + eps)
        val = mag.sum() + 0.5 * lam * ((u - f) ** 2).sum()
        px, py = gx / mag, gy / mag
        div = np.zeros_like(u)
        div[:, :-1] -= px[:, :-1]
        div[:, 1:] += px[:, :-1]
        div[:-1, :] -= py[:-1, :]
        div[1:, :] += py[:-1, :]
        return val, (div + lam * (u - f)).ravel()

    res = optimize.minimize(obj, f.ravel(), jac=True, method="L-BFGS-B",
                            options={"maxiter": 50000, "ftol": 1e-15, "gtol": 1e-12})
    return res.x.reshape(shape)


def test_criterion_11_tv_denoise():
    rng = np.random.default_rng(11)
    worst = -np.inf
    for _ in range(100):
        u = rng.random((int(rng.integers(8, 40)), int(rng.integers(8, 40))))
        lam = float(rng.uniform(0.5, 50.0))
        out = tv_denoise(RasterImage(u), lam, 100)
        worst = max(worst, total_variation(out.data) - total_variation(u))
    f = np.full((9, 9), 0.5)
    f[4, 4] = 1.0
    out = tv_denoise(RasterImage(f), 5.0, 500).data
    oracle = _rof_oracle(f, 5.0)
    amp_in, amp_out = f[4, 4] - 0.5, out[4, 4] - np.median(out)
    corners = np.abs(out[[0, 0, -1, -1], [0, -1, 0, -1]] - 0.5).max()
    oracle_corner = np.abs(oracle[[0, 0, -1, -1], [0, -1, 0, -1]] - 0.5).max()
    ok = worst <= 1e-9 and amp_out <= 0.5 * amp_in and corners < 1e-3
    assert record(11, ok, f"max TV increase over 100 images {worst:.1e} (<= 1e-9); impulse "
                          f"amplitude {amp_in:.2f} -> {amp_out:.3f}; corner change "
                          f"{corners:.2e} (< 1e-3), ROF oracle corner change "
                          f"{oracle_corner:.2e}, max |ours - oracle| "
                          f"{np.abs(out - oracle).max():.1e}")
