"""Stage runners.  Each stage reads its upstream files and writes its own.

Corpus inputs (images, ground_truth.json) come from the input directory;
every intermediate lives in the output (work) directory.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np

from . import artifacts as art
from . import plotting
from .config import RunConfig
from .contours import extract_contour, reconstruct_pairs, window_points
from .dissimilarity import (assemble_matrix, load_matrix, pair_metrics,
                            save_matrix, ultrametric_impute)
from .embed import build_feature_matrix, image_majority, kmeans_fit, tsne
from .errors import ConfigError, DependencyError
from .keypoints import (CoinCircle, DetectionError, detect_and_describe, detect_coin_circle,
                        detect_mser_features, export_descriptors, import_descriptors)
from .matching import InsufficientMatchesError, estimate_alignment, match_pair, rank_landmarks_gp
from .partition import (Partition, estimate_partition_vi, format_sizes, linkage_baseline,
                        rand_index, run_mcmc)
from .raster import PreprocessConfig, RasterImage, load_image, preprocess, save_png, write_sidecar
from .synth import (GroundTruth, SherdPiece, StrikeSpec, is_mating, synth_coin_corpus,
                    synth_sherd_sets, synth_vessel, write_corpus)

STAGES = ("synth", "preprocess", "detect", "match", "dist", "impute", "cluster", "eval",
          "embed", "kmeans", "contours", "sherd-match")

OVERLAYS = 6


def stage_seed(seed: int, name: str) -> int:
    """Named sub-stream of the run seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


class Context:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.inp = Path(cfg.input_dir)
        self.out = Path(cfg.output_dir)

    def need(self, path: Path) -> Path:
        if not path.exists():
            raise DependencyError(f"missing upstream artifact: {path}")
        return path

    def work(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def truth(self) -> GroundTruth:
        p = self.need(self.inp / "ground_truth.json")
        return GroundTruth.from_json(json.loads(p.read_text()))

    def item_ids(self) -> list:
        gt = self.inp / "ground_truth.json"
        if gt.exists():
            return list(self.truth().item_ids)
        stems = sorted({p.stem for p in self.inp.iterdir() if p.suffix in (".png", ".pgm")})
        if not stems:
            raise DependencyError(f"no images (.png/.pgm) in {self.inp}")
        return stems

    def raw_image(self, ident: str) -> RasterImage:
        for ext in (".png", ".pgm"):
            p = self.inp / f"{ident}{ext}"
            if p.exists():
                return load_image(p)
        raise DependencyError(f"missing upstream artifact: {self.inp / (ident + '.png')}")

    def preprocessed(self, ident: str) -> RasterImage:
        p = self.need(self.out / "preprocessed" / f"{ident}.npy")
        return RasterImage(np.load(p))

    def features(self, ident: str):
        return import_descriptors(self.need(self.out / "features" / f"{ident}.adsc"))


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_synth(ctx: Context) -> str:
    s = ctx.cfg.synth
    seed = stage_seed(ctx.cfg.seed, "synth")
    ctx.out.mkdir(parents=True, exist_ok=True)
    spec = {"kind": s.kind, "seed": seed}
    if s.kind == "coins":
        strike = StrikeSpec(s.rotation, s.translation, s.wear, s.noise, s.lighting)
        images, gt = synth_coin_corpus(s.n_dies, s.coins_per_die, strike=strike, seed=seed,
                                       blank_coins=s.blank_coins)
        spec.update(n_dies=s.n_dies, coins_per_die=s.coins_per_die, strike=strike,
                    blank_coins=s.blank_coins)
        write_corpus(ctx.out, images, gt, spec)
    elif s.kind == "sherds":
        images, gt, _ = synth_sherd_sets(s.n_sets, s.pieces, seed=seed)
        spec.update(n_sets=s.n_sets, pieces=s.pieces)
        write_corpus(ctx.out, images, gt, spec)
    else:
        pieces, adj, _ = synth_vessel(s.n_pieces, seed=seed, texture=seed % 5,
                                      size=s.vessel_size, canvas=s.canvas)
        ids = [f"piece{k + 1}" for k in range(len(pieces))]
        gt = GroundTruth(ids, [0] * len(pieces), adj)
        spec.update(n_pieces=s.n_pieces, vessel_size=s.vessel_size, canvas=s.canvas)
        write_corpus(ctx.out, [p.image for p in pieces], gt, spec)
        geo = ctx.out / "geometry"
        geo.mkdir(exist_ok=True)
        meta = {}
        for ident, p in zip(ids, pieces):
            save_png(RasterImage(p.vessel_mask.astype(np.float64)), geo / f"{ident}.png")
            meta[ident] = {"rotation": p.rotation, "offset": list(p.offset)}
        (geo / "pieces.json").write_text(art.dump_json(meta))
    return f"wrote {len(gt.item_ids)} images to {ctx.out}"


def stage_preprocess(ctx: Context) -> str:
    p = ctx.cfg.preprocess
    pcfg = PreprocessConfig(p.target_size, p.tv_weight, p.tv_iterations, p.clahe_tiles,
                            p.clahe_clip)
    ids = ctx.item_ids()
    for ident in ids:
        img = preprocess(ctx.raw_image(ident), pcfg)
        np.save(ctx.work("preprocessed", f"{ident}.npy"), img.data)
        write_sidecar(img, pcfg, ctx.work("preprocessed", f"{ident}.json"))
    return f"preprocessed {len(ids)} images"


def stage_detect(ctx: Context) -> str:
    d = ctx.cfg.detect
    ids = ctx.item_ids()
    circles = {}
    total = 0
    for ident in ids:
        img = ctx.preprocessed(ident)
        if d.method == "harris":
            ks = detect_and_describe(img, d.max_keypoints, image_id=ident)
        else:
            ks = detect_mser_features(img, d.mser_delta, d.mser_max_variation, d.keep_fraction,
                                      image_id=ident, max_area_fraction=d.mser_max_area)
        export_descriptors(ks, ctx.work("features", f"{ident}.adsc"))
        total += len(ks)
        if ctx.cfg.pipeline == "coins":
            try:
                c = detect_coin_circle(img, d.circle_r_min, d.circle_r_max)
                circles[ident] = [c.cx, c.cy, c.radius]
            except DetectionError:
                circles[ident] = None
    if circles:
        ctx.work("circles.json").write_text(art.dump_json(circles))
    return f"{total} keypoints over {len(ids)} images"


def _circle(circles: dict, ident: str):
    c = circles.get(ident)
    return CoinCircle(*c) if c else None


def stage_match(ctx: Context) -> str:
    ids = ctx.item_ids()
    ks = [ctx.features(i) for i in ids]
    circles = {}
    if ctx.cfg.match.use_circles and (ctx.out / "circles.json").exists():
        circles = json.loads((ctx.out / "circles.json").read_text())
    out = []
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            m = match_pair(ks[i], ks[j], _circle(circles, ids[i]), _circle(circles, ids[j]),
                           checks=ctx.cfg.match.checks)
            if len(m):
                m = rank_landmarks_gp(m, ks[i])
            out.append(m)
    art.save_matches(out, ctx.work("matches.jsonl"))
    return f"{len(out)} pairs, {sum(len(m) for m in out)} landmark matches"


def stage_dist(ctx: Context) -> str:
    ids = ctx.item_ids()
    index = {ident: k for k, ident in enumerate(ids)}
    matches = art.load_matches(ctx.need(ctx.out / "matches.jsonl"))
    imgs = [ctx.preprocessed(i) for i in ids]
    ks = [ctx.features(i) for i in ids]
    metrics, dump = {}, []
    for m in matches:
        i, j = index[m.image_pair[0]], index[m.image_pair[1]]
        try:
            al = estimate_alignment(m, ks[i], ks[j])
        except InsufficientMatchesError:
            al = None
        pm = pair_metrics(imgs[i], imgs[j], ks[i], ks[j], m, al)
        metrics[(i, j)] = pm
        dump.append({"pair": [ids[i], ids[j]], "n_matched": pm.n_matched,
                     "weighted_euclid": pm.weighted_euclid, "ssim": pm.ssim})
    d = assemble_matrix(metrics, len(ids), ids)
    save_matrix(d, ctx.work("dissimilarity.csv"))
    ctx.work("metrics.json").write_text(art.dump_json({"version": art.VERSION, "pairs": dump}))
    n_missing = int(np.triu(d.missing_mask, 1).sum())
    return f"{len(ids)}x{len(ids)} matrix, {n_missing} missing pairs"


def stage_impute(ctx: Context) -> str:
    d = load_matrix(ctx.need(ctx.out / "dissimilarity.csv"))
    full = ultrametric_impute(d)
    save_matrix(full, ctx.work("imputed.csv"))
    return f"imputed {int(np.triu(d.missing_mask, 1).sum())} entries"


def stage_cluster(ctx: Context) -> str:
    c = ctx.cfg.cluster
    d = load_matrix(ctx.need(ctx.out / "imputed.csv"))
    trace = run_mcmc(d, c.mcmc(stage_seed(ctx.cfg.seed, "cluster")))
    est = estimate_partition_vi(trace)
    base = linkage_baseline(d, min(c.baseline_k, d.n))
    art.save_trace(trace, ctx.work("trace.atrc"))
    art.save_partition(est, ctx.work("partition.json"), {"ids": d.ids})
    art.save_partition(base, ctx.work("baseline.json"), {"ids": d.ids, "k": c.baseline_k})
    return f"estimated partition {format_sizes(est)}"


def stage_embed(ctx: Context) -> str:
    gt = ctx.truth()
    sets = [(ctx.features(i), k, int(lab)) for k, (i, lab) in enumerate(zip(gt.item_ids, gt.labels))]
    fm = build_feature_matrix(sets)
    e = ctx.cfg.embed
    emb = tsne(fm, e.perplexity, seed=stage_seed(ctx.cfg.seed, "embed"), iterations=e.iterations)
    counts = {}
    row_ids = []
    for img_id, _, _ in fm.provenance:
        row_ids.append(f"{img_id}:{counts.get(img_id, 0)}")
        counts[img_id] = counts.get(img_id, 0) + 1
    art.save_embedding(ctx.work("embedding.csv"), emb.points, row_ids, fm.set_ids(),
                       [-1] * fm.rows)
    ctx.work("embed.json").write_text(art.dump_json(
        {"version": art.VERSION, "rows": fm.rows, "initial_kl": emb.initial_kl,
         "final_kl": emb.final_kl}))
    return f"embedded {fm.rows} features, KL {emb.final_kl:.3f}"


def stage_kmeans(ctx: Context) -> str:
    pts, row_ids, set_ids, _ = art.load_embedding(ctx.need(ctx.out / "embedding.csv"))
    res = kmeans_fit(pts, ctx.cfg.embed.k, seed=stage_seed(ctx.cfg.seed, "kmeans"))
    labels = res.partition.array()
    art.save_embedding(ctx.work("clusters.csv"), pts, row_ids, set_ids, labels)
    image_ids = [r.rsplit(":", 1)[0] for r in row_ids]
    majority = image_majority(labels, image_ids)
    art.save_partition(res.partition, ctx.work("kmeans.json"),
                       {"wcss": res.wcss, "wcss_history": res.history,
                        "image_majority": {k: int(v) for k, v in sorted(majority.items())}})
    plotting.tsne_scatter(pts, set_ids, labels, ctx.work("tsne.svg"))
    return f"k-means k={ctx.cfg.embed.k}, sizes {format_sizes(res.partition)}"


def stage_contours(ctx: Context) -> str:
    c = ctx.cfg.contours
    ids = ctx.item_ids()
    cs = [extract_contour(ctx.raw_image(i), c.sigma, c.t_low, c.t_high, c.spacing, c.smooth,
                          ident=i) for i in ids]
    art.save_contours(cs, ctx.work("contours.json"))
    return f"{len(cs)} contours"


def stage_sherd_match(ctx: Context) -> str:
    c = ctx.cfg.contours
    cs = art.load_contours(ctx.need(ctx.out / "contours.json"))
    reports = reconstruct_pairs(cs, stride=c.stride, window_fraction=c.window_fraction)
    art.save_reports(reports, ctx.work("sherd_matches.json"))
    by_id = {x.ident: x for x in cs}
    for rank, r in enumerate(reports[:OVERLAYS]):
        a, b = by_id[r.pair[0]], by_id[r.pair[1]]
        wins = [(window_points(a, m.start_a, m.window_len),
                 window_points(b, m.start_b, m.window_len, m.reversed_b)) for m in r.matches]
        plotting.sherd_overlay(ctx.raw_image(a.ident).data, ctx.raw_image(b.ident).data,
                               a.points, b.points, wins,
                               ctx.work("overlays", f"{rank + 1:02d}_{a.ident}_{b.ident}.png"),
                               title=f"{a.ident} / {b.ident}  score {r.best_score:.4g}")
    return f"{len(reports)} pair reports"


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _truth_partition(ctx: Context) -> Partition:
    return Partition(ctx.truth().labels)


def _eval_clusters(ctx: Context) -> tuple[dict, list]:
    truth = _truth_partition(ctx)
    est = art.load_partition(ctx.need(ctx.out / "partition.json"))
    base = art.load_partition(ctx.need(ctx.out / "baseline.json"))
    r, rb = rand_index(est, truth), rand_index(base, truth)
    plotting.cluster_report(est.array(), truth.array(), ctx.work("cluster_report.png"))
    lines = [f"Rand index vs truth: {r:.2f}",
             f"Cluster sizes: {format_sizes(est)}",
             f"Baseline (average linkage, k={ctx.cfg.cluster.baseline_k}) Rand index: {rb:.2f}"]
    return {"rand": r, "sizes": est.sizes(), "baseline_rand": rb}, lines


def _eval_kmeans(ctx: Context) -> tuple[dict, list]:
    part = art.load_partition(ctx.need(ctx.out / "kmeans.json"))
    _, _, set_ids, _ = art.load_embedding(ctx.need(ctx.out / "clusters.csv"))
    truth = Partition(set_ids)
    r = rand_index(part, truth)
    plotting.cluster_report(part.array(), set_ids, ctx.work("cluster_report.png"))
    lines = [f"Rand index vs truth: {r:.2f}", f"Cluster sizes: {format_sizes(part)}"]
    return {"rand": r, "sizes": part.sizes()}, lines


def load_pieces(corpus: Path, ids: list) -> list:
    geo = corpus / "geometry"
    meta = json.loads((geo / "pieces.json").read_text())
    out = []
    for ident in ids:
        vm = load_image(geo / f"{ident}.png").data > 0.5
        img = load_image(corpus / f"{ident}.png")
        out.append(SherdPiece(img, img.data < 1.0, vm, float(meta[ident]["rotation"]),
                              tuple(meta[ident]["offset"])))
    return out


def reconstruction_scores(reports: list, contours: dict, pieces: dict, adjacency) -> dict:
    """Mates-in-top-k rate and rate of adjacent pairs beating the non-adjacent median."""
    adj = {tuple(sorted(p)) for p in adjacency}
    best = {tuple(sorted(r.pair)): r for r in reports}
    non = [r.best_score for k, r in best.items() if k not in adj]
    med = float(np.median(non)) if non else float("inf")
    hits = above = 0
    for key in sorted(adj):
        r = best[key]
        a, b = contours[r.pair[0]], contours[r.pair[1]]
        hits += any(is_mating(pieces[r.pair[0]], pieces[r.pair[1]],
                              window_points(a, m.start_a, m.window_len),
                              window_points(b, m.start_b, m.window_len, m.reversed_b))
                    for m in r.matches)
        above += r.best_score < med
    n = max(len(adj), 1)
    return {"adjacent_pairs": len(adj), "mate_in_top_k": hits / n,
            "above_nonadjacent_median": above / n, "nonadjacent_median": med}


def _eval_reconstruct(ctx: Context) -> tuple[dict, list]:
    gt = ctx.truth()
    reports = art.load_reports(ctx.need(ctx.out / "sherd_matches.json"))
    cs = {c.ident: c for c in art.load_contours(ctx.need(ctx.out / "contours.json"))}
    ctx.need(ctx.inp / "geometry" / "pieces.json")
    ids = list(gt.item_ids)
    pieces = dict(zip(ids, load_pieces(ctx.inp, ids)))
    adjacency = [(ids[i], ids[j]) for i, j in gt.adjacency]
    s = reconstruction_scores(reports, cs, pieces, adjacency)
    lines = [f"Adjacent pairs: {s['adjacent_pairs']}",
             f"Mating location in top-3: {s['mate_in_top_k']:.2f}",
             f"Adjacent above non-adjacent median: {s['above_nonadjacent_median']:.2f}"]
    return s, lines


def stage_eval(ctx: Context) -> str:
    kind = ctx.cfg.pipeline
    if kind == "coins":
        res, lines = _eval_clusters(ctx)
    elif kind == "ceramics-cluster":
        res, lines = _eval_kmeans(ctx)
    elif kind == "ceramics-reconstruct":
        res, lines = _eval_reconstruct(ctx)
    else:
        raise ConfigError("eval needs pipeline coins, ceramics-cluster or ceramics-reconstruct")
    ctx.work("eval.json").write_text(art.dump_json({"version": art.VERSION, **res}))
    return "\n".join(lines)


RUNNERS = {
    "synth": stage_synth, "preprocess": stage_preprocess, "detect": stage_detect,
    "match": stage_match, "dist": stage_dist, "impute": stage_impute,
    "cluster": stage_cluster, "eval": stage_eval, "embed": stage_embed,
    "kmeans": stage_kmeans, "contours": stage_contours, "sherd-match": stage_sherd_match,
}


def run_stage(cfg: RunConfig, stage: str) -> str:
    if stage not in RUNNERS:
        raise ConfigError(f"unknown stage {stage!r}")
    ctx = Context(cfg)
    if stage != "synth" and not ctx.inp.is_dir():
        raise DependencyError(f"input directory does not exist: {ctx.inp}")
    return RUNNERS[stage](ctx)


__all__ = ["STAGES", "run_stage", "stage_seed", "reconstruction_scores", "load_pieces"]
