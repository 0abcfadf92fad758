"""Procedural ground-truth corpora: die-struck coins and fractured vessels.

Both generators are pure functions of their seed and specs.  Each item
draws from its own PRNG stream spawned from the master seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .raster import RasterImage, save_png


@dataclass(frozen=True)
class SynthDieSpec:
    seed: int = 0
    n_rays: int = 12
    n_pellets: int = 29
    engraving_jitter: float = 2.0

    def __post_init__(self):
        if not 27 <= self.n_pellets <= 31:
            raise ValueError("n_pellets must lie in [27, 31]")
        if self.engraving_jitter < 0:
            raise ValueError("engraving_jitter must be non-negative")


@dataclass(frozen=True)
class StrikeSpec:
    rotation: float = 0.05
    translation: float = 4.0
    wear: float = 0.2
    noise: float = 0.03
    lighting: float = 0.1

    def __post_init__(self):
        if min(self.rotation, self.translation, self.noise, self.lighting) < 0:
            raise ValueError("strike ranges must be non-negative")
        if not 0.0 <= self.wear <= 1.0:
            raise ValueError("wear must lie in [0, 1]")


@dataclass
class GroundTruth:
    item_ids: list
    labels: list
    adjacency: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.item_ids) != len(self.labels):
            raise ValueError("partition must cover every item")
        n = len(self.item_ids)
        for i, j in self.adjacency:
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError("adjacency references an unknown item")

    def to_json(self) -> dict:
        return {"item_ids": list(self.item_ids), "labels": [int(x) for x in self.labels],
                "adjacency": [[int(i), int(j)] for i, j in self.adjacency]}

    @classmethod
    def from_json(cls, d: dict) -> "GroundTruth":
        return cls(d["item_ids"], d["labels"], [tuple(p) for p in d.get("adjacency", [])])


def _streams(seed: int, n: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


# ---------------------------------------------------------------------------
# Coins
# ---------------------------------------------------------------------------

SIZE = 300
FLAN_RADIUS = 125.0


def _die_elements(rng, spec: SynthDieSpec):
    """Geometric primitives of one die, in flan-centred coordinates.

    Discs are (x, y, r, height); strokes are (x0, y0, x1, y1, half_width, height).
    """
    jit = spec.engraving_jitter

    def j(n=None):
        return rng.normal(0.0, jit, n)

    discs, strokes = [], []
    sun_r = rng.uniform(26, 36)
    sun_y = rng.uniform(-10, 10) + j()
    sun_x = j()
    discs.append((sun_x, sun_y, sun_r, 1.0))
    # horizon bar and two wave strokes below the sun
    bar_y = sun_y + sun_r + rng.uniform(6, 12)
    discs_y = bar_y + rng.uniform(12, 20)
    strokes.append((-70 + j(), bar_y + j(), 70 + j(), bar_y + j(), 2.5, 0.9))
    for k in range(2):
        y = discs_y + 12 * k
        xs = np.linspace(-55, 55, 6) + j(6)
        ys = y + np.array([0, 5, 0, 5, 0, 5]) * rng.uniform(0.6, 1.4) + j(6)
        for a in range(5):
            strokes.append((xs[a], ys[a], xs[a + 1], ys[a + 1], 1.6, 0.75))
    # rays fanning above the bar
    n_rays = max(4, spec.n_rays + int(rng.integers(-2, 3)))
    angles = np.linspace(math.pi * 1.05, math.pi * 1.95, n_rays) + rng.normal(0, 0.05, n_rays)
    for a in angles:
        r0 = sun_r + rng.uniform(4, 8)
        r1 = r0 + rng.uniform(25, 55)
        strokes.append((sun_x + r0 * math.cos(a), sun_y + r0 * math.sin(a),
                        sun_x + r1 * math.cos(a), sun_y + r1 * math.sin(a),
                        rng.uniform(1.6, 2.8), 0.85))
    # pellet border
    phase = rng.uniform(0, 2 * math.pi)
    ring = FLAN_RADIUS * 0.86
    for k in range(spec.n_pellets):
        a = phase + 2 * math.pi * k / spec.n_pellets
        discs.append((ring * math.cos(a) + j(), ring * math.sin(a) + j(), rng.uniform(3.5, 5.0), 0.9))
    # die-specific engraving flaws
    for _ in range(int(rng.integers(8, 13))):
        rad = rng.uniform(0, FLAN_RADIUS * 0.75)
        a = rng.uniform(0, 2 * math.pi)
        x, y = rad * math.cos(a), rad * math.sin(a)
        if rng.random() < 0.5:
            discs.append((x, y, rng.uniform(2.0, 3.5), 0.8))
        else:
            t = rng.uniform(0, math.pi)
            ln = rng.uniform(6, 14)
            strokes.append((x, y, x + ln * math.cos(t), y + ln * math.sin(t), 1.3, 0.8))
    return discs, strokes


def _render_relief(discs, strokes, xx, yy):
    relief = np.zeros_like(xx)
    for x, y, r, hgt in discs:
        x0, x1 = int(max(x - r - 3, xx[0, 0])), int(min(x + r + 4, xx[0, -1] + 1))
        y0, y1 = int(max(y - r - 3, yy[0, 0])), int(min(y + r + 4, yy[-1, 0] + 1))
        if x0 >= x1 or y0 >= y1:
            continue
        sl = (slice(y0 - int(yy[0, 0]), y1 - int(yy[0, 0])), slice(x0 - int(xx[0, 0]), x1 - int(xx[0, 0])))
        sdf = r - np.hypot(xx[sl] - x, yy[sl] - y)
        relief[sl] = np.maximum(relief[sl], hgt * np.clip(sdf * 0.7 + 0.5, 0, 1))
    for x0, y0, x1, y1, hw, hgt in strokes:
        dx, dy = x1 - x0, y1 - y0
        ln2 = dx * dx + dy * dy or 1e-12
        t = np.clip(((xx - x0) * dx + (yy - y0) * dy) / ln2, 0, 1)
        sdf = hw - np.hypot(xx - (x0 + t * dx), yy - (y0 + t * dy))
        relief = np.maximum(relief, hgt * np.clip(sdf * 0.7 + 0.5, 0, 1))
    return relief


def _strike_coin(discs, strokes, rng, strike: StrikeSpec):
    rot = rng.uniform(-strike.rotation, strike.rotation)
    tx, ty = rng.uniform(-strike.translation, strike.translation, 2)
    c, s = math.cos(rot), math.sin(rot)
    cx, cy = SIZE / 2 + tx, SIZE / 2 + ty

    def place(x, y):
        return cx + c * x - s * y, cy + s * x + c * y

    d2 = [(*place(x, y), r, h) for x, y, r, h in discs]
    s2 = [(*place(x0, y0), *place(x1, y1), hw, h) for x0, y0, x1, y1, hw, h in strokes]
    yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    relief = _render_relief(d2, s2, xx, yy)
    if strike.wear > 0:
        field_ = ndimage.gaussian_filter(rng.random((SIZE, SIZE)), 12.0)
        field_ = (field_ - field_.min()) / (np.ptp(field_) + 1e-12)
        relief = ndimage.gaussian_filter(relief, 1.5 * strike.wear) * (1.0 - strike.wear * field_)
    flan_sdf = FLAN_RADIUS - np.hypot(xx - cx, yy - cy)
    flan = np.clip(flan_sdf * 0.7 + 0.5, 0, 1)
    img = 0.12 + flan * (0.38 + 0.45 * relief)
    if strike.lighting > 0:
        a = rng.uniform(0, 2 * math.pi)
        ramp = ((xx - SIZE / 2) * math.cos(a) + (yy - SIZE / 2) * math.sin(a)) / SIZE
        img = img + strike.lighting * ramp
    if strike.noise > 0:
        img = img + rng.normal(0.0, strike.noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_coin_corpus(n_dies: int = 5, coins_per_die: int = 12,
                      die_spec: SynthDieSpec = SynthDieSpec(),
                      strike: StrikeSpec = StrikeSpec(), seed: int = 0,
                      blank_coins: int = 0):
    """Struck coins from ``n_dies`` procedural dies.

    ``blank_coins`` appends flans with no design (each its own label),
    used to exercise the landmark exclusion rule.
    """
    if n_dies < 1 or coins_per_die < 1:
        raise ValueError("counts must be >= 1")
    die_rngs = _streams(seed, n_dies)
    coin_rngs = _streams(seed + 1_000_003, n_dies * coins_per_die + blank_coins)
    images, ids, labels = [], [], []
    for d in range(n_dies):
        pellets = 27 + int(die_rngs[d].integers(0, 5))
        spec = SynthDieSpec(die_spec.seed, die_spec.n_rays, pellets, die_spec.engraving_jitter)
        discs, strokes = _die_elements(die_rngs[d], spec)
        for c in range(coins_per_die):
            k = d * coins_per_die + c
            images.append(RasterImage(_strike_coin(discs, strokes, coin_rngs[k], strike)))
            ids.append(f"coin_{k:03d}")
            labels.append(d)
    for b in range(blank_coins):
        k = n_dies * coins_per_die + b
        images.append(RasterImage(_strike_coin([], [], coin_rngs[k], strike)))
        ids.append(f"coin_{k:03d}")
        labels.append(n_dies + b)
    return images, GroundTruth(ids, labels)


# ---------------------------------------------------------------------------
# Sherds
# ---------------------------------------------------------------------------

VESSEL_SIZE = 300
MIN_CONTACT_FRACTION = 0.22    # of vessel size


def _vessel_mask(rng, size=VESSEL_SIZE):
    """Filled vase profile: symmetric about a vertical axis, wobbly radius."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    top, bottom = 0.08 * size, 0.92 * size
    t = np.clip((yy - top) / (bottom - top), 0, 1)
    belly = rng.uniform(0.3, 0.42) * size
    neck = rng.uniform(0.12, 0.2) * size
    foot = rng.uniform(0.12, 0.2) * size
    phase = rng.uniform(0.45, 0.6)
    prof = np.where(t < phase,
                    neck + (belly - neck) * np.sin(0.5 * math.pi * np.minimum(t / phase, 1.0)) ** 1.5,
                    foot + (belly - foot) * np.cos(0.5 * math.pi * np.clip((t - phase) / (1 - phase), 0.0, 1.0)) ** 1.2)
    return (np.abs(xx - size / 2) <= prof) & (yy >= top) & (yy <= bottom)


def _texture(kind: int, rng, shape):
    """Decoration patterns that stay distinguishable under rotation."""
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    ang = rng.uniform(0, math.pi)
    u = xx * math.cos(ang) + yy * math.sin(ang)
    v = -xx * math.sin(ang) + yy * math.cos(ang)
    if kind == 0:      # fine incised lines
        pat = np.sin(2 * math.pi * u / rng.uniform(7, 9))
    elif kind == 1:    # broad painted bands
        pat = np.tanh(3 * np.sin(2 * math.pi * u / rng.uniform(26, 32)))
    elif kind == 2:    # impressed dot lattice
        period = rng.uniform(13, 16)
        du = (u % period) - period / 2
        dv = (v % period) - period / 2
        pat = 1.0 - 2.0 * np.exp(-(du ** 2 + dv ** 2) / 8.0)
    elif kind == 3:    # checker
        period = rng.uniform(16, 20)
        pat = np.tanh(4 * np.sin(2 * math.pi * u / period) * np.sin(2 * math.pi * v / period))
    else:              # concentric rings
        c = shape[0] / 2
        pat = np.sin(2 * math.pi * np.hypot(xx - c, yy - c) / rng.uniform(11, 13))
    return pat


def _fracture(mask, n_pieces, rng):
    """Jagged Voronoi partition of ``mask`` into connected pieces."""
    size = mask.shape[0]
    ys, xs = np.nonzero(mask)
    for _ in range(50):
        pick = rng.choice(len(xs), n_pieces, replace=False)
        seeds = np.stack([xs[pick], ys[pick]], axis=1).astype(np.float64)
        gaps = np.linalg.norm(seeds[:, None] - seeds[None], axis=2) + np.eye(n_pieces) * 1e9
        if gaps.min() > 0.45 * math.sqrt(mask.sum() / n_pieces):
            break
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dist = np.empty((n_pieces, size, size))
    for k, (sx, sy) in enumerate(seeds):
        wob = ndimage.gaussian_filter(rng.normal(0, 1, (size, size)), 6.0)
        wob *= 14.0 / (wob.std() + 1e-12)
        dist[k] = np.hypot(xx - sx, yy - sy) + wob
    labels = np.argmin(dist, axis=0)
    labels[~mask] = -1
    # keep the largest component of each label; orphans join a neighbour
    for _ in range(10):
        changed = False
        for k in range(n_pieces):
            comp, n = ndimage.label(labels == k)
            if n <= 1:
                continue
            sizes = np.bincount(comp.ravel())[1:]
            keep = 1 + int(np.argmax(sizes))
            orphan = (comp > 0) & (comp != keep)
            labels[orphan] = -2
            changed = True
        while (labels == -2).any():
            grown = ndimage.grey_dilation(np.where(labels >= 0, labels, -1), size=3)
            fill = (labels == -2) & (grown >= 0)
            if not fill.any():
                labels[labels == -2] = -1
                break
            labels[fill] = grown[fill]
        if not changed:
            break
    return labels


def _adjacent(labels, n_pieces, min_contact=20):
    pairs = []
    for k in range(n_pieces):
        grown = ndimage.binary_dilation(labels == k)
        touch = labels[grown & (labels != k) & (labels >= 0)]
        counts = np.bincount(touch, minlength=n_pieces)
        for j in range(k + 1, n_pieces):
            if counts[j] >= min_contact:
                pairs.append((k, j))
    return pairs


@dataclass
class SherdPiece:
    image: RasterImage
    mask: np.ndarray          # piece mask in its own image frame
    vessel_mask: np.ndarray   # piece mask in the vessel frame
    rotation: float
    offset: tuple             # image = R(rotation) @ (vessel - centroid) + offset

    def to_vessel(self, xy: np.ndarray) -> np.ndarray:
        """Map (x, y) points from the piece image back into the vessel frame."""
        ys, xs = np.nonzero(self.vessel_mask)
        cx, cy = xs.mean(), ys.mean()
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        p = np.asarray(xy, dtype=np.float64) - np.asarray(self.offset)
        return np.stack([c * p[:, 0] + s * p[:, 1] + cx, -s * p[:, 0] + c * p[:, 1] + cy], axis=1)


def is_mating(piece_a: SherdPiece, piece_b: SherdPiece, pts_a: np.ndarray, pts_b: np.ndarray,
              tol: float = 4.0) -> bool:
    """Whether two image-frame windows trace the same stretch of a shared cut.

    Both windows are mapped back into the vessel frame; ``pts_a`` must hug
    piece b's boundary and the two windows must coincide within ``tol`` px.
    """
    va = piece_a.to_vessel(pts_a)
    vb = piece_b.to_vessel(pts_b)
    out_b = ndimage.distance_transform_edt(~piece_b.vessel_mask)
    idx = np.clip(np.round(va).astype(int), 0, np.array(out_b.shape[::-1]) - 1)
    near_b = out_b[idx[:, 1], idx[:, 0]] <= tol
    gap = np.linalg.norm(va[:, None] - vb[None], axis=2).min(axis=1)
    return bool(near_b.mean() >= 0.9 and gap.mean() <= tol)


def _render_piece(vessel_img, piece_mask, rng, canvas, rotate=True):
    ys, xs = np.nonzero(piece_mask)
    cx, cy = xs.mean(), ys.mean()
    rot = rng.uniform(0, 2 * math.pi) if rotate else 0.0
    off = (canvas / 2 + rng.uniform(-10, 10), canvas / 2 + rng.uniform(-10, 10))
    c, s = math.cos(rot), math.sin(rot)
    # inverse map: image pixel -> vessel coordinates
    yy, xx = np.mgrid[0:canvas, 0:canvas].astype(np.float64)
    px, py = xx - off[0], yy - off[1]
    vx = c * px + s * py + cx
    vy = -s * px + c * py + cy
    m = ndimage.map_coordinates(piece_mask.astype(np.float64), [vy, vx], order=1, cval=0.0)
    tex = ndimage.map_coordinates(vessel_img, [vy, vx], order=1, mode="nearest")
    img = 1.0 - m * (1.0 - tex)
    return RasterImage(np.clip(img, 0, 1)), m > 0.5, rot, off


def synth_vessel(n_pieces: int, seed: int = 0, texture: int = 0, canvas: int = 520,
                 rotate: bool = True, size: int = 450, min_contact: int | None = None):
    """One fractured vessel: (pieces, adjacency pairs, silhouette mask).

    Two pieces count as adjacent when their shared break is at least
    ``min_contact`` pixels long (default 0.22 of the vessel size); shorter
    contacts are corner touches with no edge to mate.
    """
    if min_contact is None:
        min_contact = int(round(MIN_CONTACT_FRACTION * size))
    rng = np.random.default_rng(seed)
    mask = _vessel_mask(rng, size)
    tex = _texture(texture, rng, mask.shape)
    shade = rng.uniform(0.3, 0.5) + 0.12 * tex
    labels = _fracture(mask, n_pieces, rng) if n_pieces > 1 else np.where(mask, 0, -1)
    pieces = []
    for k in range(n_pieces):
        pm = labels == k
        img, m, rot, off = _render_piece(shade, pm, rng, canvas, rotate)
        pieces.append(SherdPiece(img, m, pm, rot, off))
    return pieces, _adjacent(labels, n_pieces, min_contact), mask


def split_square(size: int = 200, seed: int = 0, canvas: int = 360, rotate: bool = True,
                 roughness: float = 14.0):
    """A textured square cut top-to-bottom along a jagged random walk.

    Returns (pieces, cut) where ``cut`` holds the (x, y) cut path in the
    square's own frame.
    """
    rng = np.random.default_rng(seed)
    pad = (VESSEL_SIZE - size) // 2
    yy, xx = np.mgrid[0:VESSEL_SIZE, 0:VESSEL_SIZE].astype(np.float64)
    square = (xx >= pad) & (xx < pad + size) & (yy >= pad) & (yy < pad + size)
    walk = ndimage.gaussian_filter1d(rng.normal(0, 1, VESSEL_SIZE), 4.0)
    walk *= roughness / (walk.std() + 1e-12)
    cut_x = VESSEL_SIZE / 2 + walk
    left = square & (xx < cut_x[:, None])
    right = square & ~left
    shade = 0.4 + 0.1 * _texture(3, rng, square.shape)
    pieces = []
    for pm in (left, right):
        img, m, rot, off = _render_piece(shade, pm, rng, canvas, rotate)
        pieces.append(SherdPiece(img, m, pm, rot, off))
    rows = np.arange(pad, pad + size)
    return pieces, np.stack([cut_x[rows], rows.astype(np.float64)], axis=1)


def synth_sherd_sets(n_sets: int = 5, pieces=(7, 2, 2, 3, 2), seed: int = 0,
                     canvas: int = 360, rotate: bool = False):
    """Fractured, textured vessels; one set per vessel.

    ``pieces`` is either a (min, max) range sampled per set or an explicit
    per-set list of piece counts.  Pieces keep their vessel orientation
    unless ``rotate`` is set, as in oriented sherd photography.
    """
    pieces = tuple(pieces)
    if len(pieces) == n_sets and n_sets != 2:
        counts = list(pieces)
    elif len(pieces) == 2:
        lo, hi = pieces
        if not 2 <= lo <= hi:
            raise ValueError("need 2 <= min <= max pieces")
        crng = np.random.default_rng(seed)
        counts = [int(crng.integers(lo, hi + 1)) for _ in range(n_sets)]
    else:
        raise ValueError("pieces must be (min, max) or one count per set")
    seeds = np.random.SeedSequence(seed).generate_state(n_sets)
    images, ids, labels, adjacency, all_pieces = [], [], [], [], []
    for s, n in enumerate(counts):
        vessel, adj, _ = synth_vessel(n, int(seeds[s]), texture=s % 5, canvas=canvas,
                                      rotate=rotate, size=VESSEL_SIZE)
        base = len(images)
        for k, piece in enumerate(vessel):
            images.append(piece.image)
            ids.append(f"set{s + 1}_sherd{k + 1}")
            labels.append(s)
            all_pieces.append(piece)
        adjacency.extend((base + i, base + j) for i, j in adj)
    return images, GroundTruth(ids, labels, adjacency), all_pieces


def write_corpus(dirpath, images, truth: GroundTruth, spec: dict) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    for ident, img in zip(truth.item_ids, images):
        save_png(img, d / f"{ident}.png")
    (d / "ground_truth.json").write_text(json.dumps(truth.to_json(), indent=1) + "\n")
    (d / "spec.json").write_text(json.dumps(spec, indent=1, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(type(o))
