"""On-disk formats for every intermediate a stage hands to the next.

Binary formats carry a magic string with the version baked in; JSON
formats carry a ``version`` field.  All writers are byte-deterministic and
every reader restores exactly what its writer stored.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path

import numpy as np

from .contours import ContourPolyline, MatchReport, WindowMatch
from .dissimilarity import DissimilarityMatrix, load_matrix, save_matrix  # noqa: F401
from .errors import ArtifactVersionError
from .keypoints import export_descriptors, import_descriptors  # noqa: F401
from .matching import MatchSet
from .partition import McmcTrace, Partition

VERSION = 1
TRACE_MAGIC = b"ATRC1"
_STAT_KEYS = ("gibbs_moves", "split_proposed", "split_accepted",
              "merge_proposed", "merge_accepted", "sweeps")
EMBED_HEADER = ["row_id", "x", "y", "set_id", "cluster_id"]


def dump_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _check_version(obj: dict, kind: str):
    v = obj.get("version")
    if v != VERSION:
        raise ArtifactVersionError(f"{kind} schema version {v!r}, expected {VERSION}")


# ---------------------------------------------------------------------------
# Match dump (JSON lines)
# ---------------------------------------------------------------------------

def match_to_obj(m: MatchSet) -> dict:
    return {"version": VERSION, "pair": list(m.image_pair),
            "ia": m.ia.tolist(), "ib": m.ib.tolist(), "dist": m.dist.tolist(),
            "ranks": None if m.ranks is None else m.ranks.tolist()}


def match_from_obj(o: dict) -> MatchSet:
    _check_version(o, "match dump")
    ranks = o.get("ranks")
    return MatchSet(tuple(o["pair"]), np.array(o["ia"], dtype=np.int64),
                    np.array(o["ib"], dtype=np.int64), np.array(o["dist"], dtype=np.float64),
                    None if ranks is None else np.array(ranks, dtype=np.int64))


def save_matches(matches: list, path) -> None:
    lines = [json.dumps(match_to_obj(m), sort_keys=True) for m in matches]
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_matches(path) -> list:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(match_from_obj(json.loads(line)))
    return out


# ---------------------------------------------------------------------------
# Partition JSON
# ---------------------------------------------------------------------------

def partition_to_obj(p: Partition) -> dict:
    labels = list(p.labels)
    return {"version": VERSION, "n": p.n, "labels": labels,
            "cluster_sizes": np.bincount(labels, minlength=p.k).tolist() if labels else []}


def save_partition(p: Partition, path, extra: dict | None = None) -> None:
    obj = partition_to_obj(p)
    if extra:
        obj.update(extra)
    Path(path).write_text(dump_json(obj))


def load_partition(path) -> Partition:
    obj = json.loads(Path(path).read_text())
    _check_version(obj, "partition")
    p = Partition(obj["labels"])
    if p.n != obj["n"] or list(p.labels) != list(obj["labels"]):
        raise ValueError("partition JSON is not in canonical form")
    return p


# ---------------------------------------------------------------------------
# MCMC trace (binary)
# ---------------------------------------------------------------------------

def save_trace(t: McmcTrace, path) -> None:
    """Magic, u32 n, u32 samples, u64 x 6 statistics, u32 labels, f64 log-posteriors."""
    s, n = t.samples.shape
    head = TRACE_MAGIC + struct.pack("<II", n, s)
    head += struct.pack("<6Q", *(int(t.stats.get(k, 0)) for k in _STAT_KEYS))
    body = t.samples.astype("<u4").tobytes() + t.log_posterior.astype("<f8").tobytes()
    Path(path).write_bytes(head + body)


def load_trace(path) -> McmcTrace:
    raw = Path(path).read_bytes()
    if raw[:len(TRACE_MAGIC)] != TRACE_MAGIC:
        raise ArtifactVersionError("bad magic; not an ATRC1 trace file")
    off = len(TRACE_MAGIC)
    n, s = struct.unpack_from("<II", raw, off)
    off += 8
    stats = dict(zip(_STAT_KEYS, struct.unpack_from("<6Q", raw, off)))
    off += 48
    if len(raw) - off != s * n * 4 + s * 8:
        raise ValueError("trace body length does not match header")
    labels = np.frombuffer(raw, dtype="<u4", count=s * n, offset=off).reshape(s, n)
    lp = np.frombuffer(raw, dtype="<f8", count=s, offset=off + s * n * 4)
    return McmcTrace(labels.astype(np.int64), lp.astype(np.float64), stats)


# ---------------------------------------------------------------------------
# Embedding CSV
# ---------------------------------------------------------------------------

def save_embedding(path, points: np.ndarray, row_ids, set_ids, cluster_ids) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EMBED_HEADER)
    for rid, (x, y), s, c in zip(row_ids, np.asarray(points, dtype=np.float64), set_ids, cluster_ids):
        w.writerow([rid, repr(float(x)), repr(float(y)), int(s), int(c)])
    Path(path).write_text(buf.getvalue())


def load_embedding(path):
    """Return (points, row_ids, set_ids, cluster_ids)."""
    rows = list(csv.reader(io.StringIO(Path(path).read_text())))
    if not rows or rows[0] != EMBED_HEADER:
        raise ArtifactVersionError("embedding CSV header does not match")
    body = rows[1:]
    pts = np.array([[float(r[1]), float(r[2])] for r in body], dtype=np.float64).reshape(-1, 2)
    return (pts, [r[0] for r in body], np.array([int(r[3]) for r in body], dtype=np.int64),
            np.array([int(r[4]) for r in body], dtype=np.int64))


# ---------------------------------------------------------------------------
# Contours and sherd match reports
# ---------------------------------------------------------------------------

def contour_to_obj(c: ContourPolyline) -> dict:
    return {"version": VERSION, "id": c.ident, "spacing": c.spacing,
            "points": c.points.tolist()}


def contour_from_obj(o: dict) -> ContourPolyline:
    _check_version(o, "contour")
    return ContourPolyline(np.array(o["points"], dtype=np.float64), float(o["spacing"]), o["id"])


def save_contours(contours: list, path) -> None:
    Path(path).write_text(dump_json({"version": VERSION,
                                     "contours": [contour_to_obj(c) for c in contours]}))


def load_contours(path) -> list:
    obj = json.loads(Path(path).read_text())
    _check_version(obj, "contour set")
    return [contour_from_obj(o) for o in obj["contours"]]


def report_to_obj(r: MatchReport) -> dict:
    return {"pair": list(r.pair), "top_k": r.top_k,
            "matches": [{"start_a": m.start_a, "start_b": m.start_b, "window_len": m.window_len,
                         "reversed_b": m.reversed_b, "i1": m.i1, "i2": m.i2, "i3": m.i3,
                         "score": m.score} for m in r.matches]}


def report_from_obj(o: dict) -> MatchReport:
    ms = [WindowMatch(int(m["start_a"]), int(m["start_b"]), int(m["window_len"]),
                      bool(m["reversed_b"]), float(m["i1"]), float(m["i2"]), float(m["i3"]))
          for m in o["matches"]]
    return MatchReport(tuple(o["pair"]), ms, int(o["top_k"]))


def save_reports(reports: list, path) -> None:
    Path(path).write_text(dump_json({"version": VERSION,
                                     "reports": [report_to_obj(r) for r in reports]}))


def load_reports(path) -> list:
    obj = json.loads(Path(path).read_text())
    _check_version(obj, "match report")
    return [report_from_obj(o) for o in obj["reports"]]
