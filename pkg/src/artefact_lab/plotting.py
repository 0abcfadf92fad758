"""Report figures.  Output bytes depend only on the inputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["svg.hashsalt"] = "artefact-lab"

_SVG_META = {"Date": None, "Creator": None}
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    path = Path(path)
    meta = _SVG_META if path.suffix == ".svg" else _PNG_META
    fig.savefig(path, metadata=meta, dpi=100)
    plt.close(fig)


def tsne_scatter(points, truth, clusters, path, title="t-SNE embedding") -> None:
    """Fill colour is the true set, edge colour the k-means cluster."""
    points = np.asarray(points, dtype=np.float64)
    truth = np.asarray(truth)
    clusters = np.asarray(clusters)
    cmap = plt.get_cmap("tab10")
    fig, ax = plt.subplots(figsize=(6, 6))
    for t in np.unique(truth):
        sel = truth == t
        ax.scatter(points[sel, 0], points[sel, 1], s=14, color=cmap(int(t) % 10),
                   edgecolors=[cmap((int(c) + 5) % 10) for c in clusters[sel]],
                   linewidths=0.8, label=f"set {int(t) + 1}")
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    ax.legend(loc="best", fontsize=8, frameon=False)
    _save(fig, path)


def cluster_report(labels, truth, path, title="Cluster composition") -> None:
    """Stacked bars: one per estimated cluster, split by true group."""
    labels = np.asarray(labels)
    truth = np.asarray(truth)
    ks = np.unique(labels)
    ts = np.unique(truth)
    counts = np.array([[np.sum((labels == k) & (truth == t)) for t in ts] for k in ks])
    cmap = plt.get_cmap("tab10")
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(ks) + 2), 4))
    bottom = np.zeros(len(ks))
    for col, t in enumerate(ts):
        ax.bar(np.arange(len(ks)), counts[:, col], bottom=bottom, color=cmap(int(t) % 10),
               label=f"true {int(t) + 1}")
        bottom += counts[:, col]
    ax.set_xticks(np.arange(len(ks)), [str(int(k) + 1) for k in ks])
    ax.set_xlabel("estimated cluster")
    ax.set_ylabel("items")
    ax.set_title(title)
    ax.legend(fontsize=8, frameon=False)
    _save(fig, path)


def sherd_overlay(img_a, img_b, pts_a, pts_b, windows, path, title="") -> None:
    """Both sherds with their contours; matched windows drawn in rank colours."""
    colors = ("tab:red", "tab:orange", "tab:green")
    fig, axes = plt.subplots(1, 2, figsize=(8, 4))
    for ax, img, pts, side in ((axes[0], img_a, pts_a, 0), (axes[1], img_b, pts_b, 1)):
        ax.imshow(img, cmap="gray", vmin=0.0, vmax=1.0)
        closed = np.vstack([pts, pts[:1]])
        ax.plot(closed[:, 0], closed[:, 1], color="tab:blue", lw=0.8)
        for rank, w in enumerate(windows):
            seg = w[side]
            ax.plot(seg[:, 0], seg[:, 1], color=colors[rank % len(colors)], lw=2.5,
                    label=f"match {rank + 1}" if side == 0 else None)
        lo, hi = pts.min(axis=0) - 12, pts.max(axis=0) + 12
        ax.set_xlim(lo[0], hi[0])
        ax.set_ylim(hi[1], lo[1])
        ax.set_axis_off()
    if windows:
        axes[0].legend(loc="lower left", fontsize=8, frameon=False)
    if title:
        fig.suptitle(title)
    _save(fig, path)
