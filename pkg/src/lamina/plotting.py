"""Report figures: regional bar charts and a thickness QC slice.

Figures are rendered with the Agg backend and saved without a software
stamp so repeated runs produce identical files.
"""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PNG_META = {"Software": None}

plt.rcParams.update({
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 100,
})


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=PNG_META)
    plt.close(fig)
    return path


def stars(p: Optional[float], significant: Optional[bool]) -> str:
    """Star code for a p-value; empty unless the region passed FDR."""
    if p is None or not significant:
        return ""
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    return "*"


def _num(x):
    if x is None or x == "":
        return np.nan
    return float(x)


def _names(rows):
    return [str(r.get("region_name") or r.get("region_id")) for r in rows]


def group_bars(rows: Sequence[dict], path, subjects: Sequence[dict] = (), groups=("A", "B"),
               ylabel: str = "normalized measure"):
    """Per-region group means with per-subject spread and FDR stars."""
    rows = list(rows)
    x = np.arange(len(rows))
    ma = np.array([_num(r.get("group_mean_a")) for r in rows])
    mb = np.array([_num(r.get("group_mean_b")) for r in rows])
    fig, ax = plt.subplots(figsize=(max(3.0, 0.9 * len(rows) + 1.5), 3.0))
    w = 0.38
    err = []
    for g in groups:
        e = []
        for r in rows:
            k = r["region_id"]
            vals = [s["values"].get(k) for s in subjects if s["group"] == g]
            vals = [v for v in vals if v is not None]
            e.append(np.std(vals, ddof=1) if len(vals) > 1 else 0.0)
        err.append(e)
    ax.bar(x - w / 2, ma, w, yerr=err[0], label=groups[0], color="0.35", capsize=2)
    ax.bar(x + w / 2, mb, w, yerr=err[1], label=groups[1], color="0.75", capsize=2)
    top = np.nanmax(np.concatenate([ma + np.asarray(err[0]), mb + np.asarray(err[1]), [0.0]]))
    for i, r in enumerate(rows):
        s = stars(_num(r.get("p_value")) if r.get("p_value") not in (None, "") else None,
                  r.get("fdr_significant") in (True, "true"))
        if s:
            ax.text(x[i], 1.03 * top, s, ha="center", va="bottom")
    ax.set_xticks(x)
    ax.set_xticklabels(_names(rows), rotation=30, ha="right")
    ax.set_ylabel(ylabel)
    ax.set_ylim(0, 1.15 * top if top > 0 else 1.0)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def region_bars(rows: Sequence[dict], columns: Sequence[str], path, labels: Sequence[str] = None):
    """One panel per column, one bar per region (missing values left blank)."""
    rows = list(rows)
    labels = labels or columns
    fig, axes = plt.subplots(1, len(columns), figsize=(3.0 * len(columns), 2.8), squeeze=False)
    x = np.arange(len(rows))
    for ax, col, lab in zip(axes[0], columns, labels):
        ax.bar(x, [_num(r.get(col)) for r in rows], 0.6, color="0.45")
        ax.set_xticks(x)
        ax.set_xticklabels(_names(rows), rotation=30, ha="right")
        ax.set_title(lab)
    fig.tight_layout()
    return _save(fig, path)


def thickness_slice(t_gm: np.ndarray, gm: np.ndarray, path, mid: Optional[np.ndarray] = None,
                    axis: int = 1, index: Optional[int] = None):
    """QC slice of T_GM inside GM with the mid-layer overlaid."""
    t_gm, gm = np.asarray(t_gm), np.asarray(gm, bool)
    if index is None:
        index = t_gm.shape[axis] // 2
    sl = [slice(None)] * 3
    sl[axis] = index
    sl = tuple(sl)
    img = np.where(gm[sl], t_gm[sl], np.nan).T
    fig, ax = plt.subplots(figsize=(3.4, 3.0))
    vals = img[np.isfinite(img)]
    vmax = float(vals.max()) if vals.size else 1.0
    im = ax.imshow(img, origin="lower", cmap="viridis", vmin=0.0, vmax=vmax, interpolation="nearest")
    if mid is not None:
        m = np.asarray(mid, bool)[sl].T
        yy, xx = np.nonzero(m)
        ax.plot(xx, yy, ",", color="red")
    fig.colorbar(im, ax=ax, label="T_GM (mm)")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    return _save(fig, path)
