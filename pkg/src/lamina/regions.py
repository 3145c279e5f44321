"""Region-wise thickness summaries and two-group statistics."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from scipy import ndimage, stats

from .errors import DataError, ParameterError
from .grid import Volume, as_mask, check_geometry
from .volume_io import REPORT_COLUMNS

log = logging.getLogger(__name__)

FDR_Q = 0.1
TIV_MODES = ("ratio", "cuberoot")
MEASURES = ("mean_TGM", "mean_TGran", "mean_TMol", "volume_mm3", "purkinje_area_mm2")


def _labels(parcellation: Volume) -> np.ndarray:
    lab = np.asarray(parcellation.data)
    if not np.issubdtype(lab.dtype, np.integer):
        if not np.all(lab == np.round(lab)):
            raise DataError("parcellation must hold integer labels")
        lab = lab.astype(np.int64)
    if lab.min() < 0:
        raise DataError("parcellation labels must be >= 0")
    return lab


def region_ids(parcellation: Volume) -> List[int]:
    """Nonzero labels present in the parcellation, ascending."""
    lab = _labels(parcellation)
    return [int(k) for k in np.unique(lab) if k != 0]


def regional_means(values: Volume, where: Volume, parcellation: Volume) -> Dict[int, Optional[float]]:
    """Mean of ``values`` over ``where`` within each nonzero label.

    Labels with no voxel in ``where`` map to None (absent).
    """
    check_geometry(values, where, parcellation)
    lab = _labels(parcellation)
    m = as_mask(where) & (lab > 0)
    ids = region_ids(parcellation)
    if not ids:
        return {}
    n = max(ids) + 1
    cnt = np.bincount(lab[m], minlength=n)
    tot = np.bincount(lab[m], weights=np.asarray(values.data, dtype=np.float64)[m], minlength=n)
    return {k: (float(tot[k] / cnt[k]) if cnt[k] > 0 else None) for k in ids}


def region_counts(mask: Volume, parcellation: Volume) -> Dict[int, int]:
    check_geometry(mask, parcellation)
    lab = _labels(parcellation)
    m = as_mask(mask) & (lab > 0)
    ids = region_ids(parcellation)
    if not ids:
        return {}
    cnt = np.bincount(lab[m], minlength=max(ids) + 1)
    return {k: int(cnt[k]) for k in ids}


def tiv_normalize(values, tiv_mm3: float, mode: str = "ratio"):
    """Divide by TIV (``ratio``) or by its cube root (``cuberoot``). None stays None."""
    if not (isinstance(tiv_mm3, (int, float, np.floating, np.integer)) and math.isfinite(tiv_mm3)) \
            or tiv_mm3 <= 0:
        raise ParameterError(f"TIV must be finite and > 0, got {tiv_mm3}")
    if mode not in TIV_MODES:
        raise ParameterError(f"TIV mode must be one of {TIV_MODES}, got {mode!r}")
    div = float(tiv_mm3) if mode == "ratio" else float(tiv_mm3) ** (1.0 / 3.0)
    if isinstance(values, Mapping):
        return {k: (None if v is None else v / div) for k, v in values.items()}
    return np.asarray(values, dtype=np.float64) / div


@dataclass
class WelchResult:
    t: Optional[float]
    p: Optional[float]
    df: Optional[float]
    mean_a: Optional[float]
    mean_b: Optional[float]
    flag: str = ""


def group_compare(a: Sequence[float], b: Sequence[float]) -> WelchResult:
    """Welch two-sample t test (two-sided) with Welch-Satterthwaite df."""
    a = np.asarray([x for x in a if x is not None and np.isfinite(x)], dtype=np.float64)
    b = np.asarray([x for x in b if x is not None and np.isfinite(x)], dtype=np.float64)
    ma = float(a.mean()) if a.size else None
    mb = float(b.mean()) if b.size else None
    if a.size < 2 or b.size < 2:
        return WelchResult(None, None, None, ma, mb, "skipped: fewer than 2 subjects in a group")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    se2 = va + vb
    diff = ma - mb
    if se2 == 0:
        if diff == 0:
            return WelchResult(0.0, 1.0, None, ma, mb, "zero variance, equal means")
        return WelchResult(math.copysign(math.inf, diff), 0.0, None, ma, mb, "zero variance")
    t = diff / math.sqrt(se2)
    df = se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    p = float(min(1.0, 2.0 * stats.t.sf(abs(t), df)))
    return WelchResult(float(t), p, float(df), ma, mb)


def fdr_correct(p_values: Sequence[Optional[float]], q: float = FDR_Q) -> np.ndarray:
    """Benjamini-Hochberg step-up decisions. None/NaN entries are untested (False)."""
    if not 0.0 < q < 1.0:
        raise ParameterError(f"q must be in (0, 1), got {q}")
    p = np.array([np.nan if v is None else float(v) for v in p_values], dtype=np.float64)
    tested = np.flatnonzero(np.isfinite(p))
    out = np.zeros(p.size, dtype=bool)
    m = tested.size
    if m == 0:
        return out
    order = tested[np.argsort(p[tested], kind="stable")]
    crit = q * np.arange(1, m + 1) / m
    ok = np.flatnonzero(p[order] <= crit)
    if ok.size:
        out[order[: ok[-1] + 1]] = True
    return out


def purkinje_area(m_pf: Volume, vhat: Volume, where: Optional[Volume] = None):
    """Sheet area (mm^2): voxel volume over the voxel's extent along V-hat.

    Voxels with a zero V-hat take the dominant axis of the nearest voxel
    with a defined direction (or the largest spacing if there is none).
    Returns ``(area, n_fallback)``.
    """
    check_geometry(m_pf, vhat)
    m = as_mask(m_pf)
    if where is not None:
        check_geometry(m_pf, where)
        m = m & as_mask(where)
    sp = np.asarray(m_pf.spacing, dtype=np.float64)
    V = np.asarray(vhat.data, dtype=np.float64)
    ext = np.abs(V) @ sp
    bad = m & ~(ext > 0)
    nfb = int(bad.sum())
    if nfb:
        good = ext > 0
        if good.any():
            idx = ndimage.distance_transform_edt(~good, sampling=sp, return_distances=False,
                                                 return_indices=True)
            src = V[tuple(i[bad] for i in idx)]
            ext[bad] = sp[np.argmax(np.abs(src), axis=1)]
        else:
            ext[bad] = sp.max()
        log.warning("purkinje area: %d voxels without direction used the fallback extent", nfb)
    area = float(np.sum(np.prod(sp) / ext[m]))
    return area, nfb


def region_areas(m_pf: Volume, vhat: Volume, parcellation: Volume) -> Dict[int, float]:
    check_geometry(m_pf, vhat, parcellation)
    lab = _labels(parcellation)
    out = {}
    for k in region_ids(parcellation):
        out[k] = purkinje_area(m_pf, vhat, parcellation.like(lab == k))[0]
    return out


def subject_region_stats(parcellation: Volume, gm: Volume, m_pf: Volume, d_wm: Volume,
                         d_pial: Volume, t_gm: Volume, vhat: Volume,
                         names: Optional[Mapping[int, str]] = None) -> List[dict]:
    """One row per region for a single subject (REPORT_COLUMNS subset)."""
    check_geometry(parcellation, gm, m_pf, d_wm, d_pial, t_gm, vhat)
    vv = float(np.prod(gm.spacing))
    counts = region_counts(gm, parcellation)
    tg = regional_means(t_gm, m_pf, parcellation)
    gr = regional_means(d_wm, m_pf, parcellation)
    mo = regional_means(d_pial, m_pf, parcellation)
    ar = region_areas(m_pf, vhat, parcellation)
    rows = []
    for k in region_ids(parcellation):
        rows.append({
            "region_id": k, "region_name": (names or {}).get(k, f"region_{k}"),
            "n_voxels": counts[k], "volume_mm3": counts[k] * vv,
            "mean_TGM": tg[k], "mean_TGran": gr[k], "mean_TMol": mo[k],
            "purkinje_area_mm2": ar[k],
        })
    return rows


@dataclass
class RegionReport:
    rows: List[dict]
    provenance: dict = field(default_factory=dict)
    subjects: List[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"provenance": self.provenance, "rows": self.rows,
                           "subjects": self.subjects}, indent=2, sort_keys=True,
                          default=_jsonable)


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.bool_):
        return bool(x)
    raise TypeError(type(x))


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def cohort_report(subjects: Sequence[dict], measure: str = "mean_TGM", tiv_mode: str = "ratio",
                  q: float = FDR_Q, groups: Sequence[str] = ("A", "B")) -> RegionReport:
    """Compare two groups region by region.

    ``subjects`` items hold ``id``, ``group``, ``tiv`` (mm^3 or None) and
    ``rows`` from :func:`subject_region_stats`. Descriptive columns are
    cohort means of the per-subject values; the group means, t and p refer
    to ``measure`` after TIV normalization (skipped when ``tiv`` is None).
    """
    if measure not in MEASURES:
        raise ParameterError(f"measure must be one of {MEASURES}, got {measure!r}")
    if tiv_mode not in TIV_MODES:
        raise ParameterError(f"TIV mode must be one of {TIV_MODES}, got {tiv_mode!r}")
    ga, gb = groups
    ids = sorted({r["region_id"] for s in subjects for r in s["rows"]})
    per = []
    for s in subjects:
        if s["group"] not in groups:
            raise DataError(f"subject {s['id']}: group {s['group']!r} not in {list(groups)}")
        rows = {r["region_id"]: r for r in s["rows"]}
        vals = {}
        for k in ids:
            v = rows.get(k, {}).get(measure)
            if v is not None and s.get("tiv") is not None:
                v = tiv_normalize([v], s["tiv"], tiv_mode)[0]
            vals[k] = None if v is None else float(v)
        per.append({"id": s["id"], "group": s["group"], "tiv": s.get("tiv"), "values": vals})
    out_rows, pvals = [], []
    for k in ids:
        rs = [{r["region_id"]: r for r in s["rows"]}.get(k) for s in subjects]
        rs = [r for r in rs if r is not None]
        a = [p["values"][k] for p in per if p["group"] == ga]
        b = [p["values"][k] for p in per if p["group"] == gb]
        w = group_compare(a, b)
        if w.flag:
            log.info("region %s: %s", k, w.flag)
        row = {
            "region_id": k, "region_name": rs[0]["region_name"] if rs else f"region_{k}",
            "n_voxels": _mean([r["n_voxels"] for r in rs]),
            "volume_mm3": _mean([r["volume_mm3"] for r in rs]),
            "mean_TGM": _mean([r["mean_TGM"] for r in rs]),
            "mean_TGran": _mean([r["mean_TGran"] for r in rs]),
            "mean_TMol": _mean([r["mean_TMol"] for r in rs]),
            "purkinje_area_mm2": _mean([r["purkinje_area_mm2"] for r in rs]),
            "group_mean_a": w.mean_a, "group_mean_b": w.mean_b,
            "t_stat": w.t, "p_value": w.p, "fdr_significant": None, "flag": w.flag,
        }
        out_rows.append(row)
        pvals.append(w.p)
    dec = fdr_correct(pvals, q) if out_rows else np.zeros(0, bool)
    for row, d in zip(out_rows, dec):
        row["fdr_significant"] = bool(d) if row["p_value"] is not None else None
    prov = {"test": "Welch two-sample t, two-sided", "fdr": "Benjamini-Hochberg", "q": q,
            "measure": measure, "tiv_mode": tiv_mode, "groups": list(groups),
            "n_a": sum(p["group"] == ga for p in per), "n_b": sum(p["group"] == gb for p in per)}
    return RegionReport(out_rows, prov, per)


def single_report(rows: List[dict]) -> RegionReport:
    """Report for one subject: group and test columns left empty."""
    out = []
    for r in rows:
        r = dict(r)
        for c in REPORT_COLUMNS:
            r.setdefault(c, None)
        out.append(r)
    return RegionReport(out, {"subjects": 1})
