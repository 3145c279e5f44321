"""Stage orchestration over files.

Every stage reads its inputs from the files written by the previous stage
and persists its own outputs, so any stage can be re-run or inspected on
its own. A manifest lists every artifact with its content hash.

Output layout (relative to ``out_dir``)::

    landmarks.json
    subjects/<id>/<id>_std.nii, _post<k>.nii, _wm.nii, _gm.nii,
        _geod.nii, _fissures.nii, _pial.nii, _psi.nii, _vhat{x,y,z}.nii,
        _dwm.nii, _dpial.nii, _tgm.nii, _mp0.nii, _mpf.nii, _lambda.nii,
        _sublayers.csv, <id>_<stage>.json
    report.csv, report.json, report_*.png, manifest.json
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from . import plotting
from .errors import ConvergenceError, DataError, FormatError, LaminaError, ParameterError
from .fissures import extract_fissures
from .grid import Volume, as_mask, check_geometry
from .purkinje import (PlanarFilterParams, extrapolate_purkinje, initial_purkinje,
                       planar_response, sublayer_thickness, write_sublayer_csv)
from .regions import (MEASURES, TIV_MODES, RegionReport, cohort_report, single_report,
                      subject_region_stats)
from .segment import TISSUES, fit_em, hard_segment, parse_class_map
from .standardize import LandmarkModel, standardize, train_landmarks
from .thickness import ThicknessBundle, compute_thickness
from .volume_io import read_header, read_vector_field, read_volume, write_region_report, \
    write_vector_field, write_volume

log = logging.getLogger(__name__)

STAGES = ("standardize", "segment", "fissures", "thickness", "purkinje", "sublayers", "stats")

DEFAULT_PARAMS = {
    "standardize": {"scale": [0.0, 1000.0]},
    "segment": {"K": 4, "tol": 1e-6, "max_iter": 200},
    "fissures": {"sigma_voxels": 1.5, "min_size": 20},
    "thickness": {"tol": 1e-6, "max_iter": 5000, "stream_tol": 1e-6, "stream_max_iter": 1000},
    "purkinje": {"scale": 0.04, "alpha": 0.5, "beta": 0.5, "c": None, "tau_p": 0.05,
                 "min_size": 5, "levels": 10, "sigma_max": 15.0, "sigma_min": 1.0,
                 "tau_lambda": 0.1},
    "sublayers": {},
    "stats": {"q": 0.1, "tiv_mode": "ratio", "measure": "mean_TGM", "groups": ["A", "B"]},
}

CONFIG_KEYS = {"out_dir", "subjects", "class_map", "params", "workers"}
SUBJECT_KEYS = {"id", "image", "mask", "parcellation", "group", "priors", "tiv", "region_names"}


# ---------------------------------------------------------------------------
# configuration

@dataclass
class SubjectConfig:
    id: str
    image: str
    mask: str
    parcellation: str
    group: Optional[str] = None
    priors: Optional[List[str]] = None
    tiv: Union[float, str, None] = "mask"  # mm^3, "mask" (from the mask volume) or None
    region_names: Dict[int, str] = field(default_factory=dict)

    def inputs(self) -> List[str]:
        return [self.image, self.mask, self.parcellation] + list(self.priors or [])


@dataclass
class RunConfig:
    out_dir: str
    subjects: List[SubjectConfig]
    class_map: Dict[int, str]
    params: Dict[str, dict]
    workers: int = 1

    @classmethod
    def from_dict(cls, d: dict, base_dir: Union[str, os.PathLike, None] = None) -> "RunConfig":
        """Validate a config mapping; relative paths resolve against ``base_dir``."""
        if not isinstance(d, dict):
            raise ParameterError("config must be a JSON object")
        _reject_unknown(d, CONFIG_KEYS, "config")
        for k in ("out_dir", "subjects", "class_map"):
            if k not in d:
                raise ParameterError(f"config: missing key {k!r}")
        base = Path(base_dir) if base_dir is not None else Path.cwd()
        res = lambda p: str(p if Path(p).is_absolute() else base / p)
        subs = d["subjects"]
        if not isinstance(subs, list) or not subs:
            raise ParameterError("config: subjects must be a non-empty list")
        out, seen = [], set()
        for i, s in enumerate(subs):
            if not isinstance(s, dict):
                raise ParameterError(f"config: subject {i} must be an object")
            _reject_unknown(s, SUBJECT_KEYS, f"subject {i}")
            for k in ("id", "image", "mask", "parcellation"):
                if k not in s:
                    raise ParameterError(f"subject {i}: missing key {k!r}")
            sid = str(s["id"])
            if sid in seen or not sid or "/" in sid:
                raise ParameterError(f"subject {i}: invalid or duplicate id {sid!r}")
            seen.add(sid)
            tiv = s.get("tiv", "mask")
            if not (tiv is None or tiv == "mask" or (isinstance(tiv, (int, float)) and tiv > 0)):
                raise ParameterError(f"subject {sid}: tiv must be > 0, 'mask' or null")
            pri = s.get("priors")
            if pri is not None and not isinstance(pri, list):
                raise ParameterError(f"subject {sid}: priors must be a list of paths")
            out.append(SubjectConfig(
                id=sid, image=res(s["image"]), mask=res(s["mask"]),
                parcellation=res(s["parcellation"]), group=s.get("group"),
                priors=[res(p) for p in pri] if pri else None,
                tiv=float(tiv) if isinstance(tiv, (int, float)) else tiv,
                region_names={int(k): str(v) for k, v in (s.get("region_names") or {}).items()},
            ))
        params = merge_params(d.get("params") or {})
        cmap = parse_class_map(d["class_map"])
        for k, t in cmap.items():
            if t not in TISSUES:
                raise ParameterError(f"class_map: unknown tissue {t!r} for class {k}")
        K = params["segment"]["K"]
        if sorted(cmap) != list(range(K)):
            raise ParameterError(f"class_map must cover classes 0..{K - 1}")
        workers = d.get("workers", 1)
        if not isinstance(workers, int) or workers < 1:
            raise ParameterError("workers must be a positive integer")
        return cls(res(d["out_dir"]), out, cmap, params, workers)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except FileNotFoundError:
            raise DataError(f"config not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise FormatError(f"config {path}: {exc}") from None
        return cls.from_dict(d, Path(path).resolve().parent)


def _reject_unknown(d: dict, allowed, where: str) -> None:
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ParameterError(f"{where}: unknown keys {extra}")


def merge_params(overrides: dict) -> Dict[str, dict]:
    """Stage defaults updated by ``overrides``; unknown stages or keys are rejected."""
    if not isinstance(overrides, dict):
        raise ParameterError("params must be an object")
    p = copy.deepcopy(DEFAULT_PARAMS)
    for stage, vals in overrides.items():
        if stage not in p:
            raise ParameterError(f"params: unknown stage {stage!r}")
        if not isinstance(vals, dict):
            raise ParameterError(f"params.{stage} must be an object")
        _reject_unknown(vals, p[stage], f"params.{stage}")
        p[stage].update(vals)
    _check_params(p)
    return p


def _check_params(p) -> None:
    s = p["segment"]
    if not isinstance(s["K"], int) or s["K"] < 2:
        raise ParameterError("segment.K must be an integer >= 2")
    for stage, key in (("segment", "max_iter"), ("thickness", "max_iter"),
                       ("thickness", "stream_max_iter"), ("purkinje", "levels")):
        v = p[stage][key]
        if not isinstance(v, int) or v < 1:
            raise ParameterError(f"{stage}.{key} must be a positive integer")
    for stage, key in (("segment", "tol"), ("thickness", "tol"), ("thickness", "stream_tol"),
                       ("fissures", "sigma_voxels"), ("purkinje", "tau_lambda")):
        v = p[stage][key]
        if not isinstance(v, (int, float)) or not np.isfinite(v) or v <= 0:
            raise ParameterError(f"{stage}.{key} must be > 0")
    sc = p["standardize"]["scale"]
    if len(sc) != 2 or not sc[1] > sc[0]:
        raise ParameterError("standardize.scale must be [lo, hi] with hi > lo")
    st = p["stats"]
    if not 0 < st["q"] < 1:
        raise ParameterError("stats.q must be in (0, 1)")
    if st["tiv_mode"] not in TIV_MODES:
        raise ParameterError(f"stats.tiv_mode must be one of {TIV_MODES}")
    if st["measure"] not in MEASURES:
        raise ParameterError(f"stats.measure must be one of {MEASURES}")
    if len(st["groups"]) != 2:
        raise ParameterError("stats.groups must name two groups")
    pk = p["purkinje"]
    PlanarFilterParams(pk["scale"], pk["alpha"], pk["beta"], pk["c"], pk["tau_p"])


# ---------------------------------------------------------------------------
# artifacts

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class Artifact:
    artifact: str
    path: str  # relative to out_dir
    stage: str
    params: dict = field(default_factory=dict)
    sha256: str = ""


class Layout:
    """File names for one run directory."""

    def __init__(self, out_dir):
        self.root = Path(out_dir)

    def subject_dir(self, sid: str) -> Path:
        return self.root / "subjects" / sid

    def path(self, sid: str, suffix: str) -> Path:
        return self.subject_dir(sid) / f"{sid}_{suffix}"

    def rel(self, p) -> str:
        return Path(p).relative_to(self.root).as_posix()

    @property
    def landmarks(self) -> Path:
        return self.root / "landmarks.json"

    @property
    def report_csv(self) -> Path:
        return self.root / "report.csv"

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"


def _art(layout, name, path, stage, params=None):
    return Artifact(name, layout.rel(path), stage, dict(params or {}))


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_plain)
        fh.write("\n")


def _plain(x):
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(type(x))


def check_inputs(subjects: List[SubjectConfig]) -> None:
    """Every input file must exist and parse as a NIfTI header of one shared geometry."""
    for s in subjects:
        hdrs = []
        for p in s.inputs():
            if not Path(p).is_file():
                raise DataError(f"subject {s.id}: input not found: {p}")
            hdrs.append(read_header(p))
        g0 = hdrs[0]
        for p, h in zip(s.inputs()[1:], hdrs[1:]):
            if tuple(h.dims) != tuple(g0.dims) or not np.allclose(h.spacing, g0.spacing):
                raise DataError(f"subject {s.id}: {p} does not match the image geometry")


# ---------------------------------------------------------------------------
# per-subject stages (file in, file out)

def stage_segment(s: SubjectConfig, layout: Layout, params: dict, class_map: dict):
    p = params["segment"]
    v = read_volume(layout.path(s.id, "std.nii"))
    mask = read_volume(s.mask)
    priors = None
    if s.priors:
        priors = [read_volume(q) for q in s.priors]
    model, post, trace = fit_em(v, mask, priors, p["K"], p["tol"], p["max_iter"])
    wm, gm = hard_segment(post, class_map, mask)
    eff = dict(p, priors="file" if priors else "flat", class_map={str(k): t for k, t in class_map.items()})
    arts = []
    for k, pv in enumerate(post.volumes):
        f = layout.path(s.id, f"post{k}.nii")
        write_volume(pv, f)
        arts.append(_art(layout, f"{s.id}/post{k}", f, "segment", eff))
    for name, vol in (("wm", wm), ("gm", gm)):
        f = layout.path(s.id, f"{name}.nii")
        write_volume(vol, f)
        arts.append(_art(layout, f"{s.id}/{name}", f, "segment", eff))
    info = {"means": model.means, "variances": model.variances, "converged": model.converged,
            "iterations": model.n_iter, "degenerate": model.degenerate,
            "log_likelihood": trace, "priors": eff["priors"]}
    f = layout.path(s.id, "segment.json")
    _write_json(f, _listify(info))
    arts.append(_art(layout, f"{s.id}/segment_info", f, "segment", eff))
    log.info("segment %s: %s priors, %d iterations, means %s", s.id, eff["priors"],
             model.n_iter, np.round(model.means, 3).tolist())
    return arts, {}


def _listify(d):
    return {k: (np.asarray(v).tolist() if isinstance(v, (np.ndarray, list, tuple)) else v)
            for k, v in d.items()}


def stage_fissures(s: SubjectConfig, layout: Layout, params: dict, class_map=None):
    p = params["fissures"]
    v = read_volume(layout.path(s.id, "std.nii"))
    wm = read_volume(layout.path(s.id, "wm.nii"))
    gm = read_volume(layout.path(s.id, "gm.nii"))
    brain = read_volume(s.mask)
    res = extract_fissures(v, wm, gm, brain, p["sigma_voxels"], p["min_size"])
    D = res.distance.D.data
    # unreachable voxels are stored as -1
    geod = v.like(np.where(np.isfinite(D), D, -1.0))
    arts = []
    for name, vol in (("geod", geod), ("fissures", res.fissures), ("pial", res.pial)):
        f = layout.path(s.id, f"{name}.nii")
        write_volume(vol, f)
        arts.append(_art(layout, f"{s.id}/{name}", f, "fissures", p))
    return arts, {"fissure_voxels": int(as_mask(res.fissures).sum())}


def stage_thickness(s: SubjectConfig, layout: Layout, params: dict, class_map=None):
    p = params["thickness"]
    wm = read_volume(layout.path(s.id, "wm.nii"))
    gm = read_volume(layout.path(s.id, "gm.nii"))
    pial = read_volume(layout.path(s.id, "pial.nii"))
    b = compute_thickness(gm, wm, pial, p["tol"], p["max_iter"], p["stream_tol"], p["stream_max_iter"])
    arts, flag = write_thickness(b, s.id, layout, p)
    return arts, flag


def write_thickness(b: ThicknessBundle, sid: str, layout: Layout, p: dict):
    """Persist a thickness bundle; a non-converged one is written and flagged."""
    ok = b.converged
    descrip = "" if ok else "NONCONVERGED"
    eff = dict(p, converged=ok)
    arts = []
    for name, vol in (("psi", b.psi), ("dwm", b.d_wm), ("dpial", b.d_pial), ("tgm", b.t_gm),
                      ("gmeff", b.gm)):
        f = layout.path(sid, f"{name}.nii")
        write_volume(vol, f, descrip=descrip)
        arts.append(_art(layout, f"{sid}/{name}", f, "thickness", eff))
    for f in write_vector_field(b.vhat, str(layout.path(sid, "vhat")), descrip):
        arts.append(_art(layout, f"{sid}/{Path(f).stem.split('_')[-1]}", f, "thickness", eff))
    info = {"converged": ok, "laplace_iterations": b.laplace_iterations,
            "laplace_converged": b.laplace_converged, "stream_iterations": b.stream_iterations,
            "stream_converged": b.stream_converged, "degenerate_gradient": b.degenerate_gradient,
            "fallback_voxels": b.fallback_voxels,
            "laplace_max_update": b.flags.get("laplace_max_update")}
    f = layout.path(sid, "thickness.json")
    _write_json(f, info)
    arts.append(_art(layout, f"{sid}/thickness_info", f, "thickness", eff))
    if not ok:
        log.warning("thickness%s: not converged (laplace %d iterations)", f" {sid}" if sid else "",
                    b.laplace_iterations)
    return arts, {"converged": ok}


def read_bundle(sid: str, layout: Layout) -> ThicknessBundle:
    r = lambda n: read_volume(layout.path(sid, f"{n}.nii"))
    gm = r("gmeff")
    return ThicknessBundle(psi=r("psi"), vhat=read_vector_field(str(layout.path(sid, "vhat"))),
                           d_wm=r("dwm"), d_pial=r("dpial"), t_gm=r("tgm"), gm=gm.like(as_mask(gm)))


def stage_purkinje(s: SubjectConfig, layout: Layout, params: dict, class_map=None):
    p = params["purkinje"]
    # the plate filter sees the input image: the kinks of the piecewise-linear
    # standardization add f''(I) grad(I) grad(I)^T to the Hessian, a rank-one
    # (plate-like) term wherever noisy intensities cross a landmark
    v = read_volume(s.image)
    wm = read_volume(layout.path(s.id, "wm.nii"))
    pial = read_volume(layout.path(s.id, "pial.nii"))
    b = read_bundle(s.id, layout)
    fp = PlanarFilterParams(p["scale"], p["alpha"], p["beta"], p["c"], p["tau_p"])
    resp = planar_response(v, b.gm, fp)
    m0 = initial_purkinje(resp, b.gm, wm, pial, p["tau_p"], p["min_size"])
    ex = extrapolate_purkinje(m0, b, p["levels"], p["sigma_max"], p["sigma_min"], p["tau_lambda"])
    eff = dict(p, c=resp.c)
    arts = []
    for name, vol in (("planar", resp.P), ("mp0", m0), ("mpf", ex.m_pf), ("lambda", ex.lam)):
        f = layout.path(s.id, f"{name}.nii")
        write_volume(vol, f)
        arts.append(_art(layout, f"{s.id}/{name}", f, "purkinje", eff))
    f = layout.path(s.id, "purkinje.json")
    _write_json(f, {"c": resp.c, "sigmas": ex.sigmas, "known_counts": ex.known_counts,
                    "mp0_voxels": int(as_mask(m0).sum()), "mpf_voxels": int(as_mask(ex.m_pf).sum())})
    arts.append(_art(layout, f"{s.id}/purkinje_info", f, "purkinje", eff))
    return arts, {}


def stage_sublayers(s: SubjectConfig, layout: Layout, params: dict, class_map=None):
    b = read_bundle(s.id, layout)
    m = read_volume(layout.path(s.id, "mpf.nii"))
    vals = sublayer_thickness(m.like(as_mask(m)), b)
    f = layout.path(s.id, "sublayers.csv")
    write_sublayer_csv(vals, f)
    return [_art(layout, f"{s.id}/sublayers", f, "sublayers", params["sublayers"])], {}


def subject_rows(s: SubjectConfig, layout: Layout):
    b = read_bundle(s.id, layout)
    m = read_volume(layout.path(s.id, "mpf.nii"))
    parc = read_volume(s.parcellation)
    return subject_region_stats(parc, b.gm, m.like(as_mask(m)), b.d_wm, b.d_pial, b.t_gm, b.vhat,
                                s.region_names or None)


def subject_tiv(s: SubjectConfig):
    if s.tiv is None or isinstance(s.tiv, float):
        return s.tiv
    m = read_volume(s.mask)
    return float(as_mask(m).sum()) * float(np.prod(m.spacing))


_SUBJECT_STAGES = {
    "segment": stage_segment,
    "fissures": stage_fissures,
    "thickness": stage_thickness,
    "purkinje": stage_purkinje,
    "sublayers": stage_sublayers,
}


def _run_subject_stage(args):
    """Worker entry point; errors come back as values so the parent decides."""
    stage, s, out_dir, params, class_map = args
    try:
        arts, info = _SUBJECT_STAGES[stage](s, Layout(out_dir), params, class_map)
        return s.id, arts, info, None
    except LaminaError as exc:
        return s.id, [], {}, (type(exc).__name__, str(exc), exc.exit_code)


# ---------------------------------------------------------------------------
# cohort-level stages

def stage_standardize(cfg: RunConfig, layout: Layout):
    p = cfg.params["standardize"]
    vols = [read_volume(s.image) for s in cfg.subjects]
    masks = [read_volume(s.mask) for s in cfg.subjects]
    for v, m in zip(vols, masks):
        check_geometry(v, m)
    model = train_landmarks(vols, masks, tuple(p["scale"]))
    layout.root.mkdir(parents=True, exist_ok=True)
    model.save(layout.landmarks)
    arts = [_art(layout, "landmarks", layout.landmarks, "standardize", p)]
    for s, v, m in zip(cfg.subjects, vols, masks):
        out = standardize(v, m, model)
        f = layout.path(s.id, "std.nii")
        write_volume(out, f)
        arts.append(_art(layout, f"{s.id}/std", f, "standardize", p))
    return arts


def stage_stats(cfg: RunConfig, layout: Layout, rows_by_subject: Dict[str, list]):
    p = cfg.params["stats"]
    subs = []
    for s in cfg.subjects:
        subs.append({"id": s.id, "group": s.group, "tiv": subject_tiv(s), "rows": rows_by_subject[s.id]})
    if len(subs) == 1:
        report = single_report(subs[0]["rows"])
        report.provenance.update({"subject": subs[0]["id"], "tiv": subs[0]["tiv"]})
    else:
        report = cohort_report(subs, p["measure"], p["tiv_mode"], p["q"], tuple(p["groups"]))
    report.provenance["params"] = cfg.params
    report.provenance["class_map"] = {str(k): t for k, t in cfg.class_map.items()}
    return write_report(report, layout, p, subs)


def write_report(report: RegionReport, layout: Layout, p: dict, subs: list):
    """CSV, JSON and figures side by side."""
    arts = []
    write_region_report(report, layout.report_csv)
    arts.append(_art(layout, "report_csv", layout.report_csv, "stats", p))
    f = layout.root / "report.json"
    f.write_text(report.to_json() + "\n")
    arts.append(_art(layout, "report_json", f, "stats", p))
    figs = []
    if report.subjects:
        figs.append(("report_groups", plotting.group_bars(
            report.rows, layout.root / "report_groups.png", report.subjects, tuple(p["groups"]),
            ylabel=p["measure"] + (" / TIV" if any(s["tiv"] for s in subs) else ""))))
    figs.append(("report_regions", plotting.region_bars(
        report.rows, ("mean_TGM", "volume_mm3", "purkinje_area_mm2"),
        layout.root / "report_regions.png", ("T_GM (mm)", "GM volume (mm^3)", "mid-layer area (mm^2)"))))
    for s in subs:
        b = read_bundle(s["id"], layout)
        m = read_volume(layout.path(s["id"], "mpf.nii"))
        figs.append((f"report_tgm_{s['id']}", plotting.thickness_slice(
            b.t_gm.data, as_mask(b.gm), layout.root / f"report_tgm_{s['id']}.png", as_mask(m))))
    for name, f in figs:
        arts.append(_art(layout, name, f, "stats", p))
    return report, arts


# ---------------------------------------------------------------------------
# driver

@dataclass
class PipelineResult:
    config: RunConfig
    artifacts: List[Artifact]
    report: Optional[RegionReport] = None
    failed_stage: Optional[str] = None
    exit_code: int = 0
    error: Optional[str] = None

    @property
    def manifest_path(self) -> Path:
        return Layout(self.config.out_dir).manifest


def write_manifest(arts: List[Artifact], layout: Layout, extra: Optional[dict] = None) -> Path:
    """Hash every artifact and write the manifest (sorted, no timestamps)."""
    for a in arts:
        a.sha256 = sha256_file(layout.root / a.path)
    entries = sorted(({"artifact": a.artifact, "path": a.path, "sha256": a.sha256,
                       "stage": a.stage, "params": a.params} for a in arts),
                     key=lambda e: (STAGES.index(e["stage"]), e["path"]))
    _write_json(layout.manifest, {"artifacts": entries, **(extra or {})})
    return layout.manifest


def _pool(workers: int):
    if workers <= 1:
        return None
    return ProcessPoolExecutor(max_workers=workers, mp_context=multiprocessing.get_context("spawn"))


def run_all(cfg: RunConfig, workers: Optional[int] = None, stages=STAGES) -> PipelineResult:
    """Run the chain standardize -> ... -> stats.

    The first failing stage aborts the chain; artifacts written so far are
    still listed in the manifest and the failure is recorded there.
    """
    workers = cfg.workers if workers is None else workers
    check_inputs(cfg.subjects)
    layout = Layout(cfg.out_dir)
    for stage, vals in cfg.params.items():
        log.info("effective parameters %s: %s", stage, json.dumps(vals, sort_keys=True))
    arts: List[Artifact] = []
    result = PipelineResult(cfg, arts)
    pool = _pool(workers)
    try:
        for stage in stages:
            log.info("stage %s: %d subjects", stage, len(cfg.subjects))
            if stage == "standardize":
                arts.extend(stage_standardize(cfg, layout))
                continue
            if stage == "stats":
                jobs = [(s, layout) for s in cfg.subjects]
                rows = dict(zip([s.id for s in cfg.subjects],
                                (pool.map(_subject_rows_job, [(s, cfg.out_dir) for s in cfg.subjects])
                                 if pool else (subject_rows(s, l) for s, l in jobs))))
                report, a = stage_stats(cfg, layout, rows)
                arts.extend(a)
                result.report = report
                continue
            args = [(stage, s, cfg.out_dir, cfg.params, cfg.class_map) for s in cfg.subjects]
            outs = list(pool.map(_run_subject_stage, args)) if pool else [_run_subject_stage(a) for a in args]
            err = None
            for sid, a, info, e in outs:
                arts.extend(a)
                if stage == "thickness" and not info.get("converged", True) and err is None:
                    err = ("ConvergenceError", f"subject {sid}: thickness did not converge", 4)
                if e is not None and err is None:
                    err = (e[0], f"subject {sid}: {e[1]}", e[2])
            if err is not None:
                result.failed_stage, result.error, result.exit_code = stage, err[1], err[2]
                log.error("stage %s failed: %s", stage, err[1])
                break
    finally:
        if pool is not None:
            pool.shutdown()
    extra = {"priors": {s.id: ("file" if s.priors else "flat") for s in cfg.subjects}}
    if result.failed_stage:
        extra["failed"] = {"stage": result.failed_stage, "error": result.error,
                           "exit_code": result.exit_code}
    if arts:
        write_manifest(arts, layout, extra)
    return result


def _subject_rows_job(args):
    s, out_dir = args
    return subject_rows(s, Layout(out_dir))
