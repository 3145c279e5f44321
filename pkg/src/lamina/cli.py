"""Command-line entry point.

Exit codes: 0 success, 2 usage or parameter error, 3 data or format error,
4 numerical non-convergence (outputs still written and flagged), 1 for
anything unexpected. Errors are printed to stderr as one JSON object per
line; log records go to stderr in the same form.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .errors import ConvergenceError, DataError, LaminaError, ParameterError
from .fissures import build_pial
from .grid import as_mask
from .phantom import CLASS_MAP, PhantomSpec, cohort_specs, generate
from .pipeline import (DEFAULT_PARAMS, Layout, RunConfig, read_bundle, run_all, stage_stats,
                       subject_rows, write_thickness)
from .segment import fit_em, hard_segment, parse_class_map
from .standardize import LandmarkModel, standardize, train_landmarks
from .volume_io import read_volume, write_volume

log = logging.getLogger("lamina")


class UsageError(ParameterError):
    pass


class JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname.lower(), "logger": record.name,
                           "message": record.getMessage()}, sort_keys=True)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit_error(kind: str, message: str, code: int, **extra) -> None:
    rec = {"error": kind, "message": " ".join(str(message).split()), "exit_code": code}
    rec.update(extra)
    sys.stderr.write(json.dumps(rec, sort_keys=True) + "\n")


def _require(*paths) -> None:
    """Fail before any output is written when an input is missing."""
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise DataError(f"input not found: {p}")


class PrefixLayout(Layout):
    """Standalone subcommands name outputs ``<prefix>_<suffix>``."""

    def __init__(self, prefix):
        self.prefix = str(prefix)
        super().__init__(Path(self.prefix).parent)

    def path(self, sid, suffix) -> Path:
        return Path(f"{self.prefix}_{suffix}")


# ---------------------------------------------------------------------------
# subcommands

def cmd_phantom(a) -> int:
    _require(a.spec)
    spec = PhantomSpec.load(a.spec)
    out = Path(a.out)
    if a.cohort:
        subjects = []
        for sid, group, s in cohort_specs(spec, a.cohort, a.effect, a.jitter, a.cohort_seed):
            ph = generate(s)
            subjects.append(_write_phantom(ph, out / sid, sid, group, rel_to=out))
        _write_config(out, subjects, spec)
    else:
        sub = _write_phantom(generate(spec), out, "phantom", "A", rel_to=out)
        _write_config(out, [sub], spec)
    return 0


def _write_phantom(ph, d: Path, sid: str, group: str, rel_to: Path) -> dict:
    d.mkdir(parents=True, exist_ok=True)
    vols = {"image": ph.image, "brain": ph.brain, "wm": ph.wm, "gm": ph.gm,
            "mid_layer": ph.mid_layer, "fissure": ph.fissure, "t_gm": ph.t_gm,
            "t_gran": ph.t_gran, "t_mol": ph.t_mol, "parcellation": ph.parcellation}
    vols["pial"] = build_pial(ph.gm, ph.wm, ph.fissure)
    for name, v in vols.items():
        write_volume(v, d / f"{name}.nii")
    for k, p in enumerate(ph.priors):
        write_volume(p, d / f"prior{k}.nii")
    meta = {"spec": ph.spec.to_dict(), "tiv_mm3": ph.tiv, "id": sid, "group": group}
    (d / "phantom.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    r = lambda n: (d / n).relative_to(rel_to).as_posix()
    return {"id": sid, "group": group, "image": r("image.nii"), "mask": r("brain.nii"),
            "parcellation": r("parcellation.nii"),
            "priors": [r(f"prior{k}.nii") for k in range(len(ph.priors))], "tiv": ph.tiv}


def _write_config(out: Path, subjects: list, spec: PhantomSpec) -> None:
    # planar filter scale at 0.8 voxel, the ratio of the default scale to the default spacing
    cfg = {"out_dir": "run", "class_map": {str(k): v for k, v in CLASS_MAP.items()},
           "subjects": subjects,
           "params": {"purkinje": {"scale": round(0.8 * min(spec.spacing), 12)}}}
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def cmd_standardize(a) -> int:
    if len(a.images) != len(a.masks):
        raise UsageError("--images and --masks need the same number of files")
    _require(*a.images, *a.masks, a.model)
    vols = [read_volume(p) for p in a.images]
    masks = [read_volume(p) for p in a.masks]
    model = LandmarkModel.load(a.model) if a.model else train_landmarks(vols, masks, tuple(a.scale))
    outs = [standardize(v, m, model) for v, m in zip(vols, masks)]
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not a.model:
        model.save(out / "landmarks.json")
    for p, v in zip(a.images, outs):
        write_volume(v, out / (Path(p).name.replace(".nii", "") + "_std.nii"))
    return 0


def _class_map(arg):
    p = Path(arg)
    try:
        text = p.read_text() if p.is_file() else arg
        return parse_class_map(json.loads(text))
    except json.JSONDecodeError as exc:
        raise UsageError(f"--class-map: {exc}") from None


def cmd_segment(a) -> int:
    _require(a.image, a.mask, *(a.priors or []))
    cmap = _class_map(a.class_map)
    v, mask = read_volume(a.image), read_volume(a.mask)
    priors = [read_volume(p) for p in a.priors] if a.priors else None
    model, post, trace = fit_em(v, mask, priors, a.K, a.tol, a.max_iter)
    wm, gm = hard_segment(post, cmap, mask)
    for k, pv in enumerate(post.volumes):
        write_volume(pv, f"{a.out}_post{k}.nii")
    write_volume(wm, f"{a.out}_wm.nii")
    write_volume(gm, f"{a.out}_gm.nii")
    info = dict(model.to_dict(), log_likelihood=trace, priors="file" if priors else "flat")
    Path(f"{a.out}_segment.json").write_text(json.dumps(info, indent=2) + "\n")
    return 0


def cmd_fissures(a) -> int:
    from .fissures import extract_fissures
    _require(a.image, a.wm, a.gm, a.brain)
    v, wm, gm = read_volume(a.image), read_volume(a.wm), read_volume(a.gm)
    brain = read_volume(a.brain) if a.brain else None
    res = extract_fissures(v, wm, gm, brain, a.sigma_voxels, a.min_size)
    D = res.distance.D.data
    write_volume(v.like(np.where(np.isfinite(D), D, -1.0)), f"{a.out}_geod.nii")
    write_volume(res.fissures, f"{a.out}_fissures.nii")
    write_volume(res.pial, f"{a.out}_pial.nii")
    return 0


def cmd_thickness(a) -> int:
    from .thickness import compute_thickness
    _require(a.gm, a.wm, a.pial)
    gm, wm, pial = read_volume(a.gm), read_volume(a.wm), read_volume(a.pial)
    b = compute_thickness(gm, wm, pial, a.tol, a.max_iter, a.stream_tol, a.stream_max_iter)
    p = {"tol": a.tol, "max_iter": a.max_iter, "stream_tol": a.stream_tol,
         "stream_max_iter": a.stream_max_iter}
    write_thickness(b, "", PrefixLayout(a.out), p)
    if not b.converged:
        raise ConvergenceError(f"thickness did not converge after {b.laplace_iterations} "
                               f"Laplace iterations; outputs written with a non-convergence flag")
    return 0


def cmd_purkinje(a) -> int:
    from .purkinje import PlanarFilterParams, extrapolate_purkinje, initial_purkinje, planar_response
    th = PrefixLayout(a.thickness)
    need = [th.path("", n + ".nii") for n in ("psi", "dwm", "dpial", "tgm", "gmeff", "vhatx", "vhaty", "vhatz")]
    _require(a.image, a.wm, a.pial, *need)
    fp = PlanarFilterParams(a.scale, a.alpha, a.beta, a.c, a.tau_p)
    v, wm, pial = read_volume(a.image), read_volume(a.wm), read_volume(a.pial)
    b = read_bundle("", th)
    resp = planar_response(v, b.gm, fp)
    m0 = initial_purkinje(resp, b.gm, wm, pial, a.tau_p, a.min_size)
    ex = extrapolate_purkinje(m0, b, a.levels, a.sigma_max, a.sigma_min, a.tau_lambda)
    write_volume(resp.P, f"{a.out}_planar.nii")
    write_volume(m0, f"{a.out}_mp0.nii")
    write_volume(ex.m_pf, f"{a.out}_mpf.nii")
    write_volume(ex.lam, f"{a.out}_lambda.nii")
    return 0


def cmd_sublayers(a) -> int:
    from .purkinje import sublayer_thickness, write_sublayer_csv
    th = PrefixLayout(a.thickness)
    need = [th.path("", n + ".nii") for n in ("psi", "dwm", "dpial", "tgm", "gmeff", "vhatx", "vhaty", "vhatz")]
    _require(a.mpf, *need)
    b = read_bundle("", th)
    m = read_volume(a.mpf)
    write_sublayer_csv(sublayer_thickness(m.like(as_mask(m)), b), a.out)
    return 0


def cmd_stats(a) -> int:
    cfg = _load_config(a)
    layout = Layout(cfg.out_dir)
    rows = {s.id: subject_rows(s, layout) for s in cfg.subjects}
    stage_stats(cfg, layout, rows)
    return 0


def _load_config(a) -> RunConfig:
    _require(a.config)
    cfg = RunConfig.load(a.config)
    if getattr(a, "out_dir", None):
        cfg.out_dir = str(Path(a.out_dir).resolve())
    return cfg


def cmd_run_all(a) -> int:
    cfg = _load_config(a)
    if a.no_priors:
        for s in cfg.subjects:
            s.priors = None
    res = run_all(cfg, workers=a.workers)
    if res.exit_code:
        _emit_error("StageFailure", res.error, res.exit_code, stage=res.failed_stage)
        return res.exit_code
    print(json.dumps({"manifest": str(res.manifest_path),
                      "report": str(Layout(cfg.out_dir).report_csv)}))
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    P = DEFAULT_PARAMS
    ap = _Parser(prog="lamina", description="Layer-wise cerebellar thickness from MR volumes.")
    ap.add_argument("--version", action="version", version=f"lamina {__version__}")
    ap.add_argument("--log-level", default="warning", choices=("debug", "info", "warning", "error"))
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("phantom", help="generate a synthetic phantom (or a two-group cohort)")
    p.add_argument("--spec", required=True, help="PhantomSpec JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--cohort", type=int, default=0, metavar="N", help="subjects per group")
    p.add_argument("--effect", type=float, default=0.8, help="group B thickness factor")
    p.add_argument("--jitter", type=float, default=0.03, help="relative per-subject thickness sd")
    p.add_argument("--cohort-seed", type=int, default=0)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("standardize", help="landmark intensity standardization")
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--masks", nargs="+", required=True)
    p.add_argument("--model", help="existing landmarks.json (otherwise trained on the inputs)")
    p.add_argument("--scale", type=float, nargs=2, default=P["standardize"]["scale"])
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_standardize)

    p = sub.add_parser("segment", help="EM tissue classification")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--priors", nargs="+", help="one prior volume per class (default: flat)")
    p.add_argument("--class-map", required=True, help='JSON file or string, e.g. {"0": "GM", "3": "WM"}')
    p.add_argument("--K", type=int, default=P["segment"]["K"])
    p.add_argument("--tol", type=float, default=P["segment"]["tol"])
    p.add_argument("--max-iter", type=int, default=P["segment"]["max_iter"])
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("fissures", help="fissure sheets and pial surface")
    p.add_argument("--image", required=True)
    p.add_argument("--wm", required=True)
    p.add_argument("--gm", required=True)
    p.add_argument("--brain", help="brain mask (default: WM or GM)")
    p.add_argument("--sigma-voxels", type=float, default=P["fissures"]["sigma_voxels"])
    p.add_argument("--min-size", type=int, default=P["fissures"]["min_size"])
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_fissures)

    p = sub.add_parser("thickness", help="Laplace field and streamline thickness")
    p.add_argument("--gm", required=True)
    p.add_argument("--wm", required=True)
    p.add_argument("--pial", required=True)
    p.add_argument("--tol", type=float, default=P["thickness"]["tol"])
    p.add_argument("--max-iter", type=int, default=P["thickness"]["max_iter"])
    p.add_argument("--stream-tol", type=float, default=P["thickness"]["stream_tol"])
    p.add_argument("--stream-max-iter", type=int, default=P["thickness"]["stream_max_iter"])
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_thickness)

    q = P["purkinje"]
    p = sub.add_parser("purkinje", help="mid-layer detection and completion")
    p.add_argument("--image", required=True)
    p.add_argument("--wm", required=True)
    p.add_argument("--pial", required=True)
    p.add_argument("--thickness", required=True, help="prefix of the thickness outputs")
    for k in ("scale", "alpha", "beta", "tau_p", "sigma_max", "sigma_min", "tau_lambda"):
        p.add_argument("--" + k.replace("_", "-"), type=float, default=q[k])
    p.add_argument("--c", type=float, default=q["c"])
    p.add_argument("--min-size", type=int, default=q["min_size"])
    p.add_argument("--levels", type=int, default=q["levels"])
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_purkinje)

    p = sub.add_parser("sublayers", help="granular and molecular thickness on the mid-layer")
    p.add_argument("--thickness", required=True, help="prefix of the thickness outputs")
    p.add_argument("--mpf", required=True, help="mid-layer mask")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_sublayers)

    for name, func, hlp in (("stats", cmd_stats, "regional report from a finished run"),
                            ("run-all", cmd_run_all, "run every stage from a config")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--config", required=True)
        p.add_argument("--out-dir", help="override the config's out_dir")
        if name == "run-all":
            p.add_argument("--workers", type=int, default=None)
            p.add_argument("--no-priors", action="store_true", help="ignore configured priors (flat)")
        p.set_defaults(func=func)
    return ap


def _setup_logging(level: str) -> None:
    root = logging.getLogger("lamina")
    for h in list(root.handlers):
        if getattr(h, "_lamina", False):
            root.removeHandler(h)
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(JsonFormatter())
    h._lamina = True
    root.addHandler(h)
    root.setLevel(level.upper())


def main(argv: Optional[List[str]] = None) -> int:
    try:
        ap = build_parser()
        a = ap.parse_args(argv)
        if a.command is None:
            raise UsageError("a subcommand is required")
        _setup_logging(a.log_level)
        return int(a.func(a))
    except LaminaError as exc:
        _emit_error(type(exc).__name__, str(exc), exc.exit_code)
        return exc.exit_code
    except OSError as exc:
        _emit_error("OSError", str(exc), 3)
        return 3
    except Exception as exc:  # last resort: still one parseable line
        _emit_error(type(exc).__name__, str(exc), 1)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
