"""Synthetic laminar phantoms with analytically known geometry.

Tissue is assigned from a signed depth ``d`` (mm) above the WM surface
measured along the local normal ``n``: WM for d < 0, grey matter for
0 <= d < T, background above. Inside grey matter a bright mid-layer sits at
depth f*T between a granular (inner) and a molecular (outer) sublayer.
Rendered intensities use the fraction of each voxel's extent along ``n``
that falls in each tissue, then a Gaussian blur and additive Gaussian
noise. Truth maps come from the analytic depth, never from the image.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import SpecError
from .grid import Volume, gaussian_smooth

KINDS = ("slab", "spherical_shell", "folded_sheet")

DEFAULT_INTENSITIES = {
    "wm": 200.0,
    "granular": 80.0,
    "purkinje": 150.0,
    "molecular": 100.0,
    "background": 230.0,
}

# prior / class order; ascending mean intensity with the defaults above
PRIOR_CLASSES = ("granular", "molecular", "purkinje", "wm")
CLASS_MAP = {0: "GM", 1: "GM", 2: "GM", 3: "WM"}


@dataclass
class PhantomSpec:
    kind: str = "slab"
    dims: Tuple[int, int, int] = (64, 64, 120)
    spacing: Tuple[float, float, float] = (0.05, 0.05, 0.05)
    thickness: float = 4.0
    f: float = 0.4
    wm_thickness: Optional[float] = None  # slab: WM depth below the cortex (mm)
    inner_radius: float = 10.0  # spherical_shell: WM radius (mm)
    finger_halfwidth: Optional[float] = None  # folded_sheet: WM core half width (mm)
    fold_amplitude: float = 0.0
    fold_wavelength: float = 0.0
    fissure_width: float = 0.5  # folded_sheet: background fraction of the cleft voxels
    purkinje_width: float = 1.0  # in voxel extents along the normal
    intensities: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_INTENSITIES))
    noise_sigma: float = 0.0
    pv_sigma: float = 0.5  # voxels
    seed: int = 0
    n_regions: int = 4

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"kind must be one of {KINDS}, got {self.kind!r}")
        self.dims = tuple(int(n) for n in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.dims) != 3 or min(self.dims) < 3:
            raise SpecError(f"dims must be three integers >= 3, got {self.dims}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise SpecError(f"spacing must be three positive values, got {self.spacing}")
        if not 0.0 < self.f < 1.0:
            raise SpecError(f"mid-layer depth f must be strictly inside (0, 1), got {self.f}")
        if self.thickness <= 0:
            raise SpecError("thickness must be > 0")
        if not 0.0 <= self.fissure_width <= 1.0:
            raise SpecError("fissure_width must be in [0, 1]")
        if self.noise_sigma < 0 or self.pv_sigma < 0:
            raise SpecError("noise_sigma and pv_sigma must be >= 0")
        if self.n_regions not in (1, 2, 4):
            raise SpecError("n_regions must be 1, 2 or 4")
        ints = dict(DEFAULT_INTENSITIES)
        ints.update({k: float(v) for k, v in self.intensities.items()})
        unknown = set(ints) - set(DEFAULT_INTENSITIES)
        if unknown:
            raise SpecError(f"unknown tissue intensities {sorted(unknown)}")
        self.intensities = ints

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise SpecError(f"unknown phantom spec keys {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PhantomSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["spacing"] = list(self.spacing)
        return d


@dataclass
class Phantom:
    spec: PhantomSpec
    image: Volume
    brain: Volume
    wm: Volume
    gm: Volume
    mid_layer: Volume
    fissure: Volume
    t_gm: Volume
    t_gran: Volume
    t_mol: Volume
    priors: list
    parcellation: Volume
    tiv: float
    depth: np.ndarray = field(repr=False, default=None)


def _coords(spec: PhantomSpec, factor: int = 1):
    """Physical sample coordinates; factor > 1 gives factor^3 sub-samples per voxel."""
    out = []
    for ax, (n, s) in enumerate(zip(spec.dims, spec.spacing)):
        t = (np.arange(n * factor) + 0.5) / factor - 0.5
        shape = [1, 1, 1]
        shape[ax] = -1
        out.append((t * s).reshape(shape))
    return np.broadcast_arrays(*out)


def _geometry(spec: PhantomSpec, factor: int = 1):
    """Signed depth d (mm), unit normal n, analytic TIV (None if numerical), extras."""
    X, Y, Z = _coords(spec, factor)
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing
    T = spec.thickness
    if spec.kind == "slab":
        wm_t = spec.wm_thickness
        if wm_t is None:
            wm_t = 0.5 * (nz * sz - T)
        k_w = int(round(wm_t / sz))
        z_w = (k_w - 0.5) * sz
        if k_w < 1 or z_w + T > (nz - 1.5) * sz:
            raise SpecError(f"slab thickness {T} mm does not fit in {nz} x {sz} mm")
        d = Z - z_w
        n = np.zeros(d.shape + (3,))
        n[..., 2] = 1.0
        tiv = nx * sx * ny * sy * (z_w + 0.5 * sz + T)
        return d, n, tiv, {"wm_surface_z": z_w}
    if spec.kind == "spherical_shell":
        c = [(n_ - 1) / 2.0 * s for n_, s in zip(spec.dims, spec.spacing)]
        P = np.stack([X - c[0], Y - c[1], Z - c[2]], axis=-1)
        r = np.linalg.norm(P, axis=-1)
        r1, r2 = spec.inner_radius, spec.inner_radius + T
        if r2 + 1.5 * max(spec.spacing) > min(c):
            raise SpecError(f"shell outer radius {r2} mm does not fit in the grid")
        n = P / np.maximum(r, 1e-12)[..., None]
        tiv = 4.0 / 3.0 * math.pi * r2 ** 3
        return r - r1, n, tiv, {"center": c, "r1": r1, "r2": r2}
    return _folded_geometry(spec, X, Y, Z)


def _folded_geometry(spec, X, Y, Z):
    """Two WM fingers standing on a WM base; their GM bands meet in a cleft.

    The inner finger faces sit on voxel faces at +-(T + s/2) around the
    cleft mid-plane, so the one-voxel cleft column is exactly T away from
    both; it is rendered as a partial-volume mix (see ``generate``).
    """
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing
    T = spec.thickness
    a = spec.finger_halfwidth if spec.finger_halfwidth is not None else 0.5 * T
    w = sx
    xm = (nx // 2) * sx
    base_top = 2.5 * sz + 0.5 * T
    top = (nz - 3.5) * sz - T
    e = T + 0.5 * w
    xs = X - xm
    if spec.fold_amplitude and spec.fold_wavelength:
        xs = xs - spec.fold_amplitude * np.sin(2 * math.pi * Y / spec.fold_wavelength)
    half_extent = min(xm, (nx - 1) * sx - xm)
    if half_extent - (e + 2 * a + T) < 1.5 * sx + abs(spec.fold_amplitude) or top - base_top < 2 * T:
        raise SpecError("folded sheet does not fit in the grid")
    boxes = [
        ((-np.inf, -np.inf), (np.inf, base_top)),
        ((-(e + 2 * a), -np.inf), (-e, top)),
        ((e, -np.inf), (e + 2 * a, top)),
    ]
    P = np.stack([xs, Z], axis=-1)
    best_d = np.full(X.shape, np.inf)
    best_n = np.zeros(X.shape + (2,))
    depth_in = np.zeros(X.shape)
    for lo, hi in boxes:
        lo_a, hi_a = np.asarray(lo), np.asarray(hi)
        diff = P - np.clip(P, lo_a, hi_a)
        dist = np.linalg.norm(diff, axis=-1)
        upd = dist < best_d
        best_d = np.where(upd, dist, best_d)
        best_n = np.where(upd[..., None], diff / np.maximum(dist, 1e-12)[..., None], best_n)
        pen = np.minimum(np.min(P - lo_a, axis=-1), np.min(hi_a - P, axis=-1))
        depth_in = np.maximum(depth_in, np.where(dist == 0, pen, 0.0))
    in_wm = best_d == 0
    d = np.where(in_wm, -depth_in, best_d)
    n = np.zeros(X.shape + (3,))
    n[..., 0] = best_n[..., 0]
    n[..., 2] = best_n[..., 1]
    n[in_wm] = (0.0, 0.0, 1.0)
    cleft = (np.abs(xs) < 0.5 * w) & (Z > base_top + T) & (Z <= top) & (d >= T)
    return d, n, None, {"cleft": cleft, "cleft_x": xm, "base_top": base_top, "finger_top": top}


def _frac_below(level, d, h):
    """Fraction of each voxel's extent along the normal lying at depth < level."""
    return np.clip((level - d) / h + 0.5, 0.0, 1.0)


def _parcellation(spec, brain):
    nx, ny, _ = spec.dims
    X, Y, _ = np.indices(spec.dims)
    if spec.n_regions == 1:
        lab = np.ones(spec.dims, np.int16)
    elif spec.n_regions == 2:
        lab = 1 + (X >= nx / 2).astype(np.int16)
    else:
        lab = 1 + (X >= nx / 2).astype(np.int16) + 2 * (Y >= ny / 2).astype(np.int16)
    return np.where(brain, lab, 0).astype(np.int16)


def _brain_of(d, T, extra):
    b = d < T
    if "cleft" in extra:
        b = b | extra["cleft"]
    return b


def generate(spec: PhantomSpec) -> Phantom:
    """Render a phantom and its truth maps."""
    d, n, tiv, extra = _geometry(spec)
    sp = np.asarray(spec.spacing)
    h = np.abs(n) @ sp
    T, f = spec.thickness, spec.f
    wp = spec.purkinje_width * h
    I = spec.intensities

    f_wm = _frac_below(0.0, d, h)
    f_gran_end = _frac_below(f * T - 0.5 * wp, d, h)
    f_purk_end = _frac_below(f * T + 0.5 * wp, d, h)
    f_gm_end = _frac_below(T, d, h)
    fr = {
        "wm": f_wm,
        "granular": np.clip(f_gran_end - f_wm, 0, 1),
        "purkinje": np.clip(f_purk_end - f_gran_end, 0, 1),
        "molecular": np.clip(f_gm_end - f_purk_end, 0, 1),
        "background": 1.0 - f_gm_end,
    }
    if "cleft" in extra:
        # a fissure narrower than a voxel: background fills only part of the cleft voxels
        c = extra["cleft"]
        wf = float(np.clip(spec.fissure_width, 0.0, 1.0))
        fr["molecular"] = np.where(c, 1.0 - wf, fr["molecular"])
        fr["background"] = np.where(c, wf, fr["background"])
    img = sum(fr[k] * I[k] for k in fr)
    vol = Volume(img, spec.spacing)
    if spec.pv_sigma > 0:
        vol = gaussian_smooth(vol, spec.pv_sigma)
    data = vol.data
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        data = data + rng.normal(0.0, spec.noise_sigma, size=data.shape)
    image = Volume(data, spec.spacing)

    wm = d < 0
    gm = (d >= 0) & (d < T)
    fissure = extra.get("cleft", np.zeros(spec.dims, bool))
    # voxels whose extent along the normal, (d - h/2, d + h/2], contains depth f*T
    q = np.round((f * T - d) / h, 9)
    mid = gm & (q > -0.5) & (q <= 0.5)
    brain = wm | gm | fissure
    if tiv is None:
        tiv = _numeric_tiv(spec)

    vs = lambda a: Volume(a, spec.spacing)
    return Phantom(
        spec=spec, image=image, brain=vs(brain), wm=vs(wm), gm=vs(gm), mid_layer=vs(mid),
        fissure=vs(fissure), t_gm=vs(np.where(gm, T, 0.0)),
        t_gran=vs(np.where(gm, f * T, 0.0)), t_mol=vs(np.where(gm, (1 - f) * T, 0.0)),
        priors=_priors(fr, brain, spec.spacing),
        parcellation=vs(_parcellation(spec, brain)), tiv=float(tiv), depth=d,
    )


def _priors(fr, brain, spacing, sigma=1.0, floor=1e-3):
    """Smoothed tissue fractions in PRIOR_CLASSES order, floored and normalized."""
    comps = [fr["granular"], fr["molecular"] + fr["background"], fr["purkinje"], fr["wm"]]
    stack = np.stack([gaussian_smooth(Volume(c, spacing), sigma).data for c in comps], axis=-1)
    stack = np.maximum(stack, 0.0) + floor
    stack /= stack.sum(axis=-1, keepdims=True)
    stack[~brain] = 1.0 / stack.shape[-1]
    return [Volume(np.ascontiguousarray(stack[..., k]), spacing) for k in range(stack.shape[-1])]


def _numeric_tiv(spec: PhantomSpec, factor: int = 3) -> float:
    """Brain volume of the continuous geometry by factor^3 sub-sampling."""
    d, _, _, extra = _geometry(spec, factor)
    n = np.count_nonzero(_brain_of(d, spec.thickness, extra))
    return float(n) * float(np.prod(spec.spacing)) / factor ** 3


# ---------------------------------------------------------------------------
# cohorts

def cohort_specs(base: PhantomSpec, n_per_group: int = 6, effect: float = 0.8,
                 jitter: float = 0.03, seed: int = 0):
    """Subject specs for a two-group cohort.

    Each subject's thickness is ``base.thickness * (1 + jitter * z)`` with
    ``z ~ N(0, 1)``; group B is additionally scaled by ``effect``. Every
    subject gets its own noise seed.
    """
    rng = np.random.default_rng(seed)
    out = []
    for g, scale in (("A", 1.0), ("B", effect)):
        for i in range(n_per_group):
            t = base.thickness * scale * (1.0 + jitter * rng.standard_normal())
            s = PhantomSpec(**{**base.to_dict(), "thickness": float(t),
                               "seed": int(rng.integers(0, 2**31 - 1))})
            out.append((f"{g}{i + 1:02d}", g, s))
    return out
