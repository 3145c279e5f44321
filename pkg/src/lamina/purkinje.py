"""Mid-layer (Purkinje sheet) detection, completion and sublayer thickness.

A Hessian plate filter gives the initial sheet, ratio maps from the
thickness stage are extrapolated off the sheet with a multi-level Gaussian
scheme, and gaps are filled with directional minima of the mismatch map.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import DataError, ParameterError, StageError
from .fissures import directional_extrema
from .grid import Volume, as_mask, check_geometry, connected_components, dilate26, gaussian_smooth, hessian_eigen
from .volume_io import write_csv

log = logging.getLogger(__name__)

SUBLAYER_COLUMNS = ("x", "y", "z", "TGran", "TMol", "TGM")


@dataclass
class PlanarFilterParams:
    scale: float = 0.04  # mm
    alpha: float = 0.5
    beta: float = 0.5
    c: Optional[float] = None  # None: half the largest structureness in GM
    tau_p: float = 0.05

    def __post_init__(self):
        for name in ("scale", "alpha", "beta", "tau_p"):
            val = getattr(self, name)
            if not np.isfinite(val) or val <= 0:
                raise ParameterError(f"{name} must be finite and > 0, got {val}")
        if self.c is not None and (not np.isfinite(self.c) or self.c <= 0):
            raise ParameterError(f"c must be finite and > 0, got {self.c}")


@dataclass
class PlanarResponse:
    P: Volume
    normal: np.ndarray  # unit eigenvector of the largest-magnitude eigenvalue
    strength: np.ndarray  # max(-l3, 0): ungated bright-sheet strength
    c: float


def plate_measure(l1, l2, l3, S, alpha, beta, c):
    """Plate-likeness for bright sheets from ordered eigenvalues |l1|<=|l2|<=|l3|.

    Zero where l2 > 0 or l3 > 0 (not a bright sheet) and where l3 == 0.
    R_B is taken as 0 where l2 == 0 (then l1 == 0 too).
    """
    l1, l2, l3, S = (np.asarray(a, dtype=np.float64) for a in (l1, l2, l3, S))
    a1, a2, a3 = np.abs(l1), np.abs(l2), np.abs(l3)
    zero = (l2 > 0) | (l3 > 0) | (a3 == 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ra = np.where(a3 > 0, a2 / a3, 0.0)
        rb = np.where(a2 > 0, a1 / np.sqrt(a2 * a3), 0.0)
    P = np.exp(-ra**2 / (2 * alpha**2)) * np.exp(-rb**2 / (2 * beta**2)) \
        * (1.0 - np.exp(-S**2 / (2 * c**2)))
    return np.where(zero, 0.0, P)


def planar_response(v: Volume, gm: Volume, params: PlanarFilterParams = None) -> PlanarResponse:
    """Hessian plate filter evaluated at GM voxels (zero elsewhere)."""
    params = params or PlanarFilterParams()
    check_geometry(v, gm)
    g = as_mask(gm)
    eig = hessian_eigen(v, params.scale, gm)
    S = eig.frobenius
    c = params.c
    if c is None:
        smax = float(S[g].max()) if g.any() else 0.0
        c = 0.5 * smax
    P = np.zeros(v.dims)
    if c > 0:
        l = eig.eigenvalues[g]
        P[g] = plate_measure(l[:, 0], l[:, 1], l[:, 2], S[g], params.alpha, params.beta, c)
    strength = np.maximum(-eig.eigenvalues[..., 2], 0.0)
    return PlanarResponse(v.like(P), eig.e3, strength, float(c))


def initial_purkinje(resp: PlanarResponse, gm: Volume, wm: Volume, pial: Volume,
                     tau_p: float = 0.05, min_size: int = 5, ridge: bool = True) -> Volume:
    """Initial sheet M_P0 from the plate response.

    Voxels with P >= tau_p are kept. With ``ridge=True`` only those on the
    ridge of the sheet strength -l3 along the filter normal survive (a band
    one projected voxel thick); the ridge is taken before the sign gate of
    P so gated voxels leave gaps rather than displacing the sheet. Then
    voxels 26-adjacent to WM or pial/fissure voxels and 26-components
    smaller than ``min_size`` are removed.
    """
    P = resp.P
    check_geometry(P, gm, wm, pial)
    if tau_p <= 0:
        raise ParameterError(f"tau_p must be > 0, got {tau_p}")
    g = as_mask(gm)
    m = g & (P.data >= tau_p)
    if ridge and m.any():
        m &= directional_extrema(resp.strength, resp.normal, g, P.spacing, kind="max",
                                 step="extent", eligible=m, tie="half_open")
    m &= ~dilate26(as_mask(wm) | as_mask(pial))
    if m.any():
        lab, sizes = connected_components(gm.like(m), 26)
        small = np.flatnonzero(sizes < min_size) + 1
        m &= ~np.isin(lab.data, small)
    if not m.any():
        raise StageError(f"initial mid-layer is empty (tau_p={tau_p}, max P={float(P.data.max()):.3g})")
    return gm.like(m)


@dataclass
class Extrapolation:
    r_wm: Volume
    r_p: Volume
    r_ps: Volume
    lam: Volume
    lam_min: Volume
    m_pf: Volume
    sigmas: List[float] = field(default_factory=list)
    known_counts: List[int] = field(default_factory=list)


def level_sigmas(levels: int = 10, sigma_max: float = 15.0, sigma_min: float = 1.0) -> np.ndarray:
    """Geometric sequence of Gaussian sigmas (voxels) from sigma_max down to sigma_min."""
    if levels < 1 or sigma_max <= 0 or sigma_min <= 0:
        raise ParameterError("levels, sigma_max and sigma_min must be positive")
    if levels == 1:
        return np.array([float(sigma_max)])
    i = np.arange(levels)
    return sigma_max * (sigma_min / sigma_max) ** (i / (levels - 1))


def ratio_map(bundle) -> tuple:
    """R_WM = D_WM / T_GM on GM voxels with T_GM > 0, and that defined set."""
    g = as_mask(bundle.gm)
    t = np.asarray(bundle.t_gm.data, dtype=np.float64)
    ok = g & (t > 0)
    r = np.zeros(g.shape)
    r[ok] = np.asarray(bundle.d_wm.data)[ok] / t[ok]
    return r, ok


def extrapolate_purkinje(m_p0: Volume, bundle, levels: int = 10, sigma_max: float = 15.0,
                         sigma_min: float = 1.0, tau_lambda: float = 0.1,
                         coverage: float = 1e-6, step: str = "extent",
                         max_levels: Optional[int] = None) -> Extrapolation:
    """Complete the mid-layer from the ratio maps.

    R_P (R_WM on M_P0) is spread by support-normalized smoothing at each
    level, largest sigma first; a level writes only voxels not yet assigned
    and whose smoothing weight exceeds ``coverage``. Voxels where
    |R_P_S - R_WM| is a directional minimum along V-hat and below
    ``tau_lambda`` join M_P0. ``max_levels`` stops after that many levels.
    """
    check_geometry(m_p0, bundle.gm)
    seeds = as_mask(m_p0)
    if not seeds.any():
        raise StageError("mid-layer seed set is empty")
    r_wm, ok = ratio_map(bundle)
    if (seeds & ~ok).any():
        raise DataError("mid-layer seeds lie outside grey matter")
    sig = level_sigmas(levels, sigma_max, sigma_min)
    if max_levels is not None:
        sig = sig[:max_levels]
    known = seeds.copy()
    val = np.where(seeds, r_wm, 0.0)
    r_p = val.copy()
    counts = []
    for s in sig:
        sm, wgt = gaussian_smooth(m_p0.like(val), float(s), support=m_p0.like(known), return_weight=True)
        new = ok & ~known & (wgt > coverage)
        val[new] = sm.data[new]
        known |= new
        counts.append(int(known.sum()))
        log.debug("extrapolation sigma %.3g: %d known", s, counts[-1])

    lam = np.full(ok.shape, np.inf)
    dom = ok & known
    lam[dom] = np.abs(val[dom] - r_wm[dom])
    lam[seeds] = 0.0
    V = np.asarray(bundle.vhat.data)
    has_dir = np.linalg.norm(V, axis=-1) > 0
    cand = dom & ~seeds & has_dir & (lam < tau_lambda)
    lmin = directional_extrema(lam, V, dom, m_p0.spacing, kind="min", step=step, eligible=cand)
    lam_out = np.where(dom, lam, 0.0)
    return Extrapolation(
        r_wm=m_p0.like(r_wm), r_p=m_p0.like(r_p), r_ps=m_p0.like(np.where(dom, val, 0.0)),
        lam=m_p0.like(lam_out), lam_min=m_p0.like(lmin), m_pf=m_p0.like(seeds | lmin),
        sigmas=[float(s) for s in sig], known_counts=counts,
    )


@dataclass
class SublayerValues:
    voxels: np.ndarray  # (N, 3) integer indices, x-fastest order
    t_gran: np.ndarray
    t_mol: np.ndarray
    t_gm: np.ndarray

    def rows(self):
        for (x, y, z), a, b, c in zip(self.voxels, self.t_gran, self.t_mol, self.t_gm):
            yield (int(x), int(y), int(z), float(a), float(b), float(c))


def sublayer_thickness(m_pf: Volume, bundle) -> SublayerValues:
    """Granular, molecular and total thickness at mid-layer voxels."""
    check_geometry(m_pf, bundle.gm)
    m = as_mask(m_pf)
    g = as_mask(bundle.gm)
    if (m & ~g).any():
        raise DataError(f"{int((m & ~g).sum())} mid-layer voxels lie outside grey matter")
    # x-fastest ordering: sort by z, then y, then x
    vox = np.argwhere(m.transpose(2, 1, 0))[:, ::-1]
    t = tuple(vox.T)
    return SublayerValues(vox, np.asarray(bundle.d_wm.data)[t], np.asarray(bundle.d_pial.data)[t],
                          np.asarray(bundle.t_gm.data)[t])


def write_sublayer_csv(values: SublayerValues, path) -> None:
    write_csv(path, SUBLAYER_COLUMNS, values.rows())
