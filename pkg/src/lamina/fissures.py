"""Fissure extraction by geodesic-distance skeletonization.

A first-order fast-marching solve of ``F |grad D| = 1`` from the WM/GM
boundary gives D over grey matter; fissures are the voxels where D peaks
along its own gradient, thinned to one voxel by topology-preserving
simple-point removal.
"""
from __future__ import annotations

import heapq
import itertools
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit
from scipy import ndimage

from .errors import DataError
from .grid import (Volume, as_mask, check_geometry, connected_components, dilate6, dilate26,
                   gaussian_smooth, gradient, _trilinear)

log = logging.getLogger(__name__)

SPEED_SIGMA = 1.5


@dataclass
class GeodesicDistance:
    D: Volume
    source: Volume
    order: np.ndarray  # flat C-order indices in acceptance order

    @property
    def unreachable(self) -> np.ndarray:
        return ~np.isfinite(self.D.data)


def speed_map(v: Volume, sigma_voxels: float = SPEED_SIGMA) -> Volume:
    """Smoothed image clamped below at 1e-6 * max."""
    F = gaussian_smooth(v, sigma_voxels).data
    fmax = float(F.max())
    if not np.isfinite(fmax) or fmax <= 0:
        raise DataError("speed map is not positive anywhere (all-zero or negative image)")
    return v.like(np.maximum(F, 1e-6 * fmax))


# ---------------------------------------------------------------------------
# fast marching

@njit(cache=True)
def _solve_local(D, state, F, i, x, y, z, nx, ny, nz, h):
    vals = np.empty(3)
    hs = np.empty(3)
    m = 0
    strides = (ny * nz, nz, 1)
    coords = (x, y, z)
    dims = (nx, ny, nz)
    for a in range(3):
        best = np.inf
        c = coords[a]
        s = strides[a]
        if c > 0 and state[i - s] == 2 and D[i - s] < best:
            best = D[i - s]
        if c < dims[a] - 1 and state[i + s] == 2 and D[i + s] < best:
            best = D[i + s]
        if best < np.inf:
            vals[m] = best
            hs[m] = h[a]
            m += 1
    # insertion sort by value
    for p in range(1, m):
        q = p
        while q > 0 and vals[q - 1] > vals[q]:
            vals[q - 1], vals[q] = vals[q], vals[q - 1]
            hs[q - 1], hs[q] = hs[q], hs[q - 1]
            q -= 1
    rhs = 1.0 / (F[i] * F[i])
    u = vals[0] + hs[0] / F[i]
    k = 1
    while k < m and u > vals[k]:
        k += 1
        A = 0.0
        B = 0.0
        C = -rhs
        for j in range(k):
            w = 1.0 / (hs[j] * hs[j])
            A += w
            B += -2.0 * vals[j] * w
            C += vals[j] * vals[j] * w
        disc = B * B - 4.0 * A * C
        if disc < 0.0:
            disc = 0.0
        u = (-B + np.sqrt(disc)) / (2.0 * A)
    return u


@njit(cache=True)
def _fmm(F, source, domain, h, init):
    nx, ny, nz = F.shape
    n = nx * ny * nz
    Ff = F.ravel()
    src = source.ravel()
    dom = domain.ravel()
    D = np.full(n, np.inf)
    state = np.zeros(n, np.uint8)
    order = np.empty(n, np.int64)
    norder = 0
    heap = [(0.0, np.int64(0))]
    heap.pop()
    for i in range(n):
        if src[i]:
            D[i] = init[i]
            heapq.heappush(heap, (init[i], np.int64(i)))
    strides = (ny * nz, nz, 1)
    while len(heap) > 0:
        d, i = heapq.heappop(heap)
        if state[i] == 2 or d > D[i]:
            continue
        state[i] = 2
        order[norder] = i
        norder += 1
        x = i // (ny * nz)
        y = (i // nz) % ny
        z = i % nz
        coords = (x, y, z)
        dims = (nx, ny, nz)
        for a in range(3):
            for sgn in (-1, 1):
                c = coords[a] + sgn
                if c < 0 or c >= dims[a]:
                    continue
                j = i + sgn * strides[a]
                if state[j] == 2 or not dom[j]:
                    continue
                jx = j // (ny * nz)
                jy = (j // nz) % ny
                jz = j % nz
                u = _solve_local(D, state, Ff, j, jx, jy, jz, nx, ny, nz, h)
                if u < D[j]:
                    D[j] = u
                    state[j] = 1
                    heapq.heappush(heap, (u, np.int64(j)))
    return D.reshape(F.shape), order[:norder]


def solve_eikonal(F: Volume, source: Volume, domain: Volume,
                  source_values: Optional[Volume] = None) -> GeodesicDistance:
    """First-order fast marching on the (anisotropic) grid.

    Source voxels are fixed at D = 0 (or at ``source_values``, e.g. exact
    distances around a point source) and front propagation is confined to
    ``domain``; voxels in the domain that the front never reaches keep
    ``+inf``.
    """
    check_geometry(F, source, domain)
    src = as_mask(source)
    dom = as_mask(domain)
    if not src.any():
        raise DataError("eikonal source is empty")
    if not (dilate6(src) & dom).any():
        raise DataError("eikonal source does not touch the domain")
    Fd = np.asarray(F.data, dtype=np.float64)
    if np.any(Fd[dom] <= 0) or not np.all(np.isfinite(Fd[dom])):
        raise DataError("speed must be finite and > 0 on the domain")
    if source_values is None:
        init = np.zeros(src.size)
    else:
        check_geometry(F, source_values)
        init = np.asarray(source_values.data, dtype=np.float64).ravel()
        if not np.all(np.isfinite(init[src.ravel()])):
            raise DataError("source values must be finite")
    D, order = _fmm(Fd, src, dom, np.asarray(F.spacing, dtype=np.float64), init)
    D = np.where(dom | src, D, np.inf)
    return GeodesicDistance(F.like(D), source, order)


# ---------------------------------------------------------------------------
# directional extrema

def _fill_outside(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Replace invalid voxels by their nearest valid neighbour's value."""
    if valid.all():
        return values
    idx = ndimage.distance_transform_edt(~valid, return_distances=False, return_indices=True)
    return values[tuple(idx)]


def directional_extrema(values: np.ndarray, direction: np.ndarray, domain: np.ndarray,
                        spacing, kind: str = "max", step: str = "unit",
                        eligible: Optional[np.ndarray] = None, tie: str = "symmetric") -> np.ndarray:
    """Voxels that are extrema of ``values`` along ``direction`` (both sides).

    ``direction`` holds physical unit vectors. The two samples sit at
    ``x +/- delta`` with ``delta`` one voxel long (``step="unit"``; the
    smallest spacing on anisotropic grids) or as long as the voxel's extent
    along the direction (``step="extent"``), which gives bands exactly one
    projected voxel thick. Samples whose nearest voxel is outside the domain
    count as -inf (maxima) or +inf (minima). A voxel is kept when it is
    >= (<=) both samples and strictly so on at least one side. With
    ``tie="half_open"`` it must be strictly beyond the ``x - delta`` sample
    instead, so a two-voxel plateau keeps only the voxel on the -delta side.
    """
    if tie not in ("symmetric", "half_open"):
        raise ValueError(f"unknown tie rule {tie!r}")
    sp = np.asarray(spacing, dtype=np.float64)
    sel = domain if eligible is None else domain & eligible
    idx = np.argwhere(sel)
    out = np.zeros(domain.shape, dtype=bool)
    if idx.size == 0:
        return out
    u = direction[sel]
    if step == "unit":
        L = np.full(len(idx), sp.min())
    elif step == "extent":
        L = np.abs(u) @ sp
    else:
        raise ValueError(f"unknown step {step!r}")
    delta = u * (L[:, None] / sp[None, :])
    valid = domain & np.isfinite(values)
    filled = _fill_outside(np.where(valid, values, 0.0), valid)
    centre = values[sel]
    dims = np.asarray(domain.shape)
    bad = -np.inf if kind == "max" else np.inf
    samples = []
    for sgn in (1.0, -1.0):
        p = idx + sgn * delta
        r = np.rint(p).astype(np.int64)
        inside = np.all((r >= 0) & (r < dims), axis=1)
        rc = np.clip(r, 0, dims - 1)
        inside &= valid[rc[:, 0], rc[:, 1], rc[:, 2]]
        s = _trilinear(filled, np.clip(p, 0, dims - 1))
        samples.append(np.where(inside, s, bad))
    s1, s2 = samples
    if kind == "min":
        centre, s1, s2 = -centre, -s1, -s2
    if tie == "symmetric":
        keep = (centre >= s1) & (centre >= s2) & ((centre > s1) | (centre > s2))
    else:
        keep = (centre >= s1) & (centre > s2)
    out[tuple(idx[keep].T)] = True
    return out


def unit_gradient(values: np.ndarray, valid: np.ndarray, spacing, eps: float = 1e-9):
    """Physical unit gradient of ``values`` (invalid voxels filled by nearest value).

    Returns the unit vectors and a mask of voxels whose gradient norm is
    at least ``eps`` (mm^-1).
    """
    filled = _fill_outside(np.where(valid, values, 0.0), valid)
    g = gradient(Volume(filled, spacing)).data
    norm = np.linalg.norm(g, axis=-1)
    ok = norm >= eps
    u = np.zeros_like(g)
    u[ok] = g[ok] / norm[ok][:, None]
    return u, ok


def upwind_gradient(values: np.ndarray, valid: np.ndarray, spacing, eps: float = 1e-9):
    """Physical unit gradient from upwind one-sided differences.

    Per axis the difference towards the smaller valid neighbour is used
    (the causal direction of a fast-marching solution); central differences
    vanish on ridges centred on a voxel, upwind ones do not.
    """
    a = np.where(valid, values, np.inf)
    g = np.zeros(values.shape + (3,))
    for ax, s in enumerate(spacing):
        lo = np.full(a.shape, np.inf)
        hi = np.full(a.shape, np.inf)
        sl_c = [slice(None)] * 3
        sl_n = [slice(None)] * 3
        sl_c[ax], sl_n[ax] = slice(1, None), slice(None, -1)
        lo[tuple(sl_c)] = a[tuple(sl_n)]
        hi[tuple(sl_n)] = a[tuple(sl_c)]
        with np.errstate(invalid="ignore"):
            back = np.where(np.isfinite(lo), (a - lo) / s, 0.0)  # slope from the lower-index side
            fwd = np.where(np.isfinite(hi), (a - hi) / s, 0.0)  # drop towards the higher-index side
        use_b = (back > 0) & (back >= fwd)
        use_f = (fwd > 0) & (fwd > back)
        g[..., ax] = np.where(use_b, back, np.where(use_f, -fwd, 0.0))
    g[~valid] = 0.0
    norm = np.linalg.norm(g, axis=-1)
    ok = norm >= eps
    u = np.zeros_like(g)
    u[ok] = g[ok] / norm[ok][:, None]
    return u, ok


def directional_maxima(D: GeodesicDistance, domain: Volume) -> Volume:
    """Local maxima of D along its own (upwind) gradient direction."""
    check_geometry(D.D, domain)
    fin = np.isfinite(D.D.data)
    dom = as_mask(domain) & fin
    # source voxels (D = 0) take part in the upwind differences; samples may
    # fall anywhere D is finite, only the tested voxels are restricted to domain
    u, ok = upwind_gradient(D.D.data, fin, D.D.spacing)
    out = directional_extrema(D.D.data, u, fin, D.D.spacing, kind="max", eligible=ok & dom)
    return domain.like(out)


# ---------------------------------------------------------------------------
# thinning

def _neighbourhood_tables():
    offs = list(itertools.product((-1, 0, 1), repeat=3))
    n = len(offs)
    adj26 = np.full((n, 26), -1, np.int64)
    adj6 = np.full((n, 6), -1, np.int64)
    for p, a in enumerate(offs):
        k26 = k6 = 0
        for q, b in enumerate(offs):
            if p == q:
                continue
            d = [abs(a[i] - b[i]) for i in range(3)]
            if max(d) == 1:
                adj26[p, k26] = q
                k26 += 1
                if sum(d) == 1:
                    adj6[p, k6] = q
                    k6 += 1
    l1 = np.array([sum(abs(c) for c in o) for o in offs])
    return adj26, adj6, l1


_ADJ26, _ADJ6, _L1 = _neighbourhood_tables()


@njit(cache=True)
def _is_simple(S, x, y, z, adj26, adj6, l1):
    nx, ny, nz = S.shape
    nb = np.zeros(27, np.bool_)
    p = 0
    for dx in range(-1, 2):
        for dy in range(-1, 2):
            for dz in range(-1, 2):
                xx, yy, zz = x + dx, y + dy, z + dz
                if 0 <= xx < nx and 0 <= yy < ny and 0 <= zz < nz:
                    nb[p] = S[xx, yy, zz]
                p += 1
    # foreground: 26-components of N26 minus centre
    seen = np.zeros(27, np.bool_)
    stack = np.empty(27, np.int64)
    ncomp = 0
    for s in range(27):
        if s == 13 or not nb[s] or seen[s]:
            continue
        ncomp += 1
        if ncomp > 1:
            return False
        top = 0
        stack[0] = s
        seen[s] = True
        while top >= 0:
            q = stack[top]
            top -= 1
            for k in range(26):
                r = adj26[q, k]
                if r < 0:
                    break
                if r != 13 and nb[r] and not seen[r]:
                    seen[r] = True
                    top += 1
                    stack[top] = r
    if ncomp != 1:
        return False
    # background: 6-components within N18 that touch a 6-neighbour of the centre
    seen[:] = False
    nbg = 0
    for s in range(27):
        if l1[s] != 1 or nb[s] or seen[s]:
            continue
        nbg += 1
        if nbg > 1:
            return False
        top = 0
        stack[0] = s
        seen[s] = True
        while top >= 0:
            q = stack[top]
            top -= 1
            for k in range(6):
                r = adj6[q, k]
                if r < 0:
                    break
                if r != 13 and l1[r] < 3 and not nb[r] and not seen[r]:
                    seen[r] = True
                    top += 1
                    stack[top] = r
    return nbg == 1


@njit(cache=True)
def _thin(S, vox, axes, adj26, adj6, l1):
    nx, ny, nz = S.shape
    changed = True
    while changed:
        changed = False
        for t in range(vox.shape[0]):
            x, y, z = vox[t, 0], vox[t, 1], vox[t, 2]
            if not S[x, y, z]:
                continue
            a = axes[t]
            c = (x, y, z)
            dims = (nx, ny, nz)
            redundant = False
            for sgn in (-1, 1):
                cc = c[a] + sgn
                if 0 <= cc < dims[a]:
                    if a == 0 and S[cc, y, z]:
                        redundant = True
                    elif a == 1 and S[x, cc, z]:
                        redundant = True
                    elif a == 2 and S[x, y, cc]:
                        redundant = True
            if not redundant:
                continue
            if _is_simple(S, x, y, z, adj26, adj6, l1):
                S[x, y, z] = False
                changed = True
    return S


def is_simple(mask: np.ndarray, voxel) -> bool:
    """26/6 simple-point test of ``voxel`` in ``mask``."""
    return bool(_is_simple(np.ascontiguousarray(mask, dtype=np.bool_), *map(int, voxel),
                           _ADJ26, _ADJ6, _L1))


def thin_to_sheet(candidates: Volume, domain: Volume, D: Optional[Volume] = None) -> Volume:
    """Reduce candidate sheets to one-voxel thickness.

    A voxel is removed when it is a simple point and the set continues
    past it along the dominant axis of the local D gradient, so sheet
    borders survive. Voxels are visited in ascending D (then scan) order,
    repeatedly, until nothing changes.
    """
    check_geometry(candidates, domain, D)
    S = as_mask(candidates) & as_mask(domain)
    if not S.any():
        return candidates.like(S)
    vox = np.argwhere(S)
    if D is None:
        dvals = np.zeros(len(vox))
        axes = np.full(len(vox), 2, np.int64)
    else:
        Dd = np.asarray(D.data, dtype=np.float64)
        fin = np.isfinite(Dd)
        dvals = np.where(fin, Dd, np.inf)[tuple(vox.T)]
        u, _ = upwind_gradient(Dd, fin, D.spacing)
        axes = np.argmax(np.abs(u[tuple(vox.T)]), axis=1).astype(np.int64)
    flat = np.ravel_multi_index(tuple(vox.T), S.shape)
    order = np.lexsort((flat, dvals))
    S = _thin(np.ascontiguousarray(S), vox[order].astype(np.int64), axes[order],
              _ADJ26, _ADJ6, _L1)
    return candidates.like(S)


# ---------------------------------------------------------------------------
# pial surface

def wm_source(wm: Volume, gm: Volume) -> Volume:
    """WM voxels 6-adjacent to grey matter."""
    w = as_mask(wm)
    return wm.like(w & dilate6(as_mask(gm)))


def build_pial(gm: Volume, wm: Volume, fissures: Volume) -> Volume:
    """Fissures plus background voxels 6-adjacent to GM but not to WM."""
    check_geometry(gm, wm, fissures)
    g, w, f = as_mask(gm), as_mask(wm), as_mask(fissures)
    if (g & w).any():
        raise DataError("grey and white matter masks overlap")
    halo = dilate6(g) & ~g & ~w & ~dilate6(w)
    pial = (f | halo) & ~w
    return gm.like(pial)


def wm_distance_ridge(wm: Volume, gm: Volume) -> np.ndarray:
    """GM voxels on the equidistant surfaces between separate WM regions."""
    check_geometry(wm, gm)
    E = ndimage.distance_transform_edt(~as_mask(wm), sampling=wm.spacing)
    ok = np.ones(E.shape, dtype=bool)
    u, has = upwind_gradient(E, ok, wm.spacing)
    return directional_extrema(E, u, ok, wm.spacing, kind="max", eligible=has & as_mask(gm))


@dataclass
class FissureResult:
    speed: Volume
    distance: GeodesicDistance
    candidates: Volume
    fissures: Volume
    pial: Volume


def extract_fissures(image: Volume, wm: Volume, gm: Volume, brain: Optional[Volume] = None,
                     sigma: float = SPEED_SIGMA, min_size: int = 20) -> FissureResult:
    """Full fissure stage: speed, distance, ridge candidates, thinning, pial surface.

    Ridge voxels 26-adjacent to the background outside ``brain`` or to the
    grid border (the outer surface, already part of the pial halo) are
    discarded, as are thinned sheets smaller than ``min_size`` voxels.
    A geodesic ridge is kept only within one voxel of a ridge of the
    Euclidean distance to WM: fronts that collide inside a bright (fast)
    layer parallel to the WM surface give geodesic ridges too, but there
    the WM distance keeps increasing.
    """
    check_geometry(image, wm, gm, brain)
    g = as_mask(gm)
    F = speed_map(image, sigma)
    src = wm_source(wm, gm)
    if not src.data.any():
        raise DataError("no WM voxel is adjacent to GM")
    dist = solve_eikonal(F, src, gm)
    cand = as_mask(directional_maxima(dist, gm))
    outside = ~(as_mask(brain) if brain is not None else (g | as_mask(wm)))
    # the space beyond the grid counts as outside as well
    near_out = dilate26(np.pad(outside, 1, constant_values=True))[1:-1, 1:-1, 1:-1]
    cand &= ~near_out
    cand &= dilate26(wm_distance_ridge(wm, gm))
    thin = as_mask(thin_to_sheet(gm.like(cand), gm, dist.D))
    if thin.any():
        lab, sizes = connected_components(gm.like(thin), 26)
        keep = np.concatenate([[False], sizes >= min_size])
        thin = keep[lab.data]
    fis = gm.like(thin)
    pial = build_pial(gm.like(g & ~thin), wm, fis)
    log.info("fissures: %d candidates, %d sheet voxels", int(cand.sum()), int(thin.sum()))
    return FissureResult(F, dist, gm.like(cand), fis, pial)
