"""Laplace-field thickness over grey matter.

Jacobi relaxation of the anisotropic 7-point Laplacian between a WM
boundary band (psi = 0) and a pial band (psi = 1), then Eulerian
upwind solves for the streamline lengths measured from either boundary.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit
from scipy import ndimage

from .errors import ConvergenceError, DataError, ParameterError, TopologyError
from .grid import Volume, as_mask, check_geometry, connected_components, dilate6

log = logging.getLogger(__name__)

LAPLACE_TOL = 1e-6
LAPLACE_MAX_ITER = 5000
STREAM_TOL = 1e-6
STREAM_MAX_ITER = 1000

# neighbour slots in the extended value vector
_WM_SLOT, _PIAL_SLOT = 0, 1


@dataclass
class LaplaceResult:
    psi: Volume
    iterations: int
    converged: bool
    max_update: float


@dataclass
class ThicknessBundle:
    psi: Volume
    vhat: Volume
    d_wm: Volume
    d_pial: Volume
    t_gm: Volume
    gm: Volume
    laplace_iterations: int = 0
    laplace_converged: bool = True
    stream_iterations: int = 0
    stream_converged: bool = True
    degenerate_gradient: int = 0
    fallback_voxels: int = 0
    flags: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.laplace_converged and self.stream_converged


def _check_inputs(gm, wm_boundary, pial):
    check_geometry(gm, wm_boundary, pial)
    g, w, p = as_mask(gm), as_mask(wm_boundary), as_mask(pial)
    if (w & p).any():
        raise DataError("WM and pial boundary bands overlap")
    if (g & (w | p)).any():
        raise DataError("boundary bands overlap grey matter")
    if not g.any():
        raise DataError("grey matter mask is empty")
    return g, w, p


def check_topology(gm: Volume, wm_boundary: Volume, pial: Volume) -> None:
    """Every 6-connected GM component must touch both boundary bands."""
    g, w, p = _check_inputs(gm, wm_boundary, pial)
    lab, sizes = connected_components(gm.like(g), 6)
    L = lab.data
    n = len(sizes)
    near_w = np.zeros(n + 1, bool)
    near_p = np.zeros(n + 1, bool)
    near_w[np.unique(L[dilate6(w) & g])] = True
    near_p[np.unique(L[dilate6(p) & g])] = True
    bad = [k for k in range(1, n + 1) if not (near_w[k] and near_p[k])]
    if bad:
        desc = []
        for k in bad[:10]:
            first = tuple(int(c) for c in np.argwhere(L.T == k)[0][::-1])
            side = "WM" if not near_w[k] else "pial"
            desc.append(f"component {k} (size {sizes[k - 1]}, first voxel {first}) has no path to {side}")
        raise TopologyError("; ".join(desc) + (f"; and {len(bad) - 10} more" if len(bad) > 10 else ""))


def _stencil(g, w, p):
    """Neighbour table for GM voxels into ``[WM, pial, gm_0, gm_1, ...]``.

    Neighbours that are neither GM nor a boundary band (background next
    to both tissues, or the grid edge) reference the voxel itself, which
    gives a zero-flux condition.
    """
    shape = g.shape
    vox = np.argwhere(g)
    n = len(vox)
    index = np.full(shape, -1, np.int64)
    index[tuple(vox.T)] = np.arange(n) + 2
    nb = np.empty((n, 6), np.int64)
    self_slot = np.arange(n) + 2
    for a in range(3):
        for k, sgn in enumerate((-1, 1)):
            q = vox.copy()
            q[:, a] += sgn
            ok = (q[:, a] >= 0) & (q[:, a] < shape[a])
            qc = np.clip(q, 0, np.asarray(shape) - 1)
            qt = tuple(qc.T)
            slot = np.where(index[qt] >= 0, index[qt], -1)
            slot = np.where(w[qt], _WM_SLOT, slot)
            slot = np.where(p[qt], _PIAL_SLOT, slot)
            slot = np.where(ok & (slot >= 0), slot, self_slot)
            nb[:, 2 * a + k] = slot
    return vox, nb


def _weights(nb, spacing, boundary):
    """Per-voxel normalized stencil weights.

    With ``boundary="face"`` a band neighbour is taken to hold its Dirichlet
    value on the shared voxel face (half a voxel away) and the axis uses the
    non-uniform three-point second difference; ``"center"`` places it at
    the band voxel centre (the plain 7-point stencil).
    """
    n = nb.shape[0]
    theta = np.ones((n, 6))
    if boundary == "face":
        theta[nb < 2] = 0.5
    elif boundary != "center":
        raise ParameterError(f"boundary must be 'face' or 'center', got {boundary!r}")
    c = np.empty((n, 6))
    for a, s in enumerate(spacing):
        tl, tr = theta[:, 2 * a], theta[:, 2 * a + 1]
        c[:, 2 * a] = 2.0 / (tl * (tl + tr) * s * s)
        c[:, 2 * a + 1] = 2.0 / (tr * (tl + tr) * s * s)
    return c / c.sum(axis=1, keepdims=True)


def _initial_guess(g, w, p, spacing, boundary):
    off = 0.5 * min(spacing) if boundary == "face" else 0.0
    dw = ndimage.distance_transform_edt(~w, sampling=spacing)[g] - off
    dp = ndimage.distance_transform_edt(~p, sampling=spacing)[g] - off
    return np.clip(dw / np.maximum(dw + dp, 1e-300), 0.0, 1.0)


def solve_laplace(gm: Volume, wm_boundary: Volume, pial: Volume, tol: float = LAPLACE_TOL,
                  max_iter: int = LAPLACE_MAX_ITER, initial: str = "distance",
                  boundary: str = "face") -> LaplaceResult:
    """Jacobi solve of the Laplace equation on GM with Dirichlet bands.

    The iteration starts from the ratio of Euclidean distances to the two
    bands (``initial="distance"``) or from 0.5 (``initial="half"``) and
    stops once the largest update falls below ``tol``. The returned psi is
    0 on the WM band, 1 on the pial band, and 0 elsewhere outside GM.
    """
    g, w, p = _check_inputs(gm, wm_boundary, pial)
    check_topology(gm, wm_boundary, pial)
    vox, nb = _stencil(g, w, p)
    wn = _weights(nb, gm.spacing, boundary)
    ext = np.empty(len(vox) + 2)
    ext[_WM_SLOT], ext[_PIAL_SLOT] = 0.0, 1.0
    ext[2:] = _initial_guess(g, w, p, gm.spacing, boundary) if initial == "distance" else 0.5
    it, upd = _jacobi(ext, nb, wn, tol, max_iter)
    converged = upd < tol
    psi = np.zeros(g.shape)
    psi[tuple(vox.T)] = ext[2:]
    psi[p] = 1.0
    if not converged:
        log.warning("laplace: not converged after %d iterations (max update %.3g)", it, upd)
    return LaplaceResult(gm.like(psi), it, converged, upd)


@njit(cache=True)
def _jacobi(ext, nb, wn, tol, max_iter):
    n = nb.shape[0]
    new = ext.copy()
    upd = np.inf
    it = 0
    while it < max_iter:
        it += 1
        upd = 0.0
        for i in range(n):
            s = 0.0
            for k in range(6):
                s += wn[i, k] * ext[nb[i, k]]
            d = abs(s - ext[i + 2])
            if d > upd:
                upd = d
            new[i + 2] = s
        ext[2:] = new[2:]
        if upd < tol:
            break
    return it, upd


def gradient_on_gm(psi: Volume, gm: Volume, wm_boundary: Volume, pial: Volume) -> np.ndarray:
    """Gradient of psi at GM voxels using GM and band voxels only.

    Central differences where both axis neighbours are usable, one-sided
    where one is, zero where neither is.
    """
    g, w, p = as_mask(gm), as_mask(wm_boundary), as_mask(pial)
    usable = g | w | p
    a = np.asarray(psi.data, dtype=np.float64)
    out = np.zeros(g.shape + (3,))
    pad_u = np.pad(usable, 1, constant_values=False)
    pad_a = np.pad(a, 1)
    c = (slice(1, -1),) * 3
    for ax, s in enumerate(psi.spacing):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[ax] = slice(0, -2)
        hi[ax] = slice(2, None)
        lo, hi = tuple(lo), tuple(hi)
        ul, uh = pad_u[lo], pad_u[hi]
        al, ah, ac = pad_a[lo], pad_a[hi], pad_a[c]
        d = np.where(ul & uh, (ah - al) / (2 * s),
                     np.where(uh, (ah - ac) / s, np.where(ul, (ac - al) / s, 0.0)))
        out[..., ax] = np.where(g, d, 0.0)
    return out


def normalize_gradient(psi: Volume, gm: Volume, wm_boundary: Volume, pial: Volume,
                       eps: float = 1e-12):
    """Unit gradient field of psi on GM and a mask of degenerate voxels."""
    grad = gradient_on_gm(psi, gm, wm_boundary, pial)
    norm = np.linalg.norm(grad, axis=-1)
    g = as_mask(gm)
    ok = g & (norm > eps)
    v = np.zeros_like(grad)
    v[ok] = grad[ok] / norm[ok][:, None]
    return psi.like(v), g & ~ok


@njit(cache=True)
def _sweep_lengths(label, V, spacing, direction, tol, max_iter):
    """Upwind solve of grad(D) . (direction * V) = 1 by alternating sweeps.

    label: 1 = GM (unknown), 2 = source band, other = excluded.
    """
    nx, ny, nz = label.shape
    D = np.zeros((nx, ny, nz))
    fallback = np.zeros((nx, ny, nz), np.bool_)
    dims = (nx, ny, nz)
    it = 0
    change = np.inf
    while it < max_iter:
        it += 1
        change = 0.0
        for sweep in range(8):
            sxd = 1 if (sweep & 1) == 0 else -1
            syd = 1 if (sweep & 2) == 0 else -1
            szd = 1 if (sweep & 4) == 0 else -1
            for ii in range(nx):
                x = ii if sxd > 0 else nx - 1 - ii
                for jj in range(ny):
                    y = jj if syd > 0 else ny - 1 - jj
                    for kk in range(nz):
                        z = kk if szd > 0 else nz - 1 - kk
                        if label[x, y, z] != 1:
                            continue
                        W = 0.0
                        acc = 0.0
                        nb_src = 0.0
                        c = (x, y, z)
                        for a in range(3):
                            va = direction * V[x, y, z, a]
                            if va == 0.0:
                                continue
                            step = -1 if va > 0 else 1
                            q = c[a] + step
                            if q < 0 or q >= dims[a]:
                                continue
                            if a == 0:
                                lab = label[q, y, z]
                                dq = D[q, y, z]
                            elif a == 1:
                                lab = label[x, q, z]
                                dq = D[x, q, z]
                            else:
                                lab = label[x, y, q]
                                dq = D[x, y, q]
                            wa = abs(va) / spacing[a]
                            if lab == 1:
                                W += wa
                                acc += wa * dq
                            elif lab == 2:
                                W += wa
                                nb_src += wa
                        if W == 0.0:
                            fallback[x, y, z] = True
                            continue
                        # source faces sit half a voxel step upstream
                        new = (1.0 + acc - 0.5 * nb_src / W) / W
                        d = abs(new - D[x, y, z])
                        if d > change:
                            change = d
                        D[x, y, z] = new
        if change < tol:
            break
    return D, fallback, it, change


def _fallback_fill(D, fallback, g):
    """Voxels without upwind support take the mean of their GM 6-neighbours."""
    if not fallback.any():
        return D
    D = D.copy()
    for x, y, z in np.argwhere(fallback):
        vals = []
        for a in range(3):
            for s in (-1, 1):
                q = [x, y, z]
                q[a] += s
                if 0 <= q[a] < g.shape[a] and g[tuple(q)] and not fallback[tuple(q)]:
                    vals.append(D[tuple(q)])
        D[x, y, z] = float(np.mean(vals)) if vals else 0.0
    return D


def streamline_lengths(vhat: Volume, gm: Volume, wm_boundary: Volume, pial: Volume,
                       tol: float = STREAM_TOL, max_iter: int = STREAM_MAX_ITER):
    """Eulerian streamline lengths from the WM band and from the pial band.

    Returns ``(d_wm, d_pial, info)`` where ``info`` holds iteration counts,
    convergence flags and the number of fallback voxels.
    """
    g, w, p = _check_inputs(gm, wm_boundary, pial)
    V = np.ascontiguousarray(vhat.data, dtype=np.float64)
    sp = np.asarray(gm.spacing, dtype=np.float64)
    info = {}
    out = []
    for name, src, sgn in (("wm", w, 1.0), ("pial", p, -1.0)):
        label = np.zeros(g.shape, np.int8)
        label[g] = 1
        label[src] = 2
        D, fb, it, change = _sweep_lengths(label, V, sp, sgn, tol, max_iter)
        D = _fallback_fill(D, fb, g)
        D[~g] = 0.0
        out.append(gm.like(D))
        info[name] = {"iterations": int(it), "converged": bool(change < tol),
                      "max_change": float(change), "fallback": int(fb.sum())}
    return out[0], out[1], info


def assemble_thickness(d_wm: Volume, d_pial: Volume) -> Volume:
    check_geometry(d_wm, d_pial)
    return d_wm.like(np.asarray(d_wm.data) + np.asarray(d_pial.data))


def boundary_bands(gm: Volume, wm: Volume, pial: Volume):
    """One-voxel Dirichlet halos: WM and pial voxels 6-adjacent to GM."""
    g = as_mask(gm)
    near = dilate6(g) & ~g
    return gm.like(as_mask(wm) & near), gm.like(as_mask(pial) & near)


def compute_thickness(gm: Volume, wm: Volume, pial: Volume, tol: float = LAPLACE_TOL,
                      max_iter: int = LAPLACE_MAX_ITER, stream_tol: float = STREAM_TOL,
                      stream_max_iter: int = STREAM_MAX_ITER, strict: bool = False) -> ThicknessBundle:
    """Full thickness stage. Pial voxels inside ``gm`` (fissures) are removed from it.

    With ``strict=True`` a non-converged solve raises ConvergenceError
    carrying the bundle as ``exc.bundle``.
    """
    check_geometry(gm, wm, pial)
    g = as_mask(gm) & ~as_mask(pial) & ~as_mask(wm)
    gm_eff = gm.like(g)
    wb, pb = boundary_bands(gm_eff, wm, pial)
    lap = solve_laplace(gm_eff, wb, pb, tol, max_iter)
    vhat, degenerate = normalize_gradient(lap.psi, gm_eff, wb, pb)
    d_wm, d_pial, info = streamline_lengths(vhat, gm_eff, wb, pb, stream_tol, stream_max_iter)
    t = assemble_thickness(d_wm, d_pial)
    bundle = ThicknessBundle(
        psi=lap.psi, vhat=vhat, d_wm=d_wm, d_pial=d_pial, t_gm=t, gm=gm_eff,
        laplace_iterations=lap.iterations, laplace_converged=lap.converged,
        stream_iterations=max(info["wm"]["iterations"], info["pial"]["iterations"]),
        stream_converged=info["wm"]["converged"] and info["pial"]["converged"],
        degenerate_gradient=int(degenerate.sum()),
        fallback_voxels=info["wm"]["fallback"] + info["pial"]["fallback"],
        flags={"laplace_max_update": lap.max_update, "streams": info},
    )
    if strict and not bundle.converged:
        exc = ConvergenceError(
            f"thickness did not converge (laplace {lap.iterations} it, converged={lap.converged}; "
            f"streamlines converged={bundle.stream_converged})")
        exc.bundle = bundle
        raise exc
    return bundle
