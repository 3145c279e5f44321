"""Voxel-grid primitives shared by every stage.

Volumes are numpy arrays indexed ``[x, y, z]`` together with a physical
spacing in millimetres. Vector fields carry a trailing axis of length 3.
Boundary handling for convolutions and derivatives is replicate-edge.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .errors import DomainError, GeometryError, ParameterError

Spacing = Tuple[float, float, float]


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3-D grid (scalar, mask, label) or a 3-D grid of 3-vectors."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
            raise GeometryError(f"spacing must be three finite positive values, got {self.spacing}")
        if data.ndim == 4:
            if data.shape[3] != 3:
                raise GeometryError(f"vector field needs a trailing axis of 3, got {data.shape}")
        elif data.ndim != 3:
            raise GeometryError(f"volume must be 3-D, got shape {data.shape}")
        if min(data.shape[:3]) < 1:
            raise GeometryError(f"empty volume {data.shape}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape[:3])

    @property
    def voxel_volume(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    @property
    def is_vector(self) -> bool:
        return self.data.ndim == 4

    def like(self, data) -> "Volume":
        """New volume with this geometry and different data."""
        return Volume(np.asarray(data), self.spacing)

    def same_geometry(self, other: "Volume") -> bool:
        return self.dims == other.dims and np.allclose(self.spacing, other.spacing, rtol=1e-6, atol=0)


def check_geometry(*volumes: Optional[Volume]) -> None:
    vols = [v for v in volumes if v is not None]
    for v in vols[1:]:
        if not vols[0].same_geometry(v):
            raise GeometryError(
                f"geometry mismatch: {vols[0].dims}@{vols[0].spacing} vs {v.dims}@{v.spacing}")


def as_mask(v: Volume) -> np.ndarray:
    return np.asarray(v.data) != 0


# ---------------------------------------------------------------------------
# smoothing

def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian truncated at radius ceil(4 sigma)."""
    radius = int(math.ceil(4.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _sigmas(sigma) -> Tuple[float, float, float]:
    if np.ndim(sigma) == 0:
        sig = (float(sigma),) * 3
    else:
        sig = tuple(float(s) for s in sigma)
        if len(sig) != 3:
            raise ParameterError(f"sigma needs 1 or 3 components, got {sigma}")
    for s in sig:
        if not math.isfinite(s) or s <= 0:
            raise ParameterError(f"sigma must be finite and > 0, got {sigma}")
    return sig


def _separable(a: np.ndarray, sig) -> np.ndarray:
    out = np.asarray(a, dtype=np.float64)
    for axis, s in enumerate(sig):
        out = ndimage.correlate1d(out, gaussian_kernel(s), axis=axis, mode="nearest")
    return out


def gaussian_smooth(v: Volume, sigma_voxels: Union[float, Sequence[float]],
                    support: Optional[Volume] = None, return_weight: bool = False):
    """Separable truncated Gaussian smoothing.

    With ``support``, performs normalized convolution
    ``smooth(v * m) / smooth(m)``; voxels where the denominator is not above
    1e-12 are set to 0. ``return_weight=True`` also returns the denominator
    (all ones without support).
    """
    sig = _sigmas(sigma_voxels)
    if support is None:
        out = _separable(v.data, sig)
        return (v.like(out), np.ones(v.dims)) if return_weight else v.like(out)
    check_geometry(v, support)
    m = as_mask(support).astype(np.float64)
    num = _separable(np.where(m > 0, v.data, 0.0), sig)
    den = _separable(m, sig)
    defined = den > 1e-12
    out = np.zeros(v.dims)
    out[defined] = num[defined] / den[defined]
    if return_weight:
        return v.like(out), np.where(defined, den, 0.0)
    return v.like(out)


# ---------------------------------------------------------------------------
# derivatives

def gradient(v: Volume) -> Volume:
    """Central differences in mm^-1 (one-sided at faces) as a vector field."""
    if min(v.dims) < 3:
        raise GeometryError(f"gradient needs >= 3 voxels per axis, got {v.dims}")
    g = np.gradient(np.asarray(v.data, dtype=np.float64), *v.spacing, edge_order=1)
    return v.like(np.stack(g, axis=-1))


@dataclass(frozen=True, eq=False)
class HessianEigen:
    """Per-voxel Hessian eigenvalues ordered |l1| <= |l2| <= |l3|.

    ``eigenvalues`` has shape (nx, ny, nz, 3), ``e3`` the unit eigenvector of
    l3 with a nonnegative z component, ``frobenius`` the Hessian norm. Voxels
    outside the evaluation mask hold zeros.
    """

    eigenvalues: np.ndarray
    e3: np.ndarray
    frobenius: np.ndarray
    spacing: Spacing


def _hessian_components(a: np.ndarray, spacing):
    p = np.pad(a, 1, mode="edge")
    c = (slice(1, -1),) * 3

    def sh(dx, dy, dz):
        return p[1 + dx:p.shape[0] - 1 + dx, 1 + dy:p.shape[1] - 1 + dy, 1 + dz:p.shape[2] - 1 + dz]

    sx, sy, sz = spacing
    center = p[c]
    hxx = ((sh(1, 0, 0) + sh(-1, 0, 0)) - 2.0 * center) / (sx * sx)
    hyy = ((sh(0, 1, 0) + sh(0, -1, 0)) - 2.0 * center) / (sy * sy)
    hzz = ((sh(0, 0, 1) + sh(0, 0, -1)) - 2.0 * center) / (sz * sz)
    hxy = ((sh(1, 1, 0) - sh(1, -1, 0)) - (sh(-1, 1, 0) - sh(-1, -1, 0))) / (4.0 * sx * sy)
    hxz = ((sh(1, 0, 1) - sh(1, 0, -1)) - (sh(-1, 0, 1) - sh(-1, 0, -1))) / (4.0 * sx * sz)
    hyz = ((sh(0, 1, 1) - sh(0, 1, -1)) - (sh(0, -1, 1) - sh(0, -1, -1))) / (4.0 * sy * sz)
    return hxx, hyy, hzz, hxy, hxz, hyz


def hessian_matrices(v: Volume, scale_mm: float, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Gaussian-smoothed Hessians at ``scale_mm`` as an (N, 3, 3) stack.

    N is the number of voxels in ``mask`` (all voxels when omitted), in
    C order of the grid.
    """
    if not math.isfinite(scale_mm) or scale_mm <= 0:
        raise ParameterError(f"scale must be finite and > 0, got {scale_mm}")
    sig = tuple(scale_mm / s for s in v.spacing)
    if min(sig) < 0.25:
        raise ParameterError(
            f"scale {scale_mm} mm is below 0.25 voxel on this grid (sigma_voxels={sig})")
    smooth = _separable(v.data, sig)
    comps = _hessian_components(smooth, v.spacing)
    if mask is None:
        mask = np.ones(v.dims, dtype=bool)
    hxx, hyy, hzz, hxy, hxz, hyz = (c[mask] for c in comps)
    H = np.empty((hxx.size, 3, 3))
    H[:, 0, 0], H[:, 1, 1], H[:, 2, 2] = hxx, hyy, hzz
    H[:, 0, 1] = H[:, 1, 0] = hxy
    H[:, 0, 2] = H[:, 2, 0] = hxz
    H[:, 1, 2] = H[:, 2, 1] = hyz
    return H


def hessian_eigen(v: Volume, scale_mm: float, mask: Optional[Volume] = None) -> HessianEigen:
    """Eigen-decomposition of the scale-space Hessian.

    The scale is in millimetres and converted per axis to a Gaussian sigma in
    voxels; each must be at least 0.25. ``mask`` restricts the (costly)
    decomposition; other voxels get zeros.
    """
    if mask is not None:
        check_geometry(v, mask)
        m = as_mask(mask)
    else:
        m = np.ones(v.dims, dtype=bool)
    H = hessian_matrices(v, scale_mm, m)
    w, vec = np.linalg.eigh(H)
    order = np.argsort(np.abs(w), axis=-1, kind="stable")
    w = np.take_along_axis(w, order, axis=-1)
    e3 = np.take_along_axis(vec, order[:, None, :], axis=-1)[:, :, 2]
    e3 = np.where(e3[:, 2:3] < 0, -e3, e3)
    frob = np.sqrt(np.einsum("nij,nij->n", H, H))

    eig = np.zeros(v.dims + (3,))
    vec3 = np.zeros(v.dims + (3,))
    fro = np.zeros(v.dims)
    eig[m], vec3[m], fro[m] = w, e3, frob
    return HessianEigen(eig, vec3, fro, v.spacing)


# ---------------------------------------------------------------------------
# interpolation

def trilinear_sample(v: Volume, p) -> Union[float, np.ndarray]:
    """Trilinear interpolation at continuous voxel coordinates.

    ``p`` is a single point (3,) or an array of points (N, 3); every
    coordinate must lie in [0, dim - 1].
    """
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    hi = np.asarray(v.dims, dtype=np.float64) - 1.0
    if not np.all(np.isfinite(pts)) or np.any(pts < 0) or np.any(pts > hi):
        raise DomainError("sample point outside [0, dim-1]")
    out = _trilinear(np.asarray(v.data, dtype=np.float64), pts)
    return float(out[0]) if single else out


def _trilinear(a: np.ndarray, pts: np.ndarray) -> np.ndarray:
    dims = np.asarray(a.shape[:3])
    i0 = np.minimum(np.floor(pts).astype(np.int64), np.maximum(dims - 2, 0))
    i0 = np.maximum(i0, 0)
    f = pts - i0
    i1 = np.minimum(i0 + 1, dims - 1)
    x0, y0, z0 = i0.T
    x1, y1, z1 = i1.T
    fx, fy, fz = f.T
    c00 = a[x0, y0, z0] * (1 - fx) + a[x1, y0, z0] * fx
    c01 = a[x0, y0, z1] * (1 - fx) + a[x1, y0, z1] * fx
    c10 = a[x0, y1, z0] * (1 - fx) + a[x1, y1, z0] * fx
    c11 = a[x0, y1, z1] * (1 - fx) + a[x1, y1, z1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


# ---------------------------------------------------------------------------
# morphology and connectivity

_RANK = {6: 1, 18: 2, 26: 3}


def structure(connectivity: int) -> np.ndarray:
    if connectivity not in _RANK:
        raise ParameterError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    return ndimage.generate_binary_structure(3, _RANK[connectivity])


def morphology(m: Volume, op: str, connectivity: int = 6,
               condition: Optional[Volume] = None, iterations: int = 1) -> Volume:
    """Binary erosion or dilation; with ``condition``, only voxels inside it change."""
    check_geometry(m, condition)
    st = structure(connectivity)
    a = as_mask(m)
    if op == "erode":
        out = ndimage.binary_erosion(a, st, iterations=iterations, border_value=0)
    elif op == "dilate":
        out = ndimage.binary_dilation(a, st, iterations=iterations, border_value=0)
    else:
        raise ParameterError(f"unknown morphology op {op!r}")
    if condition is not None:
        c = as_mask(condition)
        out = np.where(c, out, a)
    return m.like(out)


def connected_components(m: Volume, connectivity: int = 26) -> Tuple[Volume, np.ndarray]:
    """Label components; labels ascend by first voxel in x-fastest scan order.

    Returns the label volume (0 = background) and ``sizes`` where
    ``sizes[i]`` is the size of label ``i + 1``.
    """
    st = structure(connectivity)
    # ndimage scans in C order, so transpose to make x the fastest axis
    lab, n = ndimage.label(as_mask(m).T, structure=st)
    lab = np.ascontiguousarray(lab.T).astype(np.int32)
    sizes = np.bincount(lab.ravel(), minlength=n + 1)[1:]
    return m.like(lab), sizes


def dilate6(a: np.ndarray) -> np.ndarray:
    """``a`` plus every voxel 6-adjacent to it."""
    return ndimage.binary_dilation(a, structure(6), border_value=0)


def dilate26(a: np.ndarray) -> np.ndarray:
    return ndimage.binary_dilation(a, structure(26), border_value=0)
