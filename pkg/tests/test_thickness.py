import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from lamina.errors import ConvergenceError, DataError, TopologyError
from lamina.fissures import build_pial
from lamina.grid import Volume, trilinear_sample
from lamina.phantom import PhantomSpec, generate
from lamina.thickness import (LAPLACE_MAX_ITER, LAPLACE_TOL, STREAM_MAX_ITER, STREAM_TOL,
                              assemble_thickness, boundary_bands, check_topology, compute_thickness,
                              normalize_gradient, solve_laplace, streamline_lengths)

from conftest import vol


def test_defaults():
    assert (LAPLACE_TOL, LAPLACE_MAX_ITER, STREAM_TOL, STREAM_MAX_ITER) == (1e-6, 5000, 1e-6, 1000)


def _column(n_gm, lateral=3):
    """GM layer of n_gm voxels between a WM band (z=0) and a pial band (z=n_gm+1)."""
    shape = (lateral, lateral, n_gm + 2)
    g = np.zeros(shape, bool)
    w = np.zeros(shape, bool)
    p = np.zeros(shape, bool)
    g[:, :, 1:-1] = True
    w[:, :, 0] = True
    p[:, :, -1] = True
    return vol(g), vol(w), vol(p)


@pytest.mark.parametrize("initial", ["distance", "half"])
def test_linear_column_center(initial):
    # band values at the band voxel centres: depth i between z = 0 and z = 10
    g, w, p = _column(9)
    r = solve_laplace(g, w, p, tol=1e-12, max_iter=100000, initial=initial, boundary="center")
    assert r.converged
    z = np.arange(1, 10)
    assert np.allclose(r.psi.data[1, 1, 1:-1], z / 10, atol=1e-4)


def test_linear_column_face():
    # band values on the shared faces: 10 voxels between z = 0.5 and z = 10.5
    g, w, p = _column(10)
    r = solve_laplace(g, w, p, tol=1e-12, max_iter=100000, initial="half")
    i = np.arange(10) + 0.5
    assert np.allclose(r.psi.data[1, 1, 1:-1], i / 10, atol=1e-4)
    assert r.iterations > 1


def test_psi_outside_and_bands():
    g, w, p = _column(6)
    r = solve_laplace(g, w, p)
    assert np.all(r.psi.data[p.data] == 1.0)
    assert np.all(r.psi.data[w.data] == 0.0)


@given(st.integers(0, 10**6), st.floats(0.0, 0.35))
def test_maximum_principle(seed, hole_frac):
    rng = np.random.default_rng(seed)
    g, w, p = _column(7, lateral=6)
    gm = g.data & (rng.random(g.data.shape) >= hole_frac)
    try:
        check_topology(vol(gm), w, p)
    except TopologyError:
        assume(False)
    assume(gm.any())
    r = solve_laplace(vol(gm), w, p, tol=1e-10, max_iter=100000)
    psi = r.psi.data[gm]
    assert psi.min() >= 0.0 and psi.max() <= 1.0
    # no strict interior extremum: each value lies within the range of its stencil neighbours
    usable = gm | w.data | p.data
    a = r.psi.data
    for x, y, z in np.argwhere(gm):
        vals = []
        for ax in range(3):
            for s in (-1, 1):
                q = [x, y, z]
                q[ax] += s
                if 0 <= q[ax] < gm.shape[ax] and usable[tuple(q)]:
                    vals.append(a[tuple(q)])
        assert min(vals) - 1e-8 <= a[x, y, z] <= max(vals) + 1e-8


def test_topology_error_island():
    g, w, p = _column(8, lateral=9)
    gm = g.data.copy()
    gm[:, :, 4] = False
    gm[4, 4, 4] = True  # keeps one bridge
    check_topology(vol(gm), w, p)
    gm[4, 4, 4] = False
    with pytest.raises(TopologyError):
        solve_laplace(vol(gm), w, p)


def test_overlapping_bands():
    g, w, p = _column(4)
    with pytest.raises(DataError):
        solve_laplace(g, w, vol(p.data | w.data))


def test_unknown_boundary_mode():
    g, w, p = _column(4)
    with pytest.raises(Exception):
        solve_laplace(g, w, p, boundary="edge")


def test_boundary_bands_are_halos():
    g, w, p = _column(5)
    wb, pb = boundary_bands(g, vol(np.zeros_like(g.data) | w.data), p)
    assert np.array_equal(wb.data, w.data) and np.array_equal(pb.data, p.data)


# ---------------------------------------------------------------- slab phantom

def test_slab_vhat_and_thickness(slab_phantom, slab_bundle):
    ph = slab_phantom
    _, b = slab_bundle
    g = b.gm.data
    v = b.vhat.data[g]
    assert np.allclose(v[:, 2], 1.0) and np.allclose(v[:, :2], 0.0)
    t = b.t_gm.data[g]
    assert np.mean(np.abs(t - 4.0) <= 0.1) > 0.99
    assert abs(t.mean() - 4.0) <= 0.1
    assert b.converged and b.degenerate_gradient == 0


def test_dwm_boundary_layer(slab_bundle):
    _, b = slab_bundle
    g = b.gm.data
    z0 = np.nonzero(g.any(axis=(0, 1)))[0].min()
    layer = b.d_wm.data[:, :, z0]
    assert np.all(layer >= 0) and np.all(layer <= 0.05)


def test_sum_and_ordering(slab_bundle, shell_bundle):
    for _, b in (slab_bundle, shell_bundle):
        g = b.gm.data
        dw, dp, t = b.d_wm.data, b.d_pial.data, b.t_gm.data
        assert np.all(dw[g] >= 0) and np.all(dp[g] >= 0)
        assert np.array_equal(t, dw + dp)
        assert np.all(t[g] >= np.maximum(dw[g], dp[g]))
        assert np.array_equal(assemble_thickness(b.d_wm, b.d_pial).data, t)


def test_vhat_unit_norm(shell_bundle):
    _, b = shell_bundle
    g = b.gm.data
    n = np.linalg.norm(b.vhat.data, axis=-1)
    assert np.allclose(n[g], 1.0)
    assert np.all(n[~g] == 0.0)


def _slab(dims, sp):
    ph = generate(PhantomSpec(kind="slab", dims=dims, spacing=(sp,) * 3))
    return compute_thickness(ph.gm, ph.wm, build_pial(ph.gm, ph.wm, ph.fissure))


def test_slab_resolution_invariance():
    a = _slab((8, 8, 120), 0.05)
    b = _slab((8, 8, 240), 0.025)
    ta = a.t_gm.data[a.gm.data].mean()
    tb = b.t_gm.data[b.gm.data].mean()
    assert abs(ta - tb) <= 0.02 * tb


def test_shell_resolution_invariance(shell_bundle):
    _, hi = shell_bundle
    ph = generate(PhantomSpec(kind="spherical_shell", dims=(64,) * 3, spacing=(2.0,) * 3,
                              thickness=20.0, inner_radius=20.0))
    lo = compute_thickness(ph.gm, ph.wm, build_pial(ph.gm, ph.wm, ph.fissure))
    t_lo = lo.t_gm.data[lo.gm.data].mean() / 2.0  # same shape in voxel units, scaled spacing
    t_hi = hi.t_gm.data[hi.gm.data].mean()
    assert abs(t_lo - t_hi) <= 0.02 * t_hi


# ---------------------------------------------------------------- shell phantom

def _interior(ph, b, lo=2.0, hi=8.0):
    return b.gm.data & (ph.depth >= lo) & (ph.depth <= hi)


def test_shell_psi_closed_form(shell_phantom, shell_bundle):
    ph = shell_phantom
    _, b = shell_bundle
    r = ph.depth + 10.0
    psi_true = (1 / 10 - 1 / r) / (1 / 10 - 1 / 20)
    m = _interior(ph, b)
    assert np.abs(b.psi.data - psi_true)[m].max() <= 0.02


def test_shell_vhat_radial(shell_phantom, shell_bundle):
    _, b = shell_bundle
    g = _interior(shell_phantom, b)
    n = np.stack(np.indices(g.shape), -1) - 63.5
    n /= np.linalg.norm(n, axis=-1)[..., None]
    assert np.sum(b.vhat.data * n, -1)[g].min() > 0.99


def test_shell_thickness(shell_phantom, shell_bundle):
    _, b = shell_bundle
    m = _interior(shell_phantom, b)
    t = b.t_gm.data[m]
    assert abs(t.mean() - 10.0) <= 0.3
    assert abs(np.median(t) - 10.0) <= 0.3
    lo, hi = np.percentile(t, [1, 99])
    assert lo >= 9.5 and hi <= 10.5


def test_streamline_monotone(shell_phantom, shell_bundle):
    ph = shell_phantom
    _, b = shell_bundle
    m = _interior(ph, b, 2.5, 7.5)
    idx = np.argwhere(m)[::37]
    v = b.vhat.data[tuple(idx.T)]
    for D, sgn in ((b.d_wm, 1.0), (b.d_pial, -1.0)):
        here = D.data[tuple(idx.T)]
        ahead = trilinear_sample(D, idx + sgn * v)
        assert np.all(ahead > here)


def test_degenerate_fraction(slab_bundle, shell_bundle):
    for _, b in (slab_bundle, shell_bundle):
        assert b.degenerate_gradient < 1e-3 * b.gm.data.sum()


def test_tol_halving():
    ph = generate(PhantomSpec(kind="spherical_shell", dims=(64,) * 3, spacing=(1.0,) * 3,
                              thickness=10.0, inner_radius=10.0))
    pial = build_pial(ph.gm, ph.wm, ph.fissure)
    a = compute_thickness(ph.gm, ph.wm, pial, tol=1e-6)
    b = compute_thickness(ph.gm, ph.wm, pial, tol=5e-7)
    assert b.laplace_iterations > a.laplace_iterations
    assert np.abs(a.t_gm.data - b.t_gm.data).max() <= 1e-6 * 10


# ---------------------------------------------------------------- convergence and fallback

def test_nonconvergence_flag_and_strict():
    ph = generate(PhantomSpec(kind="spherical_shell", dims=(32,) * 3, spacing=(1.0,) * 3,
                              thickness=5.0, inner_radius=5.0))
    pial = build_pial(ph.gm, ph.wm, ph.fissure)
    b = compute_thickness(ph.gm, ph.wm, pial, max_iter=1)
    assert not b.laplace_converged and not b.converged
    assert b.laplace_iterations == 1
    with pytest.raises(ConvergenceError) as ei:
        compute_thickness(ph.gm, ph.wm, pial, max_iter=1, strict=True)
    assert ei.value.exit_code == 4
    assert ei.value.bundle.t_gm.data.shape == ph.gm.data.shape


def test_fallback_voxel():
    g, w, p = _column(6)
    v = np.zeros(g.data.shape + (3,))
    v[g.data, 2] = 1.0
    v[1, 1, 3] = 0.0  # no upwind support at this voxel
    dw, dp, info = streamline_lengths(vol(v), g, w, p)
    assert info["wm"]["fallback"] == 1 and info["pial"]["fallback"] == 1
    nbrs = [dw.data[0, 1, 3], dw.data[2, 1, 3], dw.data[1, 0, 3], dw.data[1, 2, 3], dw.data[1, 1, 2], dw.data[1, 1, 4]]
    assert dw.data[1, 1, 3] == pytest.approx(np.mean(nbrs))


def test_normalize_flags_flat_psi():
    g, w, p = _column(4)
    psi = vol(np.full(g.data.shape, 0.5))
    v, deg = normalize_gradient(psi, g, w, p)
    assert np.array_equal(deg.data, g.data)
    assert np.all(v.data == 0.0)
