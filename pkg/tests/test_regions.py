import itertools
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lamina.errors import DataError, ParameterError
from lamina.fissures import build_pial
from lamina.grid import Volume
from lamina.phantom import PhantomSpec, generate
from lamina.regions import (FDR_Q, RegionReport, cohort_report, fdr_correct, group_compare, purkinje_area,
                            region_areas, region_counts, region_ids, regional_means, single_report,
                            subject_region_stats, tiv_normalize)
from lamina.thickness import compute_thickness

from conftest import vol

samples = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=2, max_size=12)


# ---------------------------------------------------------------- Welch

def _welch_oracle(a, b):
    """High-precision Welch t and two-sided p via the regularized incomplete beta."""
    mpmath.mp.dps = 40
    a = [mpmath.mpf(x) for x in a]
    b = [mpmath.mpf(x) for x in b]
    ma, mb = sum(a) / len(a), sum(b) / len(b)
    va = sum((x - ma) ** 2 for x in a) / (len(a) - 1) / len(a)
    vb = sum((x - mb) ** 2 for x in b) / (len(b) - 1) / len(b)
    t = (ma - mb) / mpmath.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    p = mpmath.betainc(df / 2, mpmath.mpf(1) / 2, 0, df / (df + t * t), regularized=True)
    return float(t), float(p), float(df)


def test_welch_worked_example():
    r = group_compare([1, 2, 3, 4, 5], [3, 4, 5, 6, 7])
    t, p, df = _welch_oracle([1, 2, 3, 4, 5], [3, 4, 5, 6, 7])
    assert r.t == pytest.approx(-2.0, abs=1e-12) and r.t == pytest.approx(t, rel=1e-12)
    assert r.p == pytest.approx(p, rel=1e-9)
    assert r.p == pytest.approx(0.081, abs=5e-4)
    assert r.df == pytest.approx(df, rel=1e-12)


@given(samples, samples)
def test_welch_matches_oracle(a, b):
    r = group_compare(a, b)
    if np.var(a) == 0 and np.var(b) == 0:
        return
    if r.p is None or not math.isfinite(r.t):
        return
    t, p, _ = _welch_oracle(a, b)
    assert r.t == pytest.approx(t, rel=1e-6, abs=1e-9)
    assert r.p == pytest.approx(p, rel=1e-6, abs=1e-12)


@given(samples, samples)
def test_welch_symmetry(a, b):
    r1, r2 = group_compare(a, b), group_compare(b, a)
    if r1.t is None:
        return
    assert r1.t == -r2.t
    assert r1.p == r2.p


@given(st.lists(st.integers(-100, 100), min_size=2, max_size=10),
       st.lists(st.integers(-100, 100), min_size=2, max_size=10), st.integers(-1000, 1000))
def test_welch_shift_invariance(a, b, c):
    r1 = group_compare(a, b)
    r2 = group_compare([x + c for x in a], [x + c for x in b])
    if r1.t is None:
        return
    assert r2.p == pytest.approx(r1.p, rel=1e-9, abs=1e-12)


def test_welch_degenerate():
    r = group_compare([2, 2, 2], [2, 2])
    assert (r.t, r.p) == (0.0, 1.0)
    r = group_compare([1, 2, 3], [4])
    assert r.p is None and r.flag.startswith("skipped")
    r = group_compare([1, 1], [3, 3])
    assert r.p == 0.0 and r.t == -math.inf
    assert group_compare([1, 2, 3, 4], [1, 2, 3, 4]).t == 0.0
    assert group_compare([1, 2, 3, 4], [1, 2, 3, 4]).p == 1.0


# ---------------------------------------------------------------- BH

def _bh_oracle(p, q):
    """Exhaustive check of the BH condition at every k."""
    m = len(p)
    srt = sorted(p)
    k = 0
    for j in range(1, m + 1):
        if srt[j - 1] <= j / m * q:
            k = j
    if k == 0:
        return np.zeros(m, bool)
    thr = srt[k - 1]
    return np.array([v <= thr for v in p])


def test_bh_examples():
    assert FDR_Q == 0.1
    assert list(fdr_correct([0.01, 0.02, 0.04, 0.2])) == [True, True, True, False]
    assert not fdr_correct([1.0] * 5).any()
    assert fdr_correct([0.0] * 5).all()
    assert list(fdr_correct([0.2, None, 0.01])) == [False, False, True]
    with pytest.raises(ParameterError):
        fdr_correct([0.1], q=1.0)


def test_bh_oracle_1000():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        m = int(rng.integers(1, 30))
        p = rng.random(m) ** rng.uniform(0.5, 4)
        q = float(rng.uniform(0.01, 0.5))
        assert np.array_equal(fdr_correct(p, q), _bh_oracle(list(p), q))


@given(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.floats(0.001, 0.5), st.floats(0.0, 0.49))
def test_bh_monotone_in_q(p, q, dq):
    q2 = min(q + dq, 0.999)
    a, b = fdr_correct(p, q), fdr_correct(p, q2)
    assert not np.any(a & ~b)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=20))
def test_bh_prefix(p):
    d = fdr_correct(p)
    order = np.argsort(p, kind="stable")
    ds = d[order]
    if ds.any():
        k = np.flatnonzero(ds).max()
        assert ds[: k + 1].all()


# ---------------------------------------------------------------- regional means and TIV

def test_tiv_normalize():
    assert np.allclose(tiv_normalize([1.0, 2.0], 1.0), [1.0, 2.0])
    assert np.allclose(tiv_normalize([2.0, 4.0], 8.0, "cuberoot"), [1.0, 2.0])
    assert tiv_normalize({1: 4.0, 2: None}, 2.0) == {1: 2.0, 2: None}
    for bad in (0.0, -1.0, float("nan"), float("inf")):
        with pytest.raises(ParameterError):
            tiv_normalize([1.0], bad)
    with pytest.raises(ParameterError):
        tiv_normalize([1.0], 1.0, "log")


def test_regional_means_examples():
    vals = np.zeros((4, 4, 4))
    lab = np.zeros((4, 4, 4), np.int16)
    lab[:2] = 1
    lab[2:] = 2
    vals[:2] = 2.0
    vals[2:] = 4.0
    every = vol(np.ones((4, 4, 4), bool))
    assert regional_means(vol(vals), every, vol(lab)) == {1: 2.0, 2: 4.0}
    one = vol(np.ones((4, 4, 4), np.int16))
    assert regional_means(vol(vals), every, one)[1] == pytest.approx(vals.mean())
    none = vol(np.zeros((4, 4, 4), bool))
    assert regional_means(vol(vals), none, vol(lab)) == {1: None, 2: None}


@given(st.integers(0, 10**6))
def test_regional_means_brute_force_and_permutation(seed):
    rng = np.random.default_rng(seed)
    shape = (6, 5, 4)
    vals = rng.normal(size=shape)
    lab = rng.integers(0, 5, shape).astype(np.int32)
    where = rng.random(shape) < 0.6
    got = regional_means(vol(vals), vol(where), vol(lab))
    ref = {}
    for (x, y, z), k in np.ndenumerate(lab):
        if k and where[x, y, z]:
            ref.setdefault(int(k), []).append(vals[x, y, z])
    for k in region_ids(vol(lab)):
        if k in ref:
            assert got[k] == pytest.approx(sum(ref[k]) / len(ref[k]), rel=1e-12, abs=1e-12)
        else:
            assert got[k] is None
    perm = {0: 0, 1: 3, 2: 4, 3: 1, 4: 2}
    plab = np.vectorize(perm.get)(lab)
    got2 = regional_means(vol(vals), vol(where), vol(plab))
    for k, v in got.items():
        assert got2[perm[k]] == v


def test_label_checks():
    with pytest.raises(DataError):
        region_ids(vol(np.full((2, 2, 2), 0.5)))
    with pytest.raises(DataError):
        region_ids(vol(np.full((2, 2, 2), -1)))
    with pytest.raises(Exception):
        regional_means(vol(np.zeros((2, 2, 2))), vol(np.ones((2, 2, 2), bool)), vol(np.ones((3, 2, 2), int)))


# ---------------------------------------------------------------- area

def test_area_flat_sheet():
    m = np.zeros((10, 10, 5), bool)
    m[:, :, 2] = True
    V = np.zeros((10, 10, 5, 3))
    V[..., 2] = 1.0
    area, nfb = purkinje_area(vol(m), vol(V))
    assert area == pytest.approx(100.0) and nfb == 0
    sp = (0.5, 0.25, 2.0)
    area, _ = purkinje_area(Volume(m, sp), Volume(V, sp))
    assert area == pytest.approx(100 * 0.5 * 0.25)


def test_area_tilted_sheet():
    # plane x - z = 0 rotated 45 degrees about y over an n-voxel footprint, voxelized as
    # the centres within half the voxel extent along the normal (a 6-connected band)
    N = 40
    X, Y, Z = np.indices((N, N, N))
    nrm = np.array([1.0, 0.0, -1.0]) / math.sqrt(2)
    s = (X - Z) * nrm[0]
    half = 0.5 * np.abs(nrm).sum()
    m = (s > -half) & (s <= half)
    V = np.broadcast_to(nrm, (N, N, N, 3)).copy()
    footprint = N * N
    area, _ = purkinje_area(vol(m), vol(V))
    assert abs(area - footprint * math.sqrt(2)) <= 0.05 * footprint * math.sqrt(2)


def test_area_fallback():
    m = np.zeros((6, 6, 6), bool)
    m[:, :, 3] = True
    V = np.zeros((6, 6, 6, 3))
    V[..., 2] = 1.0
    V[2, 2, 3] = 0.0
    area, nfb = purkinje_area(vol(m), vol(V))
    assert nfb == 1 and area == pytest.approx(36.0)


def _sphere_area(n, sp):
    spec = PhantomSpec(kind="spherical_shell", dims=(n,) * 3, spacing=(sp,) * 3, thickness=10.0,
                       inner_radius=10.0)
    ph = generate(spec)
    b = compute_thickness(ph.gm, ph.wm, build_pial(ph.gm, ph.wm, ph.fissure))
    return purkinje_area(ph.mid_layer, b.vhat)[0], 4 * math.pi * (10 + 10 * spec.f) ** 2


def test_area_sphere_and_resolution():
    a64, true = _sphere_area(64, 1.0)
    assert abs(a64 - true) <= 0.05 * true
    a128, _ = _sphere_area(128, 0.5)
    assert abs(a128 - a64) <= 0.03 * a64


def test_region_areas_sum():
    m = np.zeros((8, 8, 4), bool)
    m[:, :, 1] = True
    V = np.zeros((8, 8, 4, 3))
    V[..., 2] = 1.0
    lab = np.zeros((8, 8, 4), np.int16)
    lab[:3] = 1
    lab[3:] = 2
    assert region_areas(vol(m), vol(V), vol(lab)) == {1: 24.0, 2: 40.0}


# ---------------------------------------------------------------- reports

def _rows(slab_phantom, slab_bundle):
    ph = slab_phantom
    _, b = slab_bundle
    return subject_region_stats(ph.parcellation, b.gm, ph.mid_layer, b.d_wm, b.d_pial, b.t_gm, b.vhat,
                                names={1: "one"})


def test_subject_rows(slab_phantom, slab_bundle):
    ph = slab_phantom
    _, b = slab_bundle
    rows = _rows(slab_phantom, slab_bundle)
    counts = region_counts(b.gm, ph.parcellation)
    vv = float(np.prod(ph.spec.spacing))
    for r in rows:
        assert r["volume_mm3"] == counts[r["region_id"]] * vv
        assert r["mean_TGran"] + r["mean_TMol"] == pytest.approx(r["mean_TGM"])
        assert r["purkinje_area_mm2"] > 0
    assert rows[0]["region_name"] == "one"
    assert all(r["region_name"] == f"region_{r['region_id']}" for r in rows[1:])
    rep = single_report(rows)
    assert rep.rows[0]["p_value"] is None
    assert '"rows"' in rep.to_json()


def _cohort(effect, n=5, seed=0, regions=(1, 2, 3)):
    rng = np.random.default_rng(seed)
    subs = []
    for g in ("A", "B"):
        for i in range(n):
            rows = [{"region_id": k, "region_name": f"r{k}", "n_voxels": 10, "volume_mm3": 1.0,
                     "mean_TGM": 4.0 + (effect if g == "B" else 0.0) + rng.normal(0, 0.1),
                     "mean_TGran": 1.6, "mean_TMol": 2.4, "purkinje_area_mm2": 1.0} for k in regions]
            subs.append({"id": f"{g}{i}", "group": g, "tiv": 2.0, "rows": rows})
    return subs


def test_cohort_report():
    rep = cohort_report(_cohort(1.0))
    assert all(r["fdr_significant"] for r in rep.rows)
    assert all(r["group_mean_b"] > r["group_mean_a"] for r in rep.rows)
    # TIV ratio mode halves the values
    assert rep.rows[0]["group_mean_a"] == pytest.approx(2.0, abs=0.1)
    assert rep.provenance["q"] == 0.1 and rep.provenance["tiv_mode"] == "ratio"
    assert rep.provenance["n_a"] == 5
    assert len(rep.subjects) == 10 and set(rep.subjects[0]["values"]) == {1, 2, 3}
    rep2 = cohort_report(_cohort(1.0), tiv_mode="cuberoot")
    assert rep2.rows[0]["group_mean_a"] == pytest.approx(4.0 / 2 ** (1 / 3), abs=0.1)
    with pytest.raises(ParameterError):
        cohort_report(_cohort(1.0), measure="median")
    bad = _cohort(0.0)
    bad[0]["group"] = "C"
    with pytest.raises(DataError):
        cohort_report(bad)
    assert isinstance(rep, RegionReport)


def test_cohort_no_tiv_and_missing_region():
    subs = _cohort(0.0)
    for s in subs:
        s["tiv"] = None
    subs[0]["rows"] = subs[0]["rows"][:2]
    rep = cohort_report(subs)
    assert rep.rows[0]["group_mean_a"] == pytest.approx(4.0, abs=0.2)
    assert rep.subjects[0]["values"][3] is None
