import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lamina.errors import SpecError
from lamina.phantom import (CLASS_MAP, DEFAULT_INTENSITIES, KINDS, PRIOR_CLASSES, PhantomSpec, cohort_specs,
                            generate)


def test_slab_truth(slab_phantom):
    ph = slab_phantom
    g = ph.gm.data
    assert np.all(ph.t_gm.data[g] == 4.0)
    assert np.allclose(ph.t_gran.data[g], 1.6) and np.allclose(ph.t_mol.data[g], 2.4)
    assert np.all(ph.t_gm.data[~g] == 0)
    # 80 GM slices of 0.05 mm
    assert np.all(g.sum(axis=2) == 80)
    mid_z = np.unique(np.nonzero(ph.mid_layer.data)[2])
    assert len(mid_z) == 1
    assert ph.depth[0, 0, mid_z[0]] == pytest.approx(1.6, abs=0.025 + 1e-9)


def test_shell_truth():
    ph = generate(PhantomSpec(kind="spherical_shell", dims=(64,) * 3, spacing=(1.0,) * 3, thickness=10.0,
                              inner_radius=10.0))
    g = ph.gm.data
    assert np.all(ph.t_gm.data[g] == 10.0)
    X, Y, Z = np.indices(g.shape) - 31.5
    r = np.sqrt(X**2 + Y**2 + Z**2)
    assert np.all((r[g] >= 10) & (r[g] < 20))
    assert np.all(r[ph.wm.data] < 10)
    rm = r[ph.mid_layer.data]
    assert np.all(np.abs(rm - 14.0) <= np.sqrt(3) / 2 + 1e-9)
    assert abs(rm.mean() - 14.0) < 0.1


def test_seed_determinism():
    base = dict(kind="slab", dims=(8, 8, 120), noise_sigma=5.0)
    a = generate(PhantomSpec(**base, seed=1))
    b = generate(PhantomSpec(**base, seed=1))
    c = generate(PhantomSpec(**base, seed=2))
    assert np.array_equal(a.image.data, b.image.data)
    assert not np.array_equal(a.image.data, c.image.data)
    for k in ("wm", "gm", "mid_layer", "fissure", "t_gm", "parcellation"):
        assert np.array_equal(getattr(a, k).data, getattr(c, k).data)


@pytest.mark.parametrize("kind,kw", [
    ("slab", dict(dims=(64, 64, 64), spacing=(0.05,) * 3, thickness=1.5)),
    ("spherical_shell", dict(dims=(64,) * 3, spacing=(1.0,) * 3, thickness=10.0, inner_radius=10.0)),
    ("folded_sheet", dict(dims=(112, 48, 64), spacing=(0.05,) * 3, thickness=0.8, finger_halfwidth=0.3)),
])
def test_tiv_and_partition(kind, kw):
    ph = generate(PhantomSpec(kind=kind, **kw))
    vv = float(np.prod(ph.spec.spacing))
    count = ph.brain.data.sum() * vv
    assert abs(count - ph.tiv) <= 0.02 * ph.tiv
    wm, gm, fis = ph.wm.data, ph.gm.data, ph.fissure.data
    bg = ~ph.brain.data
    stack = np.stack([wm, gm, fis, bg]).astype(int)
    assert np.all(stack.sum(axis=0) == 1)
    assert not np.any(ph.mid_layer.data & ~gm)
    assert np.all(ph.parcellation.data[ph.brain.data] > 0)
    assert np.all(ph.parcellation.data[bg] == 0)
    pri = np.stack([p.data for p in ph.priors], -1)
    assert np.allclose(pri.sum(-1), 1.0) and len(ph.priors) == len(PRIOR_CLASSES)


def test_folded_has_fissure():
    ph = generate(PhantomSpec(kind="folded_sheet", dims=(112, 48, 64), thickness=0.8, finger_halfwidth=0.3))
    assert ph.fissure.data.sum() > 0
    # the cleft voxels are a PV mix of molecular layer and background
    v = ph.image.data[ph.fissure.data]
    lo = min(DEFAULT_INTENSITIES["molecular"], DEFAULT_INTENSITIES["background"])
    hi = max(DEFAULT_INTENSITIES["molecular"], DEFAULT_INTENSITIES["background"])
    assert np.median(v) > lo and np.median(v) < hi


@settings(max_examples=15)
@given(st.sampled_from(list(DEFAULT_INTENSITIES)), st.floats(5.0, 60.0))
def test_percentiles_follow_intensity(tissue, delta):
    base = PhantomSpec(kind="slab", dims=(6, 6, 120), noise_sigma=2.0)
    a = generate(base).image.data
    ints = dict(base.intensities)
    ints[tissue] += delta
    b = generate(PhantomSpec(**{**base.to_dict(), "intensities": ints})).image.data
    qs = np.arange(0, 101, 5)
    pa, pb = np.percentile(a, qs), np.percentile(b, qs)
    assert np.all(pb >= pa - 1e-9)
    assert np.any(pb > pa)


def test_spec_errors(tmp_path):
    bad = [dict(kind="cube"), dict(f=0.0), dict(f=1.0), dict(thickness=-1), dict(dims=(2, 8, 8)),
           dict(spacing=(0, 1, 1)), dict(noise_sigma=-1), dict(fissure_width=2.0), dict(n_regions=3),
           dict(intensities={"csf": 5.0})]
    for kw in bad:
        with pytest.raises(SpecError):
            PhantomSpec(**kw)
    with pytest.raises(SpecError):
        generate(PhantomSpec(kind="slab", dims=(8, 8, 40), thickness=4.0))
    with pytest.raises(SpecError):
        generate(PhantomSpec(kind="spherical_shell", dims=(32,) * 3, spacing=(1.0,) * 3, thickness=10.0))
    with pytest.raises(SpecError):
        PhantomSpec.from_dict({"kind": "slab", "colour": 1})
    p = tmp_path / "s.json"
    p.write_text(json.dumps(PhantomSpec(kind="slab", thickness=3.0).to_dict()))
    assert PhantomSpec.load(p).thickness == 3.0
    assert set(KINDS) == {"slab", "spherical_shell", "folded_sheet"}


def test_cohort_specs():
    base = PhantomSpec(kind="slab", dims=(8, 8, 120), noise_sigma=2.0)
    specs = cohort_specs(base, n_per_group=4, effect=0.8, jitter=0.0)
    assert [s[0] for s in specs] == ["A01", "A02", "A03", "A04", "B01", "B02", "B03", "B04"]
    ta = [s[2].thickness for s in specs if s[1] == "A"]
    tb = [s[2].thickness for s in specs if s[1] == "B"]
    assert np.allclose(ta, 4.0) and np.allclose(tb, 3.2)
    assert len({s[2].seed for s in specs}) == 8
    again = cohort_specs(base, n_per_group=4, effect=0.8, jitter=0.0)
    assert [s[2].to_dict() for s in specs] == [s[2].to_dict() for s in again]
    assert set(CLASS_MAP.values()) == {"GM", "WM"}
