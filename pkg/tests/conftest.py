import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lamina.grid import Volume

settings.register_profile(
    "default", max_examples=40, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.register_profile("ci", max_examples=150, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def vol(a, spacing=(1.0, 1.0, 1.0)):
    return Volume(np.asarray(a), spacing)


@pytest.fixture(scope="session")
def slab_phantom():
    from lamina.phantom import PhantomSpec, generate
    return generate(PhantomSpec(kind="slab"))


@pytest.fixture(scope="session")
def slab_bundle(slab_phantom):
    from lamina.fissures import build_pial
    from lamina.thickness import compute_thickness
    ph = slab_phantom
    pial = build_pial(ph.gm, ph.wm, ph.fissure)
    return pial, compute_thickness(ph.gm, ph.wm, pial)


@pytest.fixture(scope="session")
def shell_phantom():
    from lamina.phantom import PhantomSpec, generate
    return generate(PhantomSpec(kind="spherical_shell", dims=(128, 128, 128), spacing=(1.0, 1.0, 1.0),
                                thickness=10.0, inner_radius=10.0))


@pytest.fixture(scope="session")
def shell_bundle(shell_phantom):
    from lamina.fissures import build_pial
    from lamina.thickness import compute_thickness
    ph = shell_phantom
    pial = build_pial(ph.gm, ph.wm, ph.fissure)
    return pial, compute_thickness(ph.gm, ph.wm, pial)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    res = getattr(mod, "RESULTS", None)
    if not res:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(res):
        terminalreporter.write_line(res[n])
