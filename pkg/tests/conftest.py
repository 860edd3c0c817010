import numpy as np
import pytest

from sparsecbct.geometry import ConeBeamGeometry, clip_to_box_batch, uniform_angles
from sparsecbct.phantom import shepp_logan_like, voxelize


def oracle_rays(ph, vol, n, rng, frac=0.8, sod=1000.0):
    """Rays from random orbit positions toward random points inside ``frac`` of the outer ellipsoid.

    Returns ``(src, d, t_near, t_far)`` clipped to the volume box.
    """
    th = rng.uniform(0, 2 * np.pi, n)
    src = np.stack([sod * np.cos(th), sod * np.sin(th), np.zeros(n)], axis=-1)
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = rng.uniform(0, 1, n) ** (1 / 3) * frac
    target = u * r[:, None] * np.asarray(ph.ellipsoids[0].semi_axes) + np.asarray(ph.ellipsoids[0].center)
    d = target - src
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    t_near, t_far, hit = clip_to_box_batch(src, d, vol.bounds)
    assert hit.all()
    return src, d, t_near, t_far


def desk_geometry(n_views=360, **kw):
    return ConeBeamGeometry(1000.0, 1500.0, 96, 96, angles=uniform_angles(n_views), **kw)


@pytest.fixture(scope="session")
def phantom():
    return shepp_logan_like()


@pytest.fixture(scope="session")
def phantom_volume(phantom):
    return voxelize(phantom, (64, 64, 64), 1.0)


@pytest.fixture(scope="session")
def desk_projections(phantom_volume):
    """Projector output for the 23-, 50- and 360-view desk protocols."""
    from sparsecbct.projector import project_all

    return {n: project_all(phantom_volume, desk_geometry(n)) for n in (23, 50, 360)}


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with the measured values."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid:
                continue
            if rep.when != "call" and outcome == "passed":
                continue
            name = nodeid.split("::")[-1][len("test_criterion_"):]
            measured = ", ".join(f"{k}={v}" for k, v in rep.user_properties)
            lines.append((name, "PASS" if outcome == "passed" else "FAIL", measured))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict, measured in sorted(lines):
        terminalreporter.write_line(f"criterion {name}: {verdict}" + (f" ({measured})" if measured else ""))
