import datetime as dt
import warnings

import numpy as np
import pytest

from icebench.scene_store import ChannelSpec, IceChartPolygon, Partial, Scene


def make_scene(polygon_raster, polygons, channels=None, scene_id="s0", location_id="loc_a",
               date=dt.date(2021, 3, 15), land_mask=None):
    ids = np.asarray(polygon_raster, dtype=np.int32)
    H, W = ids.shape
    if channels is None:
        rng = np.random.default_rng(0)
        channels = {"a": rng.normal(size=(H, W)), "b": rng.normal(size=(H, W))}
    chans = [c if isinstance(c, ChannelSpec) else ChannelSpec(n, c) for n, c in channels.items()]
    return Scene(scene_id, location_id, date, H, W, chans, ids, polygons, land_mask=land_mask)


def ice_polygon(pid, code=91, share=1.0, total=90.0):
    if code == 0:
        return IceChartPolygon(pid, 0.0, ())
    return IceChartPolygon(pid, total, (Partial(code, total * share),))


@pytest.fixture
def scene_factory():
    return make_scene


@pytest.fixture(scope="session")
def separable_data(tmp_path_factory):
    from icebench.synthgen import generate, separable_spec

    out = tmp_path_factory.mktemp("separable")
    paths = generate(separable_spec(), out)
    return out, paths


@pytest.fixture(autouse=True)
def _quiet_runtime_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message=".*fewer than two resource samples.*")
        yield


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the summary is printed at session end."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def report(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
