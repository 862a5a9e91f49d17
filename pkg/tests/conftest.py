import pytest

from rangecast.lidar_io import benchmark_scene, make_synthetic_sequence
from rangecast.network import ArchitectureConfig
from rangecast.range_projection import SensorIntrinsics


@pytest.fixture(scope="session")
def tiny_intr():
    return SensorIntrinsics(height=8, width=16, r_max=50.0)


@pytest.fixture(scope="session")
def tiny_arch(tiny_intr):
    return ArchitectureConfig(past=3, future=3, channels=(4, 8), height_factors=(2, 2), width_factors=(2, 2),
                              temporal_reductions=(1, 1), intrinsics=tiny_intr)


@pytest.fixture(scope="session")
def tiny_sequence(tiny_intr):
    ds = make_synthetic_sequence(benchmark_scene(seed=3, n_scans=26, intr=tiny_intr))
    ds.past = ds.future = 3
    return ds


CRITERIA = {
    1: "gradient checks",
    2: "projection round trips",
    3: "chamfer oracle",
    4: "transposed conv adjointness",
    5: "shift equivariance",
    6: "desk-scale training",
    7: "baseline ordering",
    8: "KITTI identity baseline (dataset-optional)",
    9: "image loss speed",
    10: "determinism and persistence",
}
_outcomes: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test belongs to")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark:
            item.user_properties.append(("criterion", mark.args[0]))


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    if report.when == "call" or report.outcome != "passed":
        _outcomes.setdefault(crit, []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        got = _outcomes.get(n)
        if not got:
            status = "NOT RUN"
        elif "failed" in got:
            status = "FAIL"
        elif all(o == "skipped" for o in got):
            status = "SKIP"
        else:
            status = "PASS"
        terminalreporter.write_line(f"criterion {n:2d} {status:7s} {name}")
