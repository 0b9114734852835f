import os

import pytest
from hypothesis import HealthCheck, settings

from semistatic import kernels

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# criterion number -> (title, passed, detail); filled by test_acceptance
ACCEPTANCE = {}


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    prev = kernels.backend()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)


def _simulate(tmp_path_factory, name):
    from semistatic.cli import _scene_path
    from semistatic.simworld import SceneScript, generate_dataset
    root = tmp_path_factory.mktemp(name)
    generate_dataset(SceneScript.load(_scene_path(name)), str(root / "data"), voxel_size=0.1)
    return root


@pytest.fixture(scope="session")
def static_run(tmp_path_factory):
    import time
    from semistatic.evaluation import run_replay
    root = _simulate(tmp_path_factory, "static")
    t0 = time.perf_counter()
    report, state = run_replay(str(root / "data"), out_dir=str(root / "out"), eval_every=8)
    return root, report, state, time.perf_counter() - t0


@pytest.fixture(scope="session")
def semistatic_runs(tmp_path_factory):
    """Two identical deterministic replays of the semi-static scenario."""
    from semistatic.evaluation import run_replay
    root = _simulate(tmp_path_factory, "semistatic")
    runs = []
    for k in range(2):
        out = str(root / f"out{k}")
        report, state = run_replay(str(root / "data"), out_dir=out, eval_every=8, deterministic=True)
        runs.append((out, report, state))
    return root, runs


@pytest.fixture(scope="session")
def dynamic_run(tmp_path_factory):
    from semistatic.evaluation import run_replay
    root = _simulate(tmp_path_factory, "dynamic")
    report, state = run_replay(str(root / "data"), out_dir=str(root / "out"), eval_every=5)
    return root, report, state


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
