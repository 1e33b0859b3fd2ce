import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from jvpm import synthworld as sw

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# acceptance criteria register here; printed as one line each after the run
CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    def record(number: int, passed: bool, detail: str) -> None:
        CRITERIA[number] = (bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def small_data_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("data12")
    sw.generate_dataset(12, 5, path)
    return path


@pytest.fixture(scope="session")
def small_data(small_data_dir):
    return sw.load_dataset(small_data_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# full-size runs shared by the acceptance suite and the slow training tests


@pytest.fixture(scope="session")
def data200(tmp_path_factory):
    path = tmp_path_factory.mktemp("data200")
    sw.generate_dataset(200, 1, path)
    return sw.load_dataset(path)


@pytest.fixture(scope="session")
def stage1(data200):
    """Default-config stage-1 run on 200 seed-1 trajectories: (run, checkpoint, seconds)."""
    import time

    from jvpm import config as cfgmod
    from jvpm.training import PretrainRun

    started = time.perf_counter()
    run = PretrainRun(cfgmod.Config(), data200)
    run.run()
    return run, run.checkpoint(), time.perf_counter() - started


@pytest.fixture(scope="session")
def posttrained(data200, stage1):
    """Memoised default post-training runs keyed by (seed, jvpm)."""
    from jvpm import config as cfgmod
    from jvpm.training import PosttrainRun

    cache = {}

    def get(seed: int, jvpm: bool) -> PosttrainRun:
        if (seed, jvpm) not in cache:
            cfg = cfgmod.apply(cfgmod.Config(), {"seed": str(seed)})
            run = PosttrainRun(cfg, data200, stage1[1] if jvpm else None, jvpm=jvpm)
            run.run()
            cache[seed, jvpm] = run
        return cache[seed, jvpm]

    return get
