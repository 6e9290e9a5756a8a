import time

import pytest

from cfc.aggcore import ClientTable
from cfc.client import Summarization
from cfc.pipeline import StagedBlob, TransformSpec
from cfc.scenarios import World, WorldConfig, phh_policy

_CRITERIA: list[tuple[int, str, str, float]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        n, title = mark.args
        verdict = "PASS" if rep.outcome == "passed" else "FAIL"
        _CRITERIA.append((n, title, verdict, rep.duration))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n, title, verdict, duration in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}  {title}  ({duration:.2f} s)")


@pytest.fixture
def world():
    return World(WorldConfig(seed=11, noise_off=True))


@pytest.fixture
def stopwatch():
    class Stopwatch:
        def __init__(self):
            self.start = time.perf_counter()

        @property
        def elapsed(self) -> float:
            return time.perf_counter() - self.start

    return Stopwatch()


SUMMARIZATION = Summarization(("color", "food"), ("weekdays", "weekends"))


def sample_table(i: int = 0) -> ClientTable:
    return ClientTable.of(("color", "food"), ("weekdays", "weekends"),
                          [(("red", "apple"), (1.0 + i, 2.0)), (("green", "eggs"), (0.5, 1.5 + i))])


def uploaded(world: World, n: int = 3, policy=None, task_id: str = "task"):
    """Upload ``n`` sample tables; returns (policy, task, devices, blobs)."""
    policy = policy or phh_policy()
    task = world.task(policy, SUMMARIZATION, task_id=task_id)
    devices = [world.device(f"d{i}", sample_table(i)) for i in range(n)]
    blobs = world.upload_all(devices, task)
    return policy, task, devices, blobs


def select_spec() -> TransformSpec:
    return TransformSpec.select(("color", "food"), ("weekdays", "weekends"))


def staged(blobs, node: int = 0) -> list[StagedBlob]:
    return [StagedBlob(b, node) for b in blobs]
