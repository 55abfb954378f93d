import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from incdiss import examples, lmi  # noqa: E402
from incdiss.embedding import embed_region  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(name: str, passed: bool, detail: str) -> str:
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


class DiskRun:
    def __init__(self, bench, embedding, result, embed_time, solve_time):
        self.bench = bench
        self.embedding = embedding
        self.result = result
        self.embed_time = embed_time
        self.solve_time = solve_time

    @property
    def wall_time(self):
        return self.embed_time + self.solve_time


def _disk_run(name: str) -> DiskRun:
    bench = examples.get_builtin(name)
    t0 = time.perf_counter()
    emb = embed_region(bench.system, bench.schedmap, bench.region, bench.grid)
    t1 = time.perf_counter()
    res = lmi.compute_li2_gain(emb)
    t2 = time.perf_counter()
    return DiskRun(bench, emb, res, t1 - t0, t2 - t1)


@pytest.fixture(scope="session")
def disk_lti_run() -> DiskRun:
    """Full-scale LTI-controller gain computation, shared by all tests."""
    return _disk_run("disk_lti_closedloop")


@pytest.fixture(scope="session")
def disk_lpv_run() -> DiskRun:
    return _disk_run("disk_lpv_closedloop")
