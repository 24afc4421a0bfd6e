import numpy as np
import pytest

from synperf.data import CaseRecord, MapKind, PerfusionMap, PerfusionSequence


def make_case(case_id="c0", shape=(6, 2, 4, 5), seed=0, kinds=(MapKind.TMAX,)):
    rng = np.random.default_rng(seed)
    data = rng.normal(100.0, 5.0, size=shape).astype(np.float32)
    times = np.arange(shape[0], dtype=np.float32) * 1.5
    targets = {k: PerfusionMap(rng.uniform(0, 15, size=shape[1:]), k) for k in kinds}
    return CaseRecord(case_id, PerfusionSequence(data, times), targets)


@pytest.fixture
def case():
    return make_case()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
