import sys
from collections import defaultdict
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA = {
    1: "closed-form effective sigma",
    2: "NLL gradients vs finite differences",
    3: "GGD sampling std",
    4: "metric oracles",
    5: "earlier stages frozen during desk training",
    6: "stage 3 no worse than stage 1 (MSE, SSIM)",
    7: "aleatoric sigma rank-correlates with injected noise",
    8: "MC-dropout epistemic mechanics",
    9: "residual-loss fixtures",
    10: "end-to-end determinism",
    11: "OOD resampling and inference",
}

_outcomes: dict[int, list[str]] = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _outcomes[marker.args[0]].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        results = _outcomes.get(n)
        if not results:
            status = "NOT RUN"
        elif all(r == "passed" for r in results):
            status = "PASS"
        elif any(r == "failed" for r in results):
            status = "FAIL"
        else:
            status = "SKIPPED"
        terminalreporter.write_line(f"criterion {n:>2}: {status:<7} {CRITERIA[n]}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
