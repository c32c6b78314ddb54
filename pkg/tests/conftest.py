from __future__ import annotations

from collections import defaultdict

import numpy as np
import pytest

from causemort import synthetic as sy
from causemort.domain import MortalityDataset, load_standard_population

CRITERIA = {
    1: "contribution ratios from published slopes",
    2: "FS5 extra-trend grid from published tables",
    3: "breakpoint recovery on synthetic log-ASMR series",
    4: "NB GLM score, Poisson limit and coverage",
    5: "life-table tail and constant-rate case",
    6: "bootstrap coverage and determinism",
    7: "end-to-end synthetic scenario sanity",
    8: "optional national data reproduction",
}

_outcomes: dict[int, dict[str, int]] = defaultdict(lambda: defaultdict(int))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if rep.when == "call" or (rep.when == "setup" and rep.skipped):
        if hasattr(rep, "wasxfail"):
            key = "xfailed" if rep.skipped else "xpassed"
        else:
            key = rep.outcome
        _outcomes[n][key] += 1
    elif rep.when == "setup" and rep.failed:
        _outcomes[n]["failed"] += 1


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, label in CRITERIA.items():
        counts = _outcomes.get(n)
        if not counts:
            continue
        bad = counts.get("failed", 0) + counts.get("xfailed", 0) + counts.get("xpassed", 0)
        if bad:
            status = "FAIL"
        elif counts.get("passed", 0) == 0:
            status = "SKIP"
        else:
            status = "PASS"
        detail = ", ".join(f"{v} {k}" for k, v in sorted(counts.items()))
        tr.write_line(f"criterion {n}: {status}  {label} ({detail})")


@pytest.fixture(scope="session")
def sp():
    return load_standard_population()


@pytest.fixture(scope="session")
def years():
    return np.arange(2001, 2019)


@pytest.fixture(scope="session")
def demo_truth():
    beta = sy.designed_beta("male", slowdown={"CIR": 0.03}, level_shift=0.01)
    return sy.make_surface("male", beta, theta=500.0)


@pytest.fixture(scope="session")
def demo_dataset(demo_truth) -> MortalityDataset:
    return sy.simulate_dataset(demo_truth, sy.flat_exposures(2e6), seed=11)


@pytest.fixture(scope="session")
def demo_fit(demo_dataset):
    from causemort.scenarios import fit_surface

    return fit_surface(demo_dataset)
