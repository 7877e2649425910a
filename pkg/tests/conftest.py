import time

import pytest

from landet.evaluation import ExperimentConfig, run_experiment

_RUNS = {}


def experiment(seed: int, full: bool = True):
    """Default toy experiment for ``seed``, cached for the whole session.

    ``full=False`` skips the transfer setting (and f1'); a cached full run
    serves either request. The wall-clock of the first run is kept.
    """
    for key in ((seed, True), (seed, full)):
        if key in _RUNS:
            return _RUNS[key]
    settings = ["direct", "transfer", "filtered"] if full else ["direct", "filtered"]
    start = time.perf_counter()
    result = run_experiment(ExperimentConfig(seed=seed, settings=settings))
    result.wall_clock = time.perf_counter() - start
    _RUNS[(seed, full)] = result
    return result


@pytest.fixture(scope="session")
def toy_run():
    """Seed-0 default run: trained f1, f1', g, f2 plus data, pairs and report."""
    return experiment(0)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
