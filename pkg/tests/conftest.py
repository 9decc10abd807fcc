import numpy as np
import pytest

import coherent_sets.clustering as clustering
from coherent_sets.ensemble import TrajectoryEnsemble
from coherent_sets.flows import FlowSpec, integrate_ensemble

MONOTONE_SLACK = 1e-10
RUN_LOG = []
ACCEPTANCE_LINES = []

_original_run = clustering.run


def _checked_run(*args, **kwargs):
    state = _original_run(*args, **kwargs)
    hist = np.asarray(state.objective_history)
    increases = np.diff(hist)
    RUN_LOG.append(float(increases.max()) if increases.size else -np.inf)
    assert np.all(increases <= MONOTONE_SLACK), f"objective increased by {increases.max():.3e}"
    return state


# every clustering run made anywhere in the suite is checked for monotonicity
clustering.run = _checked_run


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
    terminalreporter.write_line(f"clustering runs checked for monotone objective: {len(RUN_LOG)}")


def random_ensemble(rng, n, num_times, d, missing=0.0, scale=1.0):
    pos = rng.normal(scale=scale, size=(n, num_times, d))
    mask = rng.random((n, num_times)) >= missing
    for i in np.flatnonzero(~mask.any(axis=1)):
        mask[i, rng.integers(num_times)] = True
    return TrajectoryEnsemble(positions=pos, mask=mask)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def interval_map_ensemble():
    return integrate_ensemble(FlowSpec("interval-map-3", 1000, 9, seed=1))


@pytest.fixture(scope="session")
def double_gyre_512():
    return integrate_ensemble(FlowSpec("double-gyre", 512, 5.0, seeding="uniform-grid"))
