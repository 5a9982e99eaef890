import numpy as np
import pytest

from mlits.config import config_from_dict
from mlits.panel import GroupingSpec
from mlits.posterior import Model
from mlits.simulate import simulate_panel


def make_model(factors=None, n_times=12, T_int=8, seed=0, size=None, covariates=None, truth=None, **cfg):
    """Small simulated panel and its model."""
    factors = {"grp": ["a", "b"]} if factors is None else factors
    doc = {"likelihood": "poisson", "T_int": T_int, **cfg}
    config = config_from_dict(doc)
    grouping = GroupingSpec.from_dict(factors)
    if truth is None:
        truth = {"beta": np.array([np.log(0.05) if doc["likelihood"] == "poisson" else -1.0])}
        if covariates:
            truth["beta"] = np.concatenate([truth["beta"], np.zeros(sum(np.atleast_2d(np.asarray(c).T).shape[0] for c in covariates.values()))])
    panel, record = simulate_panel(config, truth, seed=seed, grouping=grouping, n_times=n_times, size=size,
                                   covariates=covariates)
    return Model(panel, config), record


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def poisson_model():
    return make_model()[0]


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def report_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE[number] = line
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
