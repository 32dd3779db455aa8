import numpy as np
import pytest

import settings_manager
from design import ModelSpec, TimeSeriesDataset
from imputers import ImputationConfig
from simulation import ScenarioSpec, generate_scenario


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path, monkeypatch):
    """Point the settings file into the test's temp dir so user settings never leak in."""
    monkeypatch.setenv("SSMIMPUTE_SETTINGS", str(tmp_path / "settings" / "settings.json"))
    monkeypatch.delenv("SSMIMPUTE_THREADS", raising=False)
    settings_manager.reset_settings_cache()
    yield
    settings_manager.reset_settings_cache()


@pytest.fixture
def stationary_data():
    ds, truth = generate_scenario(ScenarioSpec(kind="stationary", T=300), seed=11)
    return ds, truth


@pytest.fixture
def regression_spec():
    return ModelSpec(q=1, p=1, o=0, exposures=("a",), covariates=("c",))


@pytest.fixture
def fast_config():
    return ImputationConfig(r=4, max_iter=8, tol=1e-3, seed=3, restarts=1, learn_structure=False)


def ar1_dataset(T=200, phi=0.6, seed=0, missing=()):
    """Small AR(1) outcome with one covariate, optionally with missing outcomes."""
    rng = np.random.default_rng(seed)
    c = rng.standard_normal(T)
    y = np.empty(T)
    y[0] = 2.0
    for t in range(1, T):
        y[t] = 1.0 + phi * y[t - 1] + 0.5 * c[t] + 0.3 * rng.standard_normal()
    y_obs = y.copy()
    y_obs[list(missing)] = np.nan
    return TimeSeriesDataset(y=y_obs, covariates={"c": c}, y_true=y)


@pytest.fixture
def make_ar1():
    return ar1_dataset
