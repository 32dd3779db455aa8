import numpy as np
import pandas as pd
import pytest

from dlm_core import ContractError
from imputers import ImputationConfig
from simulation import (
    COEFFICIENT_ALIASES,
    METRIC_COLUMNS,
    GridSpec,
    ScenarioSpec,
    aggregate_metrics,
    coverage,
    default_model,
    generate_scenario,
    outcome_equation,
    reconstruct_outcome,
    run_grid,
    summarize_change_points,
)

QUICK = ImputationConfig(r=3, max_iter=5, tol=1e-3, restarts=1, learn_structure=False)


def test_stationary_truth_is_constant():
    _, truth = generate_scenario(ScenarioSpec(kind="stationary", T=200), seed=1)
    row = truth.frame().iloc[57]
    assert [row[c] for c in ("beta0", "rho", "beta1", "beta2", "betac")] == [40.0, 0.5, -1.5, -0.5, -1.0]


def test_nonstationary_exposure_effect_switches_after_each_change_point():
    sc = ScenarioSpec(kind="nonstationary", T=1000)
    _, truth = generate_scenario(sc, seed=2)
    assert sc.true_change_points == (400, 700)
    assert truth.value("beta1", 400) == -1.0
    assert truth.value("beta1", 401) == -2.0
    assert truth.value("beta1", 700) == -2.0
    assert truth.value("beta1", 701) == -1.0
    assert set(truth.frame()["beta1"]) == {-1.0, -2.0}


def test_desk_scale_change_points_scale_with_length():
    assert ScenarioSpec(kind="nonstationary", T=500).true_change_points == (200, 350)


def test_outcome_equation_by_hand():
    paths = {"beta0": 40.0, "rho": 0.5, "beta1": -1.5, "beta2": -0.5, "betac": -1.0}
    assert outcome_equation(paths, 10.0, 1.0, 1.0, 2.0, 0.0) == pytest.approx(41.0)


@pytest.mark.parametrize("kind", ["stationary", "nonstationary"])
def test_outcome_reconstructs_from_truth(kind):
    ds, truth = generate_scenario(ScenarioSpec(kind=kind, T=300), seed=3)
    np.testing.assert_allclose(reconstruct_outcome(ds, truth), ds.y, rtol=0, atol=1e-9)


def test_same_seed_same_dataset():
    a, ta = generate_scenario(ScenarioSpec(T=150), seed=4)
    b, tb = generate_scenario(ScenarioSpec(T=150), seed=4)
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(ta.noise, tb.noise)
    assert a.n_missing == 0


def test_stationary_series_is_mean_stable():
    ds, _ = generate_scenario(ScenarioSpec(kind="stationary", T=1000), seed=5)
    first, second = ds.y[:500], ds.y[500:]
    # autocorrelated series: inflate the naive standard error
    se = np.sqrt(5.0 * ds.y.var() * 2 / 500)
    assert abs(first.mean() - second.mean()) < 4 * se


def test_scenario_validation():
    with pytest.raises(ContractError):
        ScenarioSpec(kind="seasonal")
    with pytest.raises(ContractError):
        ScenarioSpec(T=50)
    with pytest.raises(ContractError):
        ScenarioSpec(kind="nonstationary", change_points=(100,))
    with pytest.raises(ContractError):
        ScenarioSpec.from_dict({"kind": "stationary", "length": 100})


def test_default_models():
    spec = default_model("nonstationary")
    assert spec.coefficient_names() == ["intercept", "y_lag1", "a", "a_lag1", "c"]
    assert spec.dynamics_for("intercept").kind == "random_walk"
    assert spec.learnable() == ["a"]
    assert default_model("stationary").is_all_invariant()


def test_coverage_indicator():
    assert coverage(0.0, -1.0, 1.0) == 1
    assert coverage(2.0, -1.0, 1.0) == 0
    with pytest.raises(ContractError):
        coverage(0.0, 1.0, -1.0)


def test_nominal_intervals_cover_ninety_percent():
    rng = np.random.default_rng(6)
    est = rng.standard_normal(10000)
    hits = coverage(np.zeros(10000), est - 1.6448536, est + 1.6448536)
    assert 0.885 <= hits.mean() <= 0.915


def raw_rows(estimates, truth=1.0):
    return pd.DataFrame(
        {
            "scenario": "stationary",
            "mechanism": "MCAR",
            "rate": 0.5,
            "rep": range(len(estimates)),
            "method": "cc",
            "coefficient": "beta2",
            "eval_time": 100,
            "truth": truth,
            "estimate": estimates,
            "se": 0.1,
            "lower": [e - 0.2 for e in estimates],
            "upper": [e + 0.2 for e in estimates],
            "covered": [int(abs(e - truth) <= 0.2) for e in estimates],
            "status": "ok",
        }
    )


def test_metrics_aggregate_replications():
    table = aggregate_metrics(raw_rows([1.0, 1.2, 1.4]))
    assert list(table.columns) == METRIC_COLUMNS
    row = table.iloc[0]
    assert row["mean_est"] == pytest.approx(1.2)
    assert row["emp_se"] == pytest.approx(0.2)
    assert row["coverage"] == pytest.approx(2 / 3)
    assert row["bias"] == pytest.approx(0.2)
    assert row["reps"] == 3


def test_single_replication_has_no_empirical_se():
    table = aggregate_metrics(raw_rows([1.1]))
    assert np.isnan(table.iloc[0]["emp_se"])
    assert table.iloc[0]["mean_est"] == pytest.approx(1.1)


def test_change_point_summary():
    cps = pd.DataFrame(
        {
            "scenario": "nonstationary",
            "mechanism": "MCAR",
            "rate": 0.5,
            "rep": [0, 1, 2],
            "method": "ssmimpute",
            "coefficient": "beta1",
            "change_point": [198, 205, 260],
            "true_change_point": [200, 200, 200],
            "error": [-2, 5, 60],
        }
    )
    summary = summarize_change_points(cps, reps=4, T_by_scenario={"nonstationary": 500})
    row = summary.iloc[0]
    assert row["detections"] == 3
    assert row["share_within_5pct"] == pytest.approx(0.5)


def small_grid(**kw):
    base = dict(
        scenarios=(ScenarioSpec(kind="stationary", T=120),),
        mechanisms=("MCAR",),
        rates=(0.3,),
        methods=("cc", "mean"),
        reps=2,
        seed=7,
        imputation=QUICK,
    )
    base.update(kw)
    return GridSpec(**base)


def test_minimal_grid_has_one_row_per_method_coefficient_and_time():
    result = run_grid(small_grid(), progress=False)
    assert len(result.metrics) == 2 * len(COEFFICIENT_ALIASES)
    assert set(result.metrics["method"]) == {"cc", "mean"}
    assert (result.metrics["reps"] == 2).all()
    assert len(result.raw) == 2 * 2 * len(COEFFICIENT_ALIASES)
    assert result.failures == ()


def test_single_replication_grid():
    result = run_grid(small_grid(reps=1, methods=("cc",)), progress=False)
    assert result.metrics["emp_se"].isna().all()
    assert result.metrics["mean_est"].notna().all()


def test_grid_is_reproducible():
    a = run_grid(small_grid(), progress=False)
    b = run_grid(small_grid(), progress=False)
    pd.testing.assert_frame_equal(a.raw, b.raw)
    pd.testing.assert_frame_equal(a.metrics, b.metrics)


def test_grid_validation():
    with pytest.raises(ContractError):
        small_grid(methods=("cc", "hotdeck"))
    with pytest.raises(ContractError):
        small_grid(reps=0)
    with pytest.raises(ContractError):
        GridSpec.from_dict({"reps": 3, "scenario": []})
    full = small_grid().full_scale()
    assert full.reps == 500 and full.scenarios[0].T == 1000


@pytest.mark.slow
def test_stationary_coverage_at_desk_scale():
    grid = GridSpec(
        scenarios=(ScenarioSpec(kind="stationary", T=500),),
        methods=("cc", "ssmimpute"),
        reps=100,
        seed=1,
        imputation=ImputationConfig(r=10, max_iter=20, restarts=1),
    )
    metrics = run_grid(grid, progress=False).metrics
    beta2 = metrics[metrics["coefficient"] == "beta2"].set_index("method")
    for method in ("cc", "ssmimpute"):
        assert 0.84 <= beta2.loc[method, "coverage"] <= 0.96
        assert abs(beta2.loc[method, "bias"]) < 0.07


def test_a_raising_method_is_recorded_as_na(monkeypatch):
    import simulation

    real = simulation.run_method

    def flaky(ds, spec, method, cfg):
        if method == "mean":
            raise np.linalg.LinAlgError("SVD did not converge")
        return real(ds, spec, method, cfg)

    monkeypatch.setattr(simulation, "run_method", flaky)
    result = run_grid(small_grid(), progress=False)
    failed = result.raw[result.raw["method"] == "mean"]
    assert failed["estimate"].isna().all()
    assert failed["status"].str.startswith("LinAlgError").all()
    assert result.raw.loc[result.raw["method"] == "cc", "estimate"].notna().all()
    assert len(result.failures) == 2
    assert "SVD did not converge" in result.failures[0]


DESK = ImputationConfig(r=10, max_iter=20, restarts=1)


def beta_rows(metrics, coefficient, eval_time=None):
    rows = metrics[metrics["coefficient"] == coefficient]
    if eval_time is not None:
        rows = rows[rows["eval_time"] == eval_time]
    return rows.set_index("method")


def mc_se(row):
    return row["emp_se"] / np.sqrt(row["reps"])


@pytest.fixture(scope="module")
def stationary_desk():
    grid = GridSpec(
        scenarios=(ScenarioSpec(kind="stationary", T=500),),
        methods=("cc", "mean", "locf", "linear", "spline", "mice", "ssmmp", "ssmimpute"),
        reps=100,
        seed=3,
        imputation=DESK,
        n_jobs=-1,
    )
    return run_grid(grid, progress=False)


@pytest.fixture(scope="module")
def nonstationary_desk():
    grid = GridSpec(
        scenarios=(ScenarioSpec(kind="nonstationary", T=500),),
        methods=("cc", "mice", "ssmimpute"),
        reps=100,
        seed=4,
        imputation=DESK,
        n_jobs=-1,
    )
    return run_grid(grid, progress=False)


@pytest.mark.slow
def test_single_imputation_baselines_are_biased_and_multiple_imputation_is_not(stationary_desk):
    beta2 = beta_rows(stationary_desk.metrics, "beta2")
    for method in ("cc", "mice", "ssmmp", "ssmimpute"):
        assert abs(beta2.loc[method, "bias"]) < 0.07
        assert 0.84 <= beta2.loc[method, "coverage"] <= 0.96
    for method in ("mean", "locf", "linear", "spline"):
        assert abs(beta2.loc[method, "bias"]) > 3 * mc_se(beta2.loc[method])


@pytest.mark.slow
def test_imputation_is_at_least_as_efficient_as_complete_cases(stationary_desk):
    raw = stationary_desk.raw
    at_T = raw[(raw["coefficient"] == "beta2") & (raw["eval_time"] == 500)]
    se = at_T.pivot(index="rep", columns="method", values="se")
    assert int((se["ssmimpute"] <= se["cc"]).sum()) >= 90


@pytest.mark.slow
def test_nonstationary_bias_for_complete_cases_and_mice(nonstationary_desk):
    metrics = nonstationary_desk.metrics
    beta2, rho = beta_rows(metrics, "beta2"), beta_rows(metrics, "rho")
    for table in (beta2, rho):
        assert abs(table.loc["ssmimpute", "bias"]) <= 2 * mc_se(table.loc["ssmimpute"])
    assert abs(beta2.loc["cc", "bias"]) > 3 * mc_se(beta2.loc["cc"])
    assert rho.loc["mice", "bias"] <= -0.1


@pytest.mark.slow
def test_exposure_effect_recovered_in_every_period(nonstationary_desk):
    for t, truth in zip((200, 350, 500), (-1.0, -2.0, -1.0)):
        row = beta_rows(nonstationary_desk.metrics, "beta1", eval_time=t).loc["ssmimpute"]
        assert abs(row["mean_est"] - truth) <= 0.1
        assert 0.84 <= row["coverage"] <= 0.96


@pytest.mark.slow
def test_change_points_located_within_five_percent(nonstationary_desk):
    summary = nonstationary_desk.change_point_summary
    ours = summary[(summary["method"] == "ssmimpute") & (summary["coefficient"] == "beta1")]
    assert set(ours["true_change_point"]) == {200, 350}
    assert (ours["share_within_5pct"] >= 0.8).all()
    cps = nonstationary_desk.change_points
    cps = cps[cps["coefficient"] == "beta1"]
    spread = cps.groupby("method")["error"].std(ddof=1)
    assert spread["cc"] > spread["ssmimpute"]


@pytest.mark.slow
def test_complete_case_bias_grows_with_the_missing_rate():
    grid = GridSpec(
        scenarios=(ScenarioSpec(kind="nonstationary", T=500),),
        rates=(0.25, 0.5, 0.75),
        methods=("cc", "ssmimpute"),
        reps=100,
        seed=5,
        imputation=DESK,
        n_jobs=-1,
    )
    beta2 = run_grid(grid, progress=False).metrics
    beta2 = beta2[beta2["coefficient"] == "beta2"]
    cc = beta2[beta2["method"] == "cc"].sort_values("rate")["bias"].abs().to_numpy()
    assert (np.diff(cc) >= 0).all()
    ours = beta2[beta2["method"] == "ssmimpute"]["coverage"]
    assert ((ours >= 0.82) & (ours <= 0.97)).all()
