import numpy as np
import pytest

from design import Dynamics, ModelSpec, TimeSeriesDataset, build_design, fit_model
from dlm_core import StateSpace
from structure import (
    StructureThresholds,
    as_random_walks,
    classify_dynamics,
    classify_path,
    detect_change_points,
    learn_structure,
    one_step_prediction_score,
)


def test_flat_path_has_no_change_points():
    assert detect_change_points(np.full(200, 3.0), np.full(200, 1e-12)) == []


def test_single_step_is_located():
    mean = np.where(np.arange(1, 101) <= 50, 0.0, 10.0)
    var = np.full(100, 1.0)
    cps = detect_change_points(mean, var, min_seg=10)
    assert len(cps) == 1
    assert 45 <= cps[0] <= 55


def test_two_steps_are_found_in_order():
    t = np.arange(1, 1001)
    mean = np.select([t <= 400, t <= 700], [-1.0, -2.0], -1.0)
    mean = mean + 0.01 * np.random.default_rng(0).standard_normal(1000)
    cps = detect_change_points(mean, np.full(1000, 0.01))
    assert cps == sorted(cps)
    assert len(cps) == 2
    assert abs(cps[0] - 400) <= 25 and abs(cps[1] - 700) <= 25


def test_detection_is_invariant_to_rescaling():
    rng = np.random.default_rng(1)
    mean = np.where(np.arange(300) < 150, 1.0, 2.0) + 0.05 * rng.standard_normal(300)
    var = np.full(300, 0.01)
    a = detect_change_points(mean, var)
    b = detect_change_points(5.0 * mean + 3.0, 25.0 * var)
    assert a == b


def test_flat_path_is_invariant():
    verdict, evidence = classify_path(np.full(300, 2.0), np.full(300, 0.04))
    assert verdict.kind == "invariant"
    assert verdict.learn
    assert evidence["change_points"] == []


def test_staircase_is_periodic_stable():
    t = np.arange(1, 1001)
    mean = np.select([t <= 400, t <= 700], [-1.0, -2.0], -1.0)
    cls = classify_dynamics({"a": (mean, np.full(1000, 0.01))})
    verdict = cls.verdicts["a"]
    assert verdict.kind == "periodic_stable"
    assert len(verdict.change_points) == 2
    assert cls.change_points() == {"a": verdict.change_points}


def test_wandering_path_stays_a_random_walk():
    rng = np.random.default_rng(2)
    mean = np.cumsum(rng.standard_normal(1000))
    verdict, _ = classify_path(mean, np.full(1000, 0.05), StructureThresholds(min_seg=30))
    assert verdict.kind == "random_walk"


def test_ar_verdict_only_when_allowed():
    rng = np.random.default_rng(3)
    x = np.zeros(1000)
    for t in range(1, 1000):
        x[t] = 0.5 * x[t - 1] + rng.standard_normal()
    var = np.full(1000, 0.01)
    plain, _ = classify_path(x, var, StructureThresholds(split_threshold=1e9))
    with_ar, evidence = classify_path(x, var, StructureThresholds(split_threshold=1e9, allow_ar=True))
    assert plain.kind == "random_walk"
    assert with_ar.kind == "ar"
    assert 0.0 < evidence["acf1"] < 0.95


def test_perfect_fit_scores_zero():
    F = np.ones((20, 1))
    ss = StateSpace.build(F=F, V=1e-6, C0=np.array([[1e-12]]), m0=np.array([2.0]))
    assert one_step_prediction_score(ss, np.full(20, 2.0)) == pytest.approx(0.0, abs=1e-18)


def test_identical_specs_score_identically():
    rng = np.random.default_rng(4)
    F = rng.standard_normal((40, 2))
    y = F @ np.array([1.0, -1.0]) + rng.standard_normal(40)
    ss = StateSpace.build(F=F, V=1.0)
    assert one_step_prediction_score(ss, y) == one_step_prediction_score(ss, y)


def step_dataset(T=400, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(T)
    beta = np.where(np.arange(1, T + 1) <= T // 2, 1.0, 3.0)
    y = np.empty(T)
    y[0] = 0.0
    for t in range(1, T):
        y[t] = 0.5 + 0.3 * y[t - 1] + beta[t] * a[t] + 0.2 * rng.standard_normal()
    return TimeSeriesDataset(y=y, exposures={"a": a})


def test_learning_turns_a_step_into_periodic_stable():
    ds = step_dataset()
    spec = ModelSpec(q=1, exposures=("a",), dynamics={"a": Dynamics.random_walk(learn=True)})
    dm = build_design(ds, spec)
    fit, learned, cls = learn_structure(ds, dm, spec, restarts=1)
    dyn = learned.dynamics_for("a")
    assert dyn.kind == "periodic_stable"
    assert len(dyn.change_points) == 1
    assert abs(dyn.change_points[0] - 200) <= 20
    assert fit.spec == learned


def test_learning_leaves_undeclared_coefficients_alone():
    ds = step_dataset()
    spec = ModelSpec(q=1, exposures=("a",))
    dm = build_design(ds, spec)
    fit, learned, cls = learn_structure(ds, dm, spec, restarts=1)
    assert learned == spec
    assert cls.verdicts == {}
    assert fit.loglik == fit_model(ds, dm, spec, restarts=1).loglik


def test_random_walk_start_keeps_fixed_variances_and_undeclared_coefficients():
    spec = ModelSpec(
        q=1,
        p=1,
        exposures=("a",),
        dynamics={
            "intercept": Dynamics.random_walk(variance=0.5, learn=True),
            "y_lag1": Dynamics.invariant(learn=True),
            "a": Dynamics.periodic_stable((50,), learn=True),
        },
    )
    rw = as_random_walks(spec)
    assert rw.dynamics_for("intercept") == Dynamics.random_walk(variance=0.5, learn=True)
    assert rw.dynamics_for("y_lag1") == Dynamics.random_walk(learn=True)
    assert rw.dynamics_for("a") == Dynamics.random_walk(learn=True)
    assert rw.dynamics_for("a_lag1").kind == "invariant"
    plain = ModelSpec(q=1, exposures=("a",))
    assert as_random_walks(plain) == plain


def test_verdicts_come_from_a_random_walk_fit():
    ds = step_dataset()
    spec = ModelSpec(q=1, exposures=("a",), dynamics={"a": Dynamics.invariant(learn=True)})
    dm = build_design(ds, spec)
    rw_fit = fit_model(ds, dm, as_random_walks(spec), restarts=1)
    col = rw_fit.design.columns.index("a")
    expected, _ = classify_path(rw_fit.coef_mean[:, col], rw_fit.coef_var[:, col])
    _, learned, cls = learn_structure(ds, dm, spec, restarts=1)
    assert cls.verdicts["a"] == expected
    assert learned.dynamics_for("a") == expected


def test_an_invariant_start_still_finds_the_step():
    ds = step_dataset()
    spec = ModelSpec(q=1, exposures=("a",), dynamics={"a": Dynamics.invariant(learn=True)})
    fit, learned, _ = learn_structure(ds, build_design(ds, spec), spec, restarts=1)
    dyn = learned.dynamics_for("a")
    assert dyn.kind == "periodic_stable"
    assert len(dyn.change_points) == 1
    assert abs(dyn.change_points[0] - 200) <= 20
    assert fit.spec == learned


def test_a_misplaced_change_point_is_relocated():
    ds = step_dataset()
    spec = ModelSpec(q=1, exposures=("a",), dynamics={"a": Dynamics.periodic_stable((300,), learn=True)})
    _, learned, _ = learn_structure(ds, build_design(ds, spec), spec, restarts=1)
    dyn = learned.dynamics_for("a")
    assert dyn.kind == "periodic_stable"
    assert 300 not in dyn.change_points
    assert any(abs(cp - 200) <= 20 for cp in dyn.change_points)


@pytest.mark.slow
def test_random_walks_are_classified_as_random_walks():
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        mean = np.cumsum(rng.standard_normal(1000))
        verdict, _ = classify_path(mean, np.full(1000, 0.25))
        hits += verdict.kind == "random_walk"
    assert hits >= 90


def noisy_dataset(T, seed):
    rng = np.random.default_rng(seed)
    c, z = rng.standard_normal(T), rng.standard_normal(T)
    y = np.empty(T)
    y[0] = 0.0
    for t in range(1, T):
        y[t] = 1.0 + 0.5 * y[t - 1] - c[t] + rng.standard_normal()
    return TimeSeriesDataset(y=y, covariates={"c": c, "z": z})


@pytest.mark.slow
def test_a_pure_noise_regressor_does_not_improve_the_score():
    changes = []
    for seed in range(100):
        ds = noisy_dataset(200, seed)
        scores = []
        for covariates in (("c",), ("c", "z")):
            spec = ModelSpec(q=1, covariates=covariates)
            fit = fit_model(ds, build_design(ds, spec), spec, restarts=1)
            scores.append(one_step_prediction_score(fit.state_space, ds.y))
        changes.append(scores[1] - scores[0])
    assert np.median(changes) >= 0.0
