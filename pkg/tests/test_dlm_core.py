from dataclasses import replace

import numpy as np
import pytest

from dlm_core import (
    ContractError,
    InsufficientData,
    StateSpace,
    StateSpaceTemplate,
    StructuralParams,
    draw_states,
    fit_structural_params,
    kalman_filter,
    kalman_smoother,
    log_likelihood,
    outcome_array,
)


def scalar_system(T=1, W=0.0, C0=1.0):
    return StateSpace.build(F=np.ones((T, 1)), V=1.0, W=np.array([[W]]), m0=np.zeros(1), C0=np.array([[C0]]))


def test_filter_single_observation():
    fp = kalman_filter(scalar_system(), [2.0])
    assert fp.means[0, 0] == pytest.approx(1.0)
    assert fp.covs[0, 0, 0] == pytest.approx(0.5)
    assert fp.Q[0] == pytest.approx(2.0)
    assert fp.innovations[0] == pytest.approx(2.0)


def test_filter_missing_outcome_keeps_prior():
    fp = kalman_filter(scalar_system(), [None])
    assert fp.means[0, 0] == 0.0
    assert fp.covs[0, 0, 0] == 1.0
    assert fp.n_observed == 0
    assert np.isnan(fp.innovations[0])


def test_filter_missing_outcome_is_pure_prediction():
    fp = kalman_filter(scalar_system(W=0.25), [np.nan])
    assert fp.means[0, 0] == 0.0
    assert fp.covs[0, 0, 0] == pytest.approx(1.25)


def test_masked_outcome_matches_inactive_row_exactly():
    rng = np.random.default_rng(4)
    T, d = 30, 3
    F = rng.standard_normal((T, d))
    y = rng.standard_normal(T)
    W = 0.01 * np.eye(d)
    masked = y.copy()
    masked[[4, 11, 12]] = np.nan
    active = np.ones(T, dtype=bool)
    active[[4, 11, 12]] = False
    a = kalman_filter(StateSpace.build(F=F, V=0.5, W=W), masked)
    b = kalman_filter(StateSpace.build(F=F, V=0.5, W=W, active=active), y)
    assert np.array_equal(a.means, b.means)
    assert np.array_equal(a.covs, b.covs)
    assert a.loglik == b.loglik


def test_filter_matches_conjugate_regression_posterior():
    rng = np.random.default_rng(1)
    T, d, V = 60, 5, 0.7
    F = rng.standard_normal((T, d))
    y = F @ np.array([1.0, -2.0, 0.5, 0.0, 3.0]) + np.sqrt(V) * rng.standard_normal(T)
    m0 = np.full(d, 0.2)
    C0 = np.eye(d)
    fp = kalman_filter(StateSpace.build(F=F, V=V, m0=m0, C0=C0), y)
    precision = np.linalg.inv(C0) + F.T @ F / V
    C_T = np.linalg.inv(precision)
    m_T = C_T @ (np.linalg.inv(C0) @ m0 + F.T @ y / V)
    np.testing.assert_allclose(fp.means[-1], m_T, atol=1e-8)
    np.testing.assert_allclose(fp.covs[-1], C_T, atol=1e-8)


def test_smoother_starts_from_filtered_end():
    rng = np.random.default_rng(2)
    ss = StateSpace.build(F=rng.standard_normal((20, 2)), V=1.0, W=0.1 * np.eye(2))
    fp = kalman_filter(ss, rng.standard_normal(20))
    sp = kalman_smoother(ss, fp)
    assert sp.smoothed
    assert np.array_equal(sp.means[-1], fp.means[-1])
    assert np.array_equal(sp.covs[-1], fp.covs[-1])


def test_smoother_of_invariant_state_is_flat():
    ss = scalar_system(T=15)
    y = np.linspace(-1.0, 2.0, 15)
    fp = kalman_filter(ss, y)
    sp = kalman_smoother(ss, fp)
    np.testing.assert_allclose(sp.means[:, 0], fp.means[-1, 0], atol=1e-10)


def test_smoother_reduces_variance_at_missing_time():
    ss = scalar_system(T=3, W=1.0)
    fp = kalman_filter(ss, [1.0, None, 2.0])
    sp = kalman_smoother(ss, fp)
    assert sp.covs[1, 0, 0] < fp.covs[1, 0, 0]


def test_smoother_rejects_smoothed_input():
    ss = scalar_system(T=3, W=1.0)
    sp = kalman_smoother(ss, kalman_filter(ss, [1.0, 2.0, 3.0]))
    with pytest.raises(ContractError):
        kalman_smoother(ss, sp)


def test_log_likelihood_single_term():
    expected = -0.5 * (np.log(2 * np.pi * 2.0) + 4.0 / 2.0)
    assert log_likelihood(scalar_system(), [2.0]) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(-2.2655, abs=1e-4)


def test_log_likelihood_without_observations_is_zero():
    assert log_likelihood(scalar_system(T=4, W=0.1), [None] * 4) == 0.0


def test_log_likelihood_ignores_values_at_missing_positions():
    ss = scalar_system(T=4, W=0.1)
    mask = np.array([False, True, False, True])
    a = log_likelihood(ss, (np.array([1.0, 5.0, 2.0, 7.0]), mask))
    b = log_likelihood(ss, (np.array([1.0, -99.0, 2.0, 1e6]), mask))
    assert a == b


def test_outcome_array_accepts_masked_arrays():
    y = np.ma.masked_array([1.0, 2.0, 3.0], mask=[False, True, False])
    out = outcome_array(y)
    assert np.isnan(out[1]) and out[0] == 1.0


def test_state_space_validation():
    with pytest.raises(ContractError):
        StateSpace.build(F=np.ones((3, 1)), V=0.0)
    with pytest.raises(ContractError):
        StateSpace.build(F=np.ones((3, 2)), V=1.0, W=np.array([[1.0, 0.0], [0.0, -1.0]]))
    with pytest.raises(ContractError):
        StateSpace.build(F=np.ones((3, 2)), V=1.0, m0=np.zeros(3))


def constant_level_template(y, start_v=1.0):
    T = len(y)

    def build(p):
        return StateSpace.build(F=np.ones((T, 1)), V=p["V"], C0=np.array([[1e4]]))

    return StateSpaceTemplate(params=StructuralParams.from_values({"V": start_v}), build=build, free=("V",))


def test_fit_is_one_dimensional_when_only_v_is_free():
    y = np.random.default_rng(0).standard_normal(50)
    template = constant_level_template(y)
    assert template.free_names() == ("V",)
    fitted = fit_structural_params(template, y, restarts=1)
    assert fitted.names == ("V",)
    assert fitted.converged


def test_fit_restarts_agree():
    y = 3.0 + np.random.default_rng(5).standard_normal(400)
    low = fit_structural_params(constant_level_template(y, np.exp(-2.0)), y, restarts=1)
    high = fit_structural_params(constant_level_template(y, np.exp(2.0)), y, restarts=1)
    assert low["V"] == pytest.approx(high["V"], rel=1e-3)


@pytest.mark.slow
def test_fit_recovers_observation_variance():
    y = 5.0 + np.random.default_rng(6).standard_normal(2000)
    fitted = fit_structural_params(constant_level_template(y), y, restarts=3)
    assert abs(fitted["V"] - 1.0) < 0.15


def test_fit_needs_ten_observations():
    y = np.full(20, np.nan)
    y[:9] = 1.0 + np.arange(9) * 0.1
    with pytest.raises(InsufficientData):
        fit_structural_params(constant_level_template(y), y)


def test_structural_params_must_be_positive():
    with pytest.raises(ContractError):
        StructuralParams.from_values({"V": 0.0})


def test_draws_collapse_to_mean_without_variance():
    ss = scalar_system(T=5)
    fp = kalman_filter(ss, [1.0, 2.0, 3.0, 4.0, 5.0])
    zero = replace(fp, covs=np.zeros_like(fp.covs))
    draws = draw_states(zero, 7, seed=1)
    assert draws.shape == (7, 5, 1)
    np.testing.assert_array_equal(draws, np.broadcast_to(fp.means, draws.shape))


def test_draws_are_reproducible_and_have_the_right_moments():
    ss = StateSpace.build(F=np.ones((1, 1)), V=1.0, C0=np.array([[1.0]]))
    fp = kalman_filter(ss, [None])
    a = draw_states(fp, 10000, seed=42)
    b = draw_states(fp, 10000, seed=42)
    assert np.array_equal(a, b)
    assert abs(a.mean()) < 0.05
    assert abs(a.var() - 1.0) < 0.05


def test_draws_need_a_positive_count():
    fp = kalman_filter(scalar_system(), [1.0])
    with pytest.raises(ContractError):
        draw_states(fp, 0)


def wandering_regression(T=80, seed=7):
    rng = np.random.default_rng(seed)
    F = np.column_stack([np.ones(T), rng.standard_normal(T)])
    theta = np.cumsum(0.1 * rng.standard_normal((T, 2)), axis=0)
    y = np.einsum("td,td->t", F, theta) + rng.standard_normal(T)
    y[[5, 6, 7, 30, 55, 56]] = np.nan
    ss = StateSpace.build(F=F, V=1.0, W=0.01 * np.eye(2), C0=100.0 * np.eye(2))
    return ss, y


def test_filter_covariances_stay_positive_semidefinite():
    ss, y = wandering_regression()
    fp = kalman_filter(ss, y)
    np.testing.assert_allclose(fp.covs, np.transpose(fp.covs, (0, 2, 1)), atol=1e-12)
    assert np.linalg.eigvalsh(fp.covs).min() >= -1e-10


def test_smoother_never_exceeds_the_filtered_covariance():
    ss, y = wandering_regression()
    fp = kalman_filter(ss, y)
    sp = kalman_smoother(ss, fp)
    assert np.linalg.eigvalsh(fp.covs - sp.covs).min() >= -1e-10
    assert np.linalg.eigvalsh(sp.covs).min() >= -1e-10


def local_level_template(T):
    def build(p):
        return StateSpace.build(F=np.ones((T, 1)), V=p["V"], W=np.array([[p["W"]]]), C0=np.array([[1e4]]))

    return StateSpaceTemplate(params=StructuralParams.from_values({"V": 1.0, "W": 1.0}), build=build)


def test_fitted_parameters_are_a_local_maximum():
    rng = np.random.default_rng(8)
    y = np.cumsum(0.3 * rng.standard_normal(300)) + rng.standard_normal(300)
    template = local_level_template(300)
    fitted = fit_structural_params(template, y, restarts=2)
    best = log_likelihood(template.build(fitted), y)
    assert best == pytest.approx(fitted.loglik)
    for i in range(2):
        for step in (-0.05, 0.05):
            moved = fitted.log_values.copy()
            moved[i] += step
            assert log_likelihood(template.build(fitted.with_log_values(moved)), y) < best
