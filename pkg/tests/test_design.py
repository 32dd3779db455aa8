import numpy as np
import pytest

from design import (
    Dynamics,
    ModelSpec,
    TimeSeriesDataset,
    build_design,
    derive_lag_missingness,
    design_row,
    expand_to_original,
    map_change_points_to_original,
    map_change_points_to_spliced,
    realize_state_space,
    splice_complete_cases,
    state_dimension,
    structural_names,
)
from dlm_core import ContractError, InsufficientData, StructuralParams


def dataset(T=10, missing=(), exposure=True, covariate=True):
    t = np.arange(1, T + 1, dtype=float)
    y = 10.0 + t
    y[list(missing)] = np.nan
    return TimeSeriesDataset(
        y=y,
        exposures={"a": 100.0 + t} if exposure else {},
        covariates={"c": 200.0 + t} if covariate else {},
    )


def test_lag_missingness_shifts_the_outcome_mask():
    mask = np.zeros(10, dtype=bool)
    mask[4] = True
    out = derive_lag_missingness(mask, [1, 2])
    assert np.flatnonzero(out[1]).tolist() == [5]
    assert np.flatnonzero(out[2]).tolist() == [6]


def test_lag_missingness_without_missing_outcomes():
    out = derive_lag_missingness(np.zeros(8, dtype=bool), [1, 2, 3])
    assert not any(m.any() for m in out.values())


def test_one_missing_outcome_spoils_four_rows_with_three_lags():
    ds = dataset(T=12, missing=[5], exposure=False, covariate=False)
    dm = build_design(ds, ModelSpec(q=3))
    spoiled = ds.mask | dm.incomplete
    assert np.flatnonzero(spoiled).tolist() == [5, 6, 7, 8]


def test_design_columns_follow_the_regression():
    spec = ModelSpec(q=1, p=1, o=0, exposures=("a",), covariates=("c",))
    ds = dataset()
    dm = build_design(ds, spec)
    assert dm.columns == ("intercept", "y_lag1", "a", "a_lag1", "c")
    assert dm.k == spec.k == 5
    # F_t = (1, Y_{t-1}, A_t, A_{t-1}, C_t) at t=3 (row 2)
    np.testing.assert_array_equal(dm.rows[2], [1.0, 12.0, 103.0, 102.0, 203.0])
    assert dm.burn_in.tolist() == [True] + [False] * 9


def test_fully_observed_design_has_no_imputed_rows():
    dm = build_design(dataset(), ModelSpec(q=2, exposures=("a",), covariates=("c",)))
    assert not dm.imputed.any()
    assert not dm.incomplete.any()


def test_imputed_value_lands_in_the_lag_slot():
    ds = dataset(missing=[4])
    fill = np.full(ds.T, np.nan)
    fill[4] = 7.0
    dm = build_design(ds, ModelSpec(q=1), imputed_y=fill)
    assert dm.rows[5, 1] == 7.0
    assert dm.imputed[5]
    assert not dm.incomplete[5]


def test_unfilled_lag_marks_row_incomplete():
    ds = dataset(missing=[4])
    dm = build_design(ds, ModelSpec(q=1))
    assert dm.incomplete[5]
    assert np.isnan(dm.rows[5, 1])


def test_imputed_value_at_observed_time_is_rejected():
    ds = dataset(missing=[4])
    fill = np.full(ds.T, np.nan)
    fill[3] = 1.0
    with pytest.raises(ContractError):
        build_design(ds, ModelSpec(q=1), imputed_y=fill)


def test_build_design_is_idempotent():
    ds = dataset(missing=[3, 6])
    fill = np.where(ds.mask, 0.5, np.nan)
    spec = ModelSpec(q=2, exposures=("a",), p=1)
    a = build_design(ds, spec, imputed_y=fill)
    b = build_design(ds, spec, imputed_y=fill)
    np.testing.assert_array_equal(a.rows, b.rows)
    np.testing.assert_array_equal(a.incomplete, b.incomplete)


def test_design_row_rebuilds_lag_slots_per_completion():
    ds = dataset(missing=[4])
    dm = build_design(ds, ModelSpec(q=2))
    Y = np.tile(ds.y, (2, 1))
    Y[0, 4], Y[1, 4] = 1.0, 2.0
    rows = design_row(dm, 5, Y)
    assert rows.shape == (2, 3)
    assert rows[:, 1].tolist() == [1.0, 2.0]
    assert rows[:, 2].tolist() == [ds.y[3], ds.y[3]]


def test_unknown_series_is_a_contract_error():
    with pytest.raises(ContractError):
        build_design(dataset(covariate=False), ModelSpec(covariates=("c",)))


def test_invariant_spec_realizes_identity_and_zero_noise():
    spec = ModelSpec(q=1, exposures=("a",))
    dm = build_design(dataset(), spec)
    ss = realize_state_space(spec, dm, StructuralParams.from_values({"V": 1.0}))
    assert ss.identity_G
    assert not ss.W.any()


def test_random_walk_intercept_variance_sits_in_one_cell():
    spec = ModelSpec(q=1, exposures=("a",), dynamics={"intercept": Dynamics.random_walk(variance=1.0)})
    dm = build_design(dataset(), spec)
    ss = realize_state_space(spec, dm, StructuralParams.from_values({"V": 0.1}))
    W = ss.W[3].copy()
    assert W[0, 0] == 1.0
    W[0, 0] = 0.0
    assert not W.any()


def test_estimated_variances_are_structural_parameters():
    spec = ModelSpec(q=1, dynamics={"intercept": Dynamics.random_walk()})
    assert structural_names(spec) == ["V", "W:intercept"]


def test_periodic_stable_jumps_enter_after_each_change_point():
    T = 1000
    t = np.arange(1, T + 1, dtype=float)
    ds = TimeSeriesDataset(y=np.sin(t), exposures={"a": np.cos(t)})
    spec = ModelSpec(q=1, exposures=("a",), dynamics={"a": Dynamics.periodic_stable([400, 700])})
    dm = build_design(ds, spec)
    ss = realize_state_space(spec, dm, StructuralParams.from_values({"V": 1.0}))
    j = dm.columns.index("a")
    jump_times = np.flatnonzero(ss.W[:, j, j]) + 1
    assert jump_times.tolist() == [401, 701]


def test_periodic_stable_change_point_outside_the_series():
    spec = ModelSpec(q=1, dynamics={"intercept": Dynamics.periodic_stable([10])})
    dm = build_design(dataset(T=10), spec)
    with pytest.raises(ContractError):
        realize_state_space(spec, dm, StructuralParams.from_values({"V": 1.0}))


def test_ar_dynamics_must_be_stationary():
    with pytest.raises(ContractError):
        Dynamics.ar([1.2])
    assert Dynamics.ar([0.5, 0.2]).order == 2


def test_ar_coefficient_adds_companion_states():
    spec = ModelSpec(q=1, dynamics={"intercept": Dynamics.ar([0.5, 0.2], variance=0.1)})
    dm = build_design(dataset(), spec)
    ss = realize_state_space(spec, dm, StructuralParams.from_values({"V": 1.0}))
    assert ss.d == 3
    np.testing.assert_array_equal(ss.G[0][0], [0.5, 0.0, 0.2])
    assert ss.G[0][2, 0] == 1.0


def test_splice_without_missingness_is_identity():
    ds = dataset()
    dm = build_design(ds, ModelSpec(q=1))
    sds, sdm = splice_complete_cases(ds, dm)
    np.testing.assert_array_equal(sds.y, ds.y)
    np.testing.assert_array_equal(sdm.time_map, np.arange(1, 11))


def test_splice_drops_the_missing_row_and_its_lag_row():
    t = np.arange(1, 21, dtype=float)
    y = 1.0 + 0.1 * t
    y[2] = np.nan
    ds = TimeSeriesDataset(y=y)
    dm = build_design(ds, ModelSpec(q=1))
    sds, sdm = splice_complete_cases(ds, dm)
    assert sds.T == 18
    assert 3 not in sdm.time_map and 4 not in sdm.time_map
    assert sdm.time_map[:4].tolist() == [1, 2, 5, 6]
    # survivors keep their original lag values
    assert sdm.rows[3, 1] == y[4]


def test_splice_with_too_few_survivors():
    ds = dataset(T=10, missing=[2, 4, 6])
    dm = build_design(ds, ModelSpec(q=1, exposures=("a",), covariates=("c",)))
    with pytest.raises(InsufficientData):
        splice_complete_cases(ds, dm)


def test_splice_needs_five_rows_beyond_the_state_dimension():
    ds = dataset(T=9, exposure=False, covariate=False)
    dm = build_design(ds, ModelSpec(q=1))
    ar3 = ModelSpec(q=1, dynamics={"intercept": Dynamics.ar((0.2, 0.1, 0.05))})
    assert dm.k == 2
    assert state_dimension(ar3) == 4
    # 8 usable rows after the one-row burn-in
    assert splice_complete_cases(ds, dm, state_dim=3)[0].T == 9
    with pytest.raises(InsufficientData, match="need at least 9"):
        splice_complete_cases(ds, dm, state_dim=state_dimension(ar3))


def test_change_points_move_between_timelines():
    time_map = np.array([1, 2, 5, 6, 7, 8, 9, 10])
    assert map_change_points_to_spliced(time_map, [6]) == (4,)
    assert map_change_points_to_original(time_map, [4]) == (6,)


def test_spliced_values_carry_forward_onto_dropped_times():
    time_map = np.array([1, 2, 5, 6])
    values = np.array([10.0, 20.0, 50.0, 60.0])
    np.testing.assert_array_equal(
        expand_to_original(values, time_map, 7), [10.0, 20.0, 20.0, 20.0, 50.0, 60.0, 60.0]
    )


def test_model_spec_from_dict_rejects_unknown_keys():
    with pytest.raises(ContractError):
        ModelSpec.from_dict({"q": 1, "lags": 2})
    spec = ModelSpec.from_dict(
        {"q": 2, "exposures": ["a"], "dynamics": {"a": {"kind": "random_walk", "learn": True}}}
    )
    assert spec.learnable() == ["a"]
    assert ModelSpec.from_dict(spec.to_dict()) == spec


def test_dataset_rejects_missing_exposures():
    with pytest.raises(ContractError):
        TimeSeriesDataset(y=[1.0, 2.0], exposures={"a": [1.0, np.nan]})
