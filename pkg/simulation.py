"""
simulation.py
Benchmark datasets with known coefficient truth, and the method x mechanism x rate grid that
scores every imputation method on them (bias, standard errors, 90% coverage, change points).

    Y_t = b0_t + rho_t Y_{t-1} + b1_t A_t + b2_t A_{t-1} + bc_t C_t + v_t,   v_t ~ N(0, 0.1)

stationary:     b0=40, rho=0.5, b1=-1.5, b2=-0.5, bc=-1
nonstationary:  b0_t = b0_{t-1} + w_t (b0_0 = 40, w_t ~ N(0,1)), b1_t = -1 / -2 / -1 with
                switches after 0.4*T and 0.7*T, rho=0.5, b2=-0.5, bc=-1
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from design import (
    INTERCEPT,
    Dynamics,
    ModelSpec,
    TimeSeriesDataset,
    lag_name,
    outcome_lag_name,
    reject_unknown_keys,
)
from dlm_core import ContractError, SSMError
from imputers import METHODS, ImputationConfig, method_tag, run_method
from missingness import MechanismSpec, apply_mechanism

logger = logging.getLogger(__name__)

SCENARIO_KINDS = ("stationary", "nonstationary")
TRUTH_COLUMNS = ("beta0", "rho", "beta1", "beta2", "betac")
EXPOSURE = "a"
COVARIATE = "c"
# truth name -> design coefficient name
COEFFICIENT_ALIASES = {
    "beta0": INTERCEPT,
    "rho": outcome_lag_name(1),
    "beta1": lag_name(EXPOSURE, 0),
    "beta2": lag_name(EXPOSURE, 1),
    "betac": lag_name(COVARIATE, 0),
}
DESK_REPS, DESK_T = 100, 500
FULL_REPS, FULL_T = 500, 1000


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str = "stationary"
    T: int = DESK_T
    noise_var: float = 0.1
    beta0: float = 40.0
    rho: float = 0.5
    beta1: float = -1.5
    beta2: float = -0.5
    betac: float = -1.0
    beta1_pieces: Tuple[float, ...] = (-1.0, -2.0, -1.0)
    change_points: Tuple[int, ...] = ()
    intercept_step_var: float = 1.0
    exo_phi: float = 0.3
    exposure_mean: float = 10.0
    covariate_mean: float = 12.0
    burn_in: int = 50
    seed: Optional[int] = None

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ContractError(f"scenario kind must be one of {SCENARIO_KINDS}, got '{self.kind}'")
        if self.T < 100:
            raise ContractError(f"scenario T must be >= 100, got {self.T}")
        if not self.noise_var > 0:
            raise ContractError("scenario noise_var must be > 0")
        object.__setattr__(self, "beta1_pieces", tuple(float(b) for b in self.beta1_pieces))
        object.__setattr__(self, "change_points", tuple(int(c) for c in self.change_points))
        if self.kind == "nonstationary":
            cps = self.true_change_points
            if len(self.beta1_pieces) != len(cps) + 1:
                raise ContractError("beta1_pieces must have one more entry than change_points")
            if any(not 1 < c < self.T for c in cps) or list(cps) != sorted(set(cps)):
                raise ContractError(f"change points {cps} must be increasing inside (1, {self.T})")

    @property
    def true_change_points(self) -> Tuple[int, ...]:
        if self.kind == "stationary":
            return ()
        if self.change_points:
            return self.change_points
        return (int(round(0.4 * self.T)), int(round(0.7 * self.T)))

    def eval_times(self, truth_name: str) -> Tuple[int, ...]:
        """1-based evaluation times: the last time of every period for b1, else t=T."""
        if truth_name == "beta1" and self.kind == "nonstationary":
            return self.true_change_points + (self.T,)
        return (self.T,)

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["beta1_pieces"] = list(self.beta1_pieces)
        out["change_points"] = list(self.change_points)
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], where: str = "scenario") -> "ScenarioSpec":
        reject_unknown_keys(d, set(cls.__dataclass_fields__), where)
        kw = dict(d)
        for key in ("beta1_pieces", "change_points"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class ScenarioTruth:
    """Coefficient paths and noises behind a generated dataset.

    ``y0`` and ``a0`` are the pre-sample outcome and exposure that feed the t=1 lags.
    """

    paths: Dict[str, np.ndarray]
    noise: np.ndarray
    y0: float
    a0: float
    change_points: Tuple[int, ...] = ()

    def frame(self) -> pd.DataFrame:
        T = self.noise.shape[0]
        data = {"t": np.arange(1, T + 1)}
        data.update({name: self.paths[name] for name in TRUTH_COLUMNS})
        return pd.DataFrame(data)

    def noise_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t": np.arange(1, self.noise.shape[0] + 1), "noise": self.noise})

    def value(self, truth_name: str, t: int) -> float:
        return float(self.paths[truth_name][t - 1])


def _exogenous(rng: np.random.Generator, n: int, mean: float, phi: float) -> np.ndarray:
    """AR(1) around ``mean`` with unit marginal variance."""
    x = np.empty(n)
    x[0] = rng.standard_normal()
    innov = np.sqrt(1.0 - phi * phi) * rng.standard_normal(n)
    for t in range(1, n):
        x[t] = phi * x[t - 1] + innov[t]
    return mean + x


def outcome_equation(
    paths: Mapping[str, np.ndarray], y_prev: np.ndarray, a: np.ndarray, a_prev: np.ndarray, c: np.ndarray, noise
) -> np.ndarray:
    return (
        paths["beta0"]
        + paths["rho"] * y_prev
        + paths["beta1"] * a
        + paths["beta2"] * a_prev
        + paths["betac"] * c
        + noise
    )


def generate_scenario(sc: ScenarioSpec, seed=None) -> Tuple[TimeSeriesDataset, ScenarioTruth]:
    """Simulate one fully observed dataset and its truth record.

    Exposure ``a`` and covariate ``c`` are independent AR(1) series. Y starts at the stationary
    mean implied by the constant coefficients and runs ``burn_in`` discarded steps with the
    t=1 coefficients before the kept window.
    """
    rng = np.random.default_rng(sc.seed if seed is None else seed)
    T, B = sc.T, sc.burn_in
    n = T + B + 1
    a = _exogenous(rng, n, sc.exposure_mean, sc.exo_phi)
    c = _exogenous(rng, n, sc.covariate_mean, sc.exo_phi)
    noise = np.sqrt(sc.noise_var) * rng.standard_normal(n)

    paths = {name: np.full(T, float(getattr(sc, name))) for name in TRUTH_COLUMNS}
    if sc.kind == "nonstationary":
        steps = np.sqrt(sc.intercept_step_var) * rng.standard_normal(T)
        paths["beta0"] = sc.beta0 + np.cumsum(steps)
        t = np.arange(1, T + 1)
        piece = np.searchsorted(np.array(sc.true_change_points), t, side="left")
        paths["beta1"] = np.array(sc.beta1_pieces)[piece]

    # pre-sample steps use the t=1 coefficients
    full = {name: np.concatenate((np.full(B + 1, p[0]), p)) for name, p in paths.items()}
    y = np.empty(n)
    mean_a, mean_c = sc.exposure_mean, sc.covariate_mean
    y[0] = (sc.beta0 + (sc.beta1 + sc.beta2) * mean_a + sc.betac * mean_c) / (1.0 - sc.rho)
    for t in range(1, n):
        y[t] = (
            full["beta0"][t]
            + full["rho"][t] * y[t - 1]
            + full["beta1"][t] * a[t]
            + full["beta2"][t] * a[t - 1]
            + full["betac"][t] * c[t]
            + noise[t]
        )
    keep = slice(B + 1, n)
    ds = TimeSeriesDataset(
        y=y[keep],
        exposures={EXPOSURE: a[keep]},
        covariates={COVARIATE: c[keep]},
        y_true=y[keep].copy(),
    )
    truth = ScenarioTruth(
        paths=paths,
        noise=noise[keep].copy(),
        y0=float(y[B]),
        a0=float(a[B]),
        change_points=sc.true_change_points,
    )
    return ds, truth


def reconstruct_outcome(ds: TimeSeriesDataset, truth: ScenarioTruth) -> np.ndarray:
    """Re-evaluate the outcome equation from the stored coefficients and noises."""
    y = ds.y_true if ds.y_true is not None else ds.y
    a = ds.exposures[EXPOSURE]
    y_prev = np.concatenate(([truth.y0], y[:-1]))
    a_prev = np.concatenate(([truth.a0], a[:-1]))
    return outcome_equation(truth.paths, y_prev, a, a_prev, ds.covariates[COVARIATE], truth.noise)


def default_model(kind: str) -> ModelSpec:
    """Fitting model for a scenario: the generating regressors, with the non-stationary
    intercept as a random walk and b1 left for structure learning."""
    dynamics: Dict[str, Dynamics] = {}
    if kind == "nonstationary":
        dynamics = {
            INTERCEPT: Dynamics.random_walk(),
            lag_name(EXPOSURE, 0): Dynamics.random_walk(learn=True),
        }
    return ModelSpec(q=1, p=1, o=0, exposures=(EXPOSURE,), covariates=(COVARIATE,), dynamics=dynamics)


# --- Metrics --------------------------------------------------------------------------------


def coverage(truth, lower, upper) -> np.ndarray:
    """1 where truth lies in [lower, upper], else 0 (elementwise)."""
    truth, lower, upper = (np.asarray(x, dtype=float) for x in (truth, lower, upper))
    if np.any(lower > upper):
        raise ContractError("interval lower bound exceeds its upper bound")
    return ((lower <= truth) & (truth <= upper)).astype(int)


RAW_COLUMNS = [
    "scenario",
    "mechanism",
    "rate",
    "rep",
    "method",
    "coefficient",
    "eval_time",
    "truth",
    "estimate",
    "se",
    "lower",
    "upper",
    "covered",
    "status",
]
METRIC_COLUMNS = [
    "scenario",
    "mechanism",
    "rate",
    "method",
    "coefficient",
    "eval_time",
    "mean_est",
    "emp_se",
    "mean_se",
    "coverage",
    "reps",
    "mean_truth",
    "bias",
]
CHANGE_POINT_COLUMNS = [
    "scenario",
    "mechanism",
    "rate",
    "rep",
    "method",
    "coefficient",
    "change_point",
    "true_change_point",
    "error",
]


def aggregate_metrics(raw: pd.DataFrame) -> pd.DataFrame:
    """Per method x coefficient x evaluation time: mean estimate, empirical SE (NA below two
    replications), mean reported SE, coverage and bias over the successful replications."""
    keys = ["scenario", "mechanism", "rate", "method", "coefficient", "eval_time"]
    ok = raw.assign(err=raw["estimate"] - raw["truth"])
    grouped = ok.groupby(keys, sort=True, dropna=False)
    table = grouped.agg(
        mean_est=("estimate", "mean"),
        emp_se=("estimate", lambda s: s.std(ddof=1) if s.count() > 1 else np.nan),
        mean_se=("se", "mean"),
        coverage=("covered", "mean"),
        reps=("estimate", "count"),
        mean_truth=("truth", "mean"),
        bias=("err", "mean"),
    ).reset_index()
    table["reps"] = table["reps"].astype(int)
    return table[METRIC_COLUMNS]


def summarize_change_points(cps: pd.DataFrame, reps: int, T_by_scenario: Mapping[str, int]) -> pd.DataFrame:
    """Spread of detected change points around each true one, and the share of replications
    with a detection within 5% of T."""
    keys = ["scenario", "mechanism", "rate", "method", "coefficient", "true_change_point"]
    if cps.empty:
        return pd.DataFrame(
            columns=keys + ["detections", "mean", "sd", "median", "share_within_5pct"]
        )
    cps = cps.assign(tol=cps["scenario"].map(lambda s: 0.05 * T_by_scenario[s]))
    cps = cps.assign(close=cps["error"].abs() <= cps["tol"])
    rows = []
    for key, g in cps.groupby(keys, sort=True):
        hit_reps = g.loc[g["close"], "rep"].nunique()
        rows.append(
            dict(
                zip(keys, key),
                detections=int(len(g)),
                mean=float(g["change_point"].mean()),
                sd=float(g["change_point"].std(ddof=1)) if len(g) > 1 else np.nan,
                median=float(g["change_point"].median()),
                share_within_5pct=hit_reps / reps,
            )
        )
    return pd.DataFrame(rows)


# --- Grid -----------------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    scenarios: Tuple[ScenarioSpec, ...] = (ScenarioSpec(),)
    mechanisms: Tuple[str, ...] = ("MCAR",)
    rates: Tuple[float, ...] = (0.5,)
    methods: Tuple[str, ...] = ("cc", "ssmimpute")
    reps: int = DESK_REPS
    seed: int = 0
    imputation: ImputationConfig = field(default_factory=ImputationConfig)
    models: Tuple[Tuple[str, ModelSpec], ...] = ()
    n_jobs: int = 1

    def __post_init__(self):
        for name in ("scenarios", "mechanisms", "rates", "methods", "models"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "mechanisms", tuple(str(m).upper() for m in self.mechanisms))
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ContractError(f"unknown method(s) {unknown}, expected a subset of {METHODS}")
        if self.reps < 1:
            raise ContractError("grid reps must be >= 1")
        if not self.scenarios or not self.mechanisms or not self.rates or not self.methods:
            raise ContractError("grid needs at least one scenario, mechanism, rate and method")
        for rate in self.rates:
            MechanismSpec(kind=self.mechanisms[0], target_rate=rate)
        for kind in self.mechanisms:
            MechanismSpec(kind=kind)

    def model_for(self, sc: ScenarioSpec) -> ModelSpec:
        return dict(self.models).get(sc.kind) or default_model(sc.kind)

    def full_scale(self) -> "GridSpec":
        return replace(
            self,
            reps=FULL_REPS,
            scenarios=tuple(replace(sc, T=FULL_T, change_points=()) for sc in self.scenarios),
        )

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], where: str = "grid") -> "GridSpec":
        reject_unknown_keys(
            d, {"scenarios", "mechanisms", "rates", "methods", "reps", "seed", "models", "n_jobs"}, where
        )
        kw: Dict[str, Any] = {}
        if "scenarios" in d:
            kw["scenarios"] = tuple(
                ScenarioSpec.from_dict(s, f"{where}.scenarios[{i}]") for i, s in enumerate(d["scenarios"])
            )
        for key in ("mechanisms", "rates", "methods"):
            if key in d:
                kw[key] = tuple(d[key])
        for key in ("reps", "seed", "n_jobs"):
            if key in d:
                kw[key] = int(d[key])
        if "models" in d:
            models = d["models"]
            if not isinstance(models, Mapping):
                raise ContractError(f"{where}.models must map a scenario kind to a model")
            reject_unknown_keys(models, set(SCENARIO_KINDS), f"{where}.models")
            kw["models"] = tuple(
                (kind, ModelSpec.from_dict(m, f"{where}.models.{kind}")) for kind, m in models.items()
            )
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class GridResult:
    raw: pd.DataFrame
    metrics: pd.DataFrame
    change_points: pd.DataFrame
    change_point_summary: pd.DataFrame
    failures: Tuple[str, ...] = ()


def _cell_seeds(seed: int, rep: int, s_idx: int, m_idx: int, r_idx: int) -> Tuple[int, int]:
    data_ss = np.random.SeedSequence([seed ^ rep, s_idx])
    mask_ss = np.random.SeedSequence([seed ^ rep, s_idx, m_idx, r_idx])
    return int(data_ss.generate_state(1)[0]), int(mask_ss.generate_state(1)[0])


def _nearest(value: int, truths: Sequence[int]) -> Optional[int]:
    if not truths:
        return None
    return min(truths, key=lambda c: (abs(c - value), c))


def run_cell(
    grid: GridSpec, s_idx: int, m_idx: int, r_idx: int, rep: int
) -> Tuple[List[Dict[str, Any]], List[Dict[str, Any]], List[str]]:
    """One replication of one scenario x mechanism x rate: every method on the same dataset."""
    sc = grid.scenarios[s_idx]
    mechanism, rate = grid.mechanisms[m_idx], grid.rates[r_idx]
    data_seed, mask_seed = _cell_seeds(grid.seed, rep, s_idx, m_idx, r_idx)
    ds, truth = generate_scenario(sc, seed=data_seed)
    masked = apply_mechanism(ds, MechanismSpec(kind=mechanism, target_rate=rate, seed=mask_seed))
    spec = grid.model_for(sc)
    cfg = replace(grid.imputation, seed=mask_seed, n_jobs=1)
    base = {"scenario": sc.kind, "mechanism": mechanism, "rate": rate, "rep": rep}
    rows: List[Dict[str, Any]] = []
    cp_rows: List[Dict[str, Any]] = []
    failures: List[str] = []
    for method in grid.methods:
        tag = method_tag(method, cfg.analysis)
        try:
            result = run_method(masked, spec, method, cfg)
            status = "ok"
        except SSMError as exc:
            result, status = None, f"{type(exc).__name__}: {exc}"
            failures.append(f"{sc.kind} {mechanism} {rate} rep={rep} {tag}: {status}")
            logger.warning("grid cell failed: %s", failures[-1])
        except Exception as exc:
            # library errors (LinAlgError, statsmodels, scipy) must not abort the grid
            result, status = None, f"{type(exc).__name__}: {exc}"
            failures.append(f"{sc.kind} {mechanism} {rate} rep={rep} {tag}: {status}")
            logger.exception("grid cell failed: %s", failures[-1])
        for truth_name, coef in COEFFICIENT_ALIASES.items():
            for t in sc.eval_times(truth_name):
                row = dict(base, method=tag, coefficient=truth_name, eval_time=t)
                row["truth"] = truth.value(truth_name, t)
                if result is None:
                    row.update(estimate=np.nan, se=np.nan, lower=np.nan, upper=np.nan, covered=np.nan)
                else:
                    est = result.pooled.at(coef, t)
                    row.update(est)
                    row["covered"] = int(coverage(row["truth"], est["lower"], est["upper"]))
                row["status"] = status
                rows.append(row)
        if result is not None:
            reverse = {v: k for k, v in COEFFICIENT_ALIASES.items()}
            for coef, cps in result.change_points.items():
                for cp in cps:
                    true_cp = _nearest(cp, truth.change_points)
                    cp_rows.append(
                        dict(
                            base,
                            method=tag,
                            coefficient=reverse.get(coef, coef),
                            change_point=cp,
                            true_change_point=np.nan if true_cp is None else true_cp,
                            error=np.nan if true_cp is None else cp - true_cp,
                        )
                    )
    return rows, cp_rows, failures


def run_grid(grid: GridSpec, progress: bool = True) -> GridResult:
    """Run every cell, in parallel when ``grid.n_jobs`` allows, and aggregate.

    Tables are sorted by their key columns, so they do not depend on execution order.
    """
    cells = [
        (s, m, r, rep)
        for s in range(len(grid.scenarios))
        for m in range(len(grid.mechanisms))
        for r in range(len(grid.rates))
        for rep in range(grid.reps)
    ]
    logger.info(
        "grid: %d scenario(s) x %d mechanism(s) x %d rate(s) x %d rep(s), methods %s",
        len(grid.scenarios),
        len(grid.mechanisms),
        len(grid.rates),
        grid.reps,
        ",".join(grid.methods),
    )
    bar = tqdm(cells, desc="grid", unit="cell", disable=not progress)
    if grid.n_jobs == 1:
        outputs = [run_cell(grid, *cell) for cell in bar]
    else:
        outputs = Parallel(n_jobs=grid.n_jobs)(delayed(run_cell)(grid, *cell) for cell in bar)
    rows = [row for out in outputs for row in out[0]]
    cp_rows = [row for out in outputs for row in out[1]]
    failures = tuple(f for out in outputs for f in out[2])
    raw = pd.DataFrame(rows, columns=RAW_COLUMNS)
    raw = raw.sort_values(
        ["scenario", "mechanism", "rate", "method", "coefficient", "eval_time", "rep"], kind="mergesort"
    ).reset_index(drop=True)
    cps = pd.DataFrame(cp_rows, columns=CHANGE_POINT_COLUMNS)
    cps = cps.sort_values(
        ["scenario", "mechanism", "rate", "method", "coefficient", "rep", "change_point"], kind="mergesort"
    ).reset_index(drop=True)
    T_by_scenario = {sc.kind: sc.T for sc in grid.scenarios}
    if failures:
        logger.warning("%d method run(s) failed; recorded as NA", len(failures))
    return GridResult(
        raw=raw,
        metrics=aggregate_metrics(raw),
        change_points=cps,
        change_point_summary=summarize_change_points(
            cps.dropna(subset=["true_change_point"]), grid.reps, T_by_scenario
        ),
        failures=failures,
    )
