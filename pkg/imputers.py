"""
imputers.py
Multiple imputation of missing outcomes for lagged state space regressions.

    ssmmp       draw-refit-pool iteration: fit on Y_obs, draw r completions from the
                coefficient posterior, refit each, Rubin-pool, update the guesses with the
                mean of the draws, repeat until the fit stops moving
    ssmimpute   deterministic fit-and-substitute iteration, then one multiple-imputation pass
    cc          complete-case analysis on the spliced timeline
    mean, locf, linear, spline, mice, ar
                baselines that fill the outcome everywhere, response slot included

Observed outcomes are never overwritten. The SSM methods put filled-in values only into the
lagged-outcome slots of the design; the likelihood always runs on Y_obs.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import statsmodels.api as sm
from joblib import Parallel, delayed
from scipy.interpolate import CubicSpline
from scipy.stats import norm

from design import (
    DesignMatrix,
    ModelFit,
    ModelSpec,
    TimeSeriesDataset,
    build_design,
    design_row,
    expand_to_original,
    fit_model,
    map_change_points_to_original,
    map_change_points_to_spliced,
    reject_unknown_keys,
    splice_complete_cases,
    state_dimension,
)
from dlm_core import ContractError, InsufficientData, SSMError, StructuralParams, draw_states
from structure import (
    INVARIANCE_RATIO,
    MIN_SEGMENT,
    SPLIT_THRESHOLD,
    DynamicsClassification,
    StructureThresholds,
    learn_structure,
)

logger = logging.getLogger(__name__)

SSM_METHODS = ("ssmimpute", "ssmmp")
BASELINES = ("mean", "locf", "linear", "spline", "mice", "ar")
METHODS = ("cc",) + BASELINES + SSM_METHODS
ANALYSES = ("ssm", "lm")
VOCABULARY_VERSION = "1"
LEVEL = 0.90
AR_MAX_ORDER = 5


@dataclass(frozen=True)
class ImputationConfig:
    r: int = 20
    max_iter: int = 50
    tol: float = 1e-4
    seed: Optional[int] = None
    use_smoothed: bool = True
    learn_structure: bool = True
    min_seg: int = MIN_SEGMENT
    split_threshold: float = SPLIT_THRESHOLD
    invariance_ratio: float = INVARIANCE_RATIO
    allow_ar: bool = False
    restarts: int = 3
    n_jobs: int = 1
    analysis: str = "ssm"
    mice_sweeps: int = 10

    def __post_init__(self):
        if self.r < 2:
            raise ContractError(f"imputation.r must be >= 2, got {self.r}")
        if not self.tol > 0:
            raise ContractError(f"imputation.tol must be > 0, got {self.tol}")
        if self.max_iter < 1:
            raise ContractError("imputation.max_iter must be >= 1")
        if self.analysis not in ANALYSES:
            raise ContractError(f"imputation.analysis must be one of {ANALYSES}, got '{self.analysis}'")

    def thresholds(self) -> StructureThresholds:
        return StructureThresholds(
            min_seg=self.min_seg,
            split_threshold=self.split_threshold,
            invariance_ratio=self.invariance_ratio,
            allow_ar=self.allow_ar,
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], where: str = "imputation") -> "ImputationConfig":
        allowed = set(cls.__dataclass_fields__)
        reject_unknown_keys(d, allowed, where)
        return cls(**dict(d))


# --- Rubin pooling -----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PooledEstimate:
    """Rubin-combined estimates, one cell per (time, coefficient).

    ``r`` is 1 for a single fit, in which case the between-imputation variance is zero.
    """

    mean: np.ndarray
    within: np.ndarray
    between: np.ndarray
    r: int
    names: Tuple[str, ...] = ()
    t_index: Optional[np.ndarray] = None
    level: float = LEVEL

    @property
    def total(self) -> np.ndarray:
        return self.within + (1.0 + 1.0 / self.r) * self.between

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(self.total)

    @property
    def z(self) -> float:
        return float(norm.ppf(0.5 + 0.5 * self.level))

    @property
    def lower(self) -> np.ndarray:
        return self.mean - self.z * self.se

    @property
    def upper(self) -> np.ndarray:
        return self.mean + self.z * self.se

    def column(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ContractError(f"no pooled estimate for coefficient '{name}'") from None

    def at(self, name: str, t: int) -> Dict[str, float]:
        """Estimate of ``name`` at 1-based original time ``t``."""
        t_index = np.arange(1, self.mean.shape[0] + 1) if self.t_index is None else self.t_index
        rows = np.flatnonzero(t_index == t)
        if rows.size == 0:
            raise ContractError(f"time {t} is not covered by these estimates")
        i, j = int(rows[0]), self.column(name)
        return {
            "estimate": float(self.mean[i, j]),
            "se": float(self.se[i, j]),
            "lower": float(self.lower[i, j]),
            "upper": float(self.upper[i, j]),
        }

    def to_frame(self) -> pd.DataFrame:
        T, k = self.mean.shape
        t_index = np.arange(1, T + 1) if self.t_index is None else self.t_index
        return pd.DataFrame(
            {
                "t": np.repeat(t_index, k),
                "coefficient": np.tile(np.array(self.names, dtype=object), T),
                "estimate": self.mean.reshape(-1),
                "se": self.se.reshape(-1),
                "lower": self.lower.reshape(-1),
                "upper": self.upper.reshape(-1),
                "within": self.within.reshape(-1),
                "between": self.between.reshape(-1),
            }
        )

    @classmethod
    def from_fit(cls, fit: ModelFit, t_index: Optional[np.ndarray] = None) -> "PooledEstimate":
        mean = fit.coef_mean.copy()
        return cls(
            mean=mean,
            within=np.clip(fit.coef_var, 0.0, None),
            between=np.zeros_like(mean),
            r=1,
            names=fit.design.columns,
            t_index=t_index,
        )

    def reindexed(self, rows: np.ndarray, t_index: np.ndarray) -> "PooledEstimate":
        return replace(
            self,
            mean=self.mean[rows],
            within=self.within[rows],
            between=self.between[rows],
            t_index=np.asarray(t_index),
        )


def rubin_pool(
    estimates,
    variances,
    names: Sequence[str] = (),
    t_index: Optional[np.ndarray] = None,
    level: float = LEVEL,
) -> PooledEstimate:
    """Combine r per-imputation estimates and variances (leading axis r).

    pooled = mean, W = mean variance, B = sample variance of the estimates,
    total = W + (1 + 1/r) B; intervals use the normal quantile on sqrt(total).
    """
    est = np.asarray(estimates, dtype=float)
    var = np.asarray(variances, dtype=float)
    if est.shape != var.shape:
        raise ContractError(f"estimates {est.shape} and variances {var.shape} differ in shape")
    r = est.shape[0] if est.ndim else 0
    if r < 2:
        raise ContractError(f"Rubin pooling needs r >= 2 imputations, got {r}")
    if np.any(var < 0):
        raise ContractError("imputation variances must be >= 0")
    return PooledEstimate(
        mean=est.mean(axis=0),
        within=var.mean(axis=0),
        between=est.var(axis=0, ddof=1),
        r=r,
        names=tuple(names),
        t_index=t_index,
        level=level,
    )


# --- Results ----------------------------------------------------------------------------


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    loglik: float
    loglik_change: float
    coef_change: float
    param_change: float
    params: Dict[str, float] = field(default_factory=dict)
    change_points: Dict[str, Tuple[int, ...]] = field(default_factory=dict)

    def within(self, tol: float) -> bool:
        return self.loglik_change < tol and self.coef_change < tol and self.param_change < tol

    def to_dict(self) -> Dict[str, Any]:
        out = {
            "iteration": self.iteration,
            "loglik": self.loglik,
            "loglik_change": self.loglik_change,
            "coef_change": self.coef_change,
            "param_change": self.param_change,
        }
        out.update({f"param:{k}": v for k, v in self.params.items()})
        out["change_points"] = ";".join(
            f"{n}={'/'.join(str(c) for c in cps)}" for n, cps in self.change_points.items()
        )
        return out


@dataclass(frozen=True, eq=False)
class ImputationResult:
    method: str
    pooled: PooledEstimate
    completed: np.ndarray  # (r, T); a single row for deterministic methods
    params: StructuralParams
    trace: Tuple[IterationRecord, ...] = ()
    converged: bool = True
    spec: Optional[ModelSpec] = None
    change_points: Dict[str, Tuple[int, ...]] = field(default_factory=dict)
    spliced: Optional[PooledEstimate] = None
    time_map: Optional[np.ndarray] = None
    classification: Optional[DynamicsClassification] = None

    @property
    def iterations(self) -> int:
        return len(self.trace)

    def trace_frame(self) -> pd.DataFrame:
        return pd.DataFrame([rec.to_dict() for rec in self.trace])


def _change_points(spec: ModelSpec) -> Dict[str, Tuple[int, ...]]:
    return {n: d.change_points for n, d in spec.dynamics if d.kind == "periodic_stable"}


def _map_spec_change_points(spec: ModelSpec, mapper: Callable[[Sequence[int]], Tuple[int, ...]]) -> ModelSpec:
    updates = {}
    for n, d in spec.dynamics:
        if d.kind == "periodic_stable":
            updates[n] = replace(d, change_points=mapper(d.change_points))
    return spec.with_dynamics(updates) if updates else spec


# --- Shared fitting step -----------------------------------------------------------------


def fit_with_structure(
    ds: TimeSeriesDataset,
    dm: DesignMatrix,
    spec: ModelSpec,
    cfg: ImputationConfig,
    params: Optional[StructuralParams] = None,
    restarts: Optional[int] = None,
) -> Tuple[ModelFit, ModelSpec, DynamicsClassification]:
    """MLE fit, followed by the structure-learning loop when enabled and anything is learnable."""
    restarts = cfg.restarts if restarts is None else restarts
    if cfg.learn_structure and spec.learnable():
        return learn_structure(
            ds,
            dm,
            spec,
            thresholds=cfg.thresholds(),
            params=params,
            restarts=restarts,
            use_smoothed=cfg.use_smoothed,
        )
    fit = fit_model(ds, dm, spec, params=params, restarts=restarts, use_smoothed=cfg.use_smoothed)
    return fit, spec, DynamicsClassification()


def _relative(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(b))


def _coef_change(new: np.ndarray, old: Optional[np.ndarray]) -> float:
    if old is None or old.shape != new.shape:
        return float("inf")
    scale = max(1.0, float(np.max(np.abs(old))))
    return float(np.max(np.abs(new - old))) / scale


def _param_change(new: StructuralParams, old: Optional[StructuralParams]) -> float:
    if old is None or new.names != old.names:
        return float("inf")
    # difference of logs is the relative change to first order
    return float(np.max(np.abs(new.log_values - old.log_values))) if new.names else 0.0


# --- Completing outcomes ----------------------------------------------------------------


def initial_guess(y: np.ndarray) -> np.ndarray:
    """Linear interpolation between observed outcomes, edges held flat."""
    y = np.asarray(y, dtype=float)
    observed = np.isfinite(y)
    if not observed.any():
        raise ContractError("every outcome is missing; nothing to interpolate from")
    t = np.arange(y.shape[0])
    return np.where(observed, y, np.interp(t, t[observed], y[observed]))


def _lag_fill(ds: TimeSeriesDataset, completed: np.ndarray) -> np.ndarray:
    return np.where(ds.mask, completed, np.nan)


def complete_outcomes(
    dm: DesignMatrix,
    ds: TimeSeriesDataset,
    coefs: np.ndarray,
    start: np.ndarray,
    noise: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Fill missing outcomes forward in time from coefficient paths.

    ``coefs`` has shape (r, T, >=k); ``noise`` (r, n_missing) is added when given. Each
    completion uses its own earlier fills in its lagged slots. Missing outcomes inside the
    burn-in keep ``start`` (plus noise).
    """
    r = coefs.shape[0]
    k = dm.k
    Y = np.broadcast_to(np.where(ds.mask, start, ds.y), (r, ds.T)).copy()
    for i, t in enumerate(ds.missing_times):
        row = design_row(dm, int(t), Y)
        if np.all(np.isfinite(row)):
            Y[:, t] = np.einsum("rk,rk->r", row, coefs[:, t, :k])
        if noise is not None:
            Y[:, t] += noise[:, i]
    Y[:, ~ds.mask] = ds.y[~ds.mask]
    return Y


def _draw_completions(
    fit: ModelFit, ds: TimeSeriesDataset, start: np.ndarray, r: int, seed: Optional[int]
) -> np.ndarray:
    # same stream every iteration so the outer loop is a deterministic map
    rng = np.random.default_rng(seed)
    theta = draw_states(fit.path, r, rng)
    noise = np.sqrt(fit.obs_variance) * rng.standard_normal((r, ds.n_missing))
    return complete_outcomes(fit.design, ds, theta, start, noise)


def _refit_moments(
    ds: TimeSeriesDataset,
    spec: ModelSpec,
    completed: np.ndarray,
    params: StructuralParams,
    use_smoothed: bool,
) -> Tuple[np.ndarray, np.ndarray]:
    dm = build_design(ds, spec, imputed_y=_lag_fill(ds, completed))
    fit = fit_model(ds, dm, spec, params=params, estimate=False, use_smoothed=use_smoothed)
    return fit.coef_mean, fit.coef_var


def _parallel_map(func, args: Sequence[tuple], n_jobs: int) -> List[Any]:
    if n_jobs == 1 or len(args) < 2:
        return [func(*a) for a in args]
    return Parallel(n_jobs=n_jobs)(delayed(func)(*a) for a in args)


def _pool_refits(
    ds: TimeSeriesDataset,
    spec: ModelSpec,
    completed: np.ndarray,
    params: StructuralParams,
    cfg: ImputationConfig,
) -> PooledEstimate:
    jobs = [(ds, spec, y, params, cfg.use_smoothed) for y in completed]
    moments = _parallel_map(_refit_moments, jobs, cfg.n_jobs)
    means = np.stack([m for m, _ in moments])
    variances = np.clip(np.stack([v for _, v in moments]), 0.0, None)
    return rubin_pool(means, variances, names=spec.coefficient_names(), t_index=ds.t_index)


def _single_fit_result(method: str, ds: TimeSeriesDataset, spec: ModelSpec, cfg: ImputationConfig) -> ImputationResult:
    dm = build_design(ds, spec)
    fit, spec, cls = fit_with_structure(ds, dm, spec, cfg)
    record = IterationRecord(
        iteration=1,
        loglik=fit.loglik,
        loglik_change=0.0,
        coef_change=0.0,
        param_change=0.0,
        params=fit.params.as_dict(),
        change_points=_change_points(spec),
    )
    return ImputationResult(
        method=method,
        pooled=PooledEstimate.from_fit(fit, ds.t_index),
        completed=ds.y[None, :].copy(),
        params=fit.params,
        trace=(record,),
        converged=fit.converged,
        spec=spec,
        change_points=_change_points(spec),
        classification=cls,
    )


def _check_missing_only_outcome(ds: TimeSeriesDataset, spec: ModelSpec):
    for name in spec.exposures + spec.covariates:
        ds.series(name)
    if ds.n_missing == ds.T:
        raise ContractError("every outcome is missing")


# --- SSMmp ------------------------------------------------------------------------------


def ssm_mp(ds: TimeSeriesDataset, spec: ModelSpec, cfg: ImputationConfig = ImputationConfig()) -> ImputationResult:
    """Iterate fit (MLE on Y_obs), r posterior draws, r refits, Rubin pooling and the
    mean-of-draws update until log-likelihood, pooled coefficients and structural
    parameters all change by less than ``cfg.tol``.
    """
    _check_missing_only_outcome(ds, spec)
    if ds.n_missing == 0:
        return _single_fit_result("ssmmp", ds, spec, cfg)
    guess = initial_guess(ds.y)
    params: Optional[StructuralParams] = None
    learned = spec
    prev_ll: Optional[float] = None
    prev_mean: Optional[np.ndarray] = None
    trace: List[IterationRecord] = []
    converged = False
    pooled = completed = cls = None
    for it in range(1, cfg.max_iter + 1):
        try:
            dm = build_design(ds, spec, imputed_y=_lag_fill(ds, guess))
            fit, learned, cls = fit_with_structure(
                ds, dm, spec, cfg, params=params, restarts=cfg.restarts if it == 1 else 1
            )
            completed = _draw_completions(fit, ds, guess, cfg.r, cfg.seed)
            pooled = _pool_refits(ds, learned, completed, fit.params, cfg)
        except SSMError as exc:
            logger.error("ssmmp failed at iteration %d: %s", it, exc)
            exc.iteration = it  # type: ignore[attr-defined]
            raise
        record = IterationRecord(
            iteration=it,
            loglik=fit.loglik,
            loglik_change=float("inf") if prev_ll is None else _relative(fit.loglik, prev_ll),
            coef_change=_coef_change(pooled.mean, prev_mean),
            param_change=_param_change(fit.params, params),
            params=fit.params.as_dict(),
            change_points=_change_points(learned),
        )
        trace.append(record)
        logger.debug("ssmmp iteration %d: %s", it, record.to_dict())
        guess = np.where(ds.mask, completed.mean(axis=0), ds.y)
        params, prev_ll, prev_mean = fit.params, fit.loglik, pooled.mean
        if record.within(cfg.tol):
            converged = True
            break
    if not converged:
        logger.warning("ssmmp did not converge in %d iterations", cfg.max_iter)
    return ImputationResult(
        method="ssmmp",
        pooled=pooled,
        completed=completed,
        params=params,
        trace=tuple(trace),
        converged=converged,
        spec=learned,
        change_points=_change_points(learned),
        classification=cls,
    )


# --- SSMimpute ----------------------------------------------------------------------------


def ssm_impute(
    ds: TimeSeriesDataset, spec: ModelSpec, cfg: ImputationConfig = ImputationConfig()
) -> ImputationResult:
    """Alternate fitting and noise-free substitution y_t = F_t theta_t until the fit settles,
    then make r noisy draws from the final fit, refit each and Rubin-pool.
    """
    _check_missing_only_outcome(ds, spec)
    if ds.n_missing == 0:
        return _single_fit_result("ssmimpute", ds, spec, cfg)
    guess = initial_guess(ds.y)
    params: Optional[StructuralParams] = None
    learned = spec
    prev_ll: Optional[float] = None
    prev_mean: Optional[np.ndarray] = None
    trace: List[IterationRecord] = []
    converged = False
    fit = cls = None
    for it in range(1, cfg.max_iter + 1):
        try:
            dm = build_design(ds, spec, imputed_y=_lag_fill(ds, guess))
            fit, learned, cls = fit_with_structure(
                ds, dm, spec, cfg, params=params, restarts=cfg.restarts if it == 1 else 1
            )
        except SSMError as exc:
            logger.error("ssmimpute failed at iteration %d: %s", it, exc)
            exc.iteration = it  # type: ignore[attr-defined]
            raise
        record = IterationRecord(
            iteration=it,
            loglik=fit.loglik,
            loglik_change=float("inf") if prev_ll is None else _relative(fit.loglik, prev_ll),
            coef_change=_coef_change(fit.coef_mean, prev_mean),
            param_change=_param_change(fit.params, params),
            params=fit.params.as_dict(),
            change_points=_change_points(learned),
        )
        if it > 2 and prev_ll is not None and fit.loglik < prev_ll - cfg.tol * max(1.0, abs(prev_ll)):
            logger.warning(
                "ssmimpute log-likelihood decreased at iteration %d: %.6f -> %.6f", it, prev_ll, fit.loglik
            )
        trace.append(record)
        logger.debug("ssmimpute iteration %d: %s", it, record.to_dict())
        guess = complete_outcomes(fit.design, ds, fit.coef_mean[None, :, :], guess)[0]
        params, prev_ll, prev_mean = fit.params, fit.loglik, fit.coef_mean
        if record.within(cfg.tol):
            converged = True
            break
    if not converged:
        logger.warning("ssmimpute did not converge in %d iterations", cfg.max_iter)
    dm = build_design(ds, spec, imputed_y=_lag_fill(ds, guess))
    final = fit_model(ds, dm, learned, params=params, estimate=False, use_smoothed=cfg.use_smoothed)
    completed = _draw_completions(final, ds, guess, cfg.r, cfg.seed)
    pooled = _pool_refits(ds, learned, completed, params, cfg)
    return ImputationResult(
        method="ssmimpute",
        pooled=pooled,
        completed=completed,
        params=params,
        trace=tuple(trace),
        converged=converged,
        spec=learned,
        change_points=_change_points(learned),
        classification=cls,
    )


# --- Complete case --------------------------------------------------------------------------


def spliced_fit(
    ds: TimeSeriesDataset, spec: ModelSpec, cfg: ImputationConfig
) -> Tuple[TimeSeriesDataset, ModelFit, ModelSpec, DynamicsClassification]:
    """Splice out incomplete rows and fit on the compressed timeline.

    Declared change points are moved onto the spliced timeline; the returned model carries
    the spliced-timeline change points, ``fit.design.time_map`` the original time labels.
    """
    dm = build_design(ds, spec)
    sds, sdm = splice_complete_cases(ds, dm, state_dim=state_dimension(spec))
    positions = np.searchsorted(ds.t_index, sdm.time_map) + 1
    sspec = _map_spec_change_points(spec, lambda cps: map_change_points_to_spliced(positions, cps))
    fit, sspec, cls = fit_with_structure(sds, sdm, sspec, cfg)
    return sds, fit, sspec, cls


def complete_case_fit(
    ds: TimeSeriesDataset, spec: ModelSpec, cfg: ImputationConfig = ImputationConfig(), method: str = "cc"
) -> ImputationResult:
    """Splice out incomplete rows, fit on the compressed timeline, report on original times.

    Declared change points are moved onto the spliced timeline for fitting; learned and
    declared change points are reported in original time.
    """
    sds, fit, sspec, cls = spliced_fit(ds, spec, cfg)
    time_map = sds.t_index
    positions = np.searchsorted(ds.t_index, time_map) + 1
    spliced = PooledEstimate.from_fit(fit, time_map)
    rows = expand_to_original(np.arange(len(time_map)), positions, ds.T)
    pooled = spliced.reindexed(rows, ds.t_index)
    out_spec = _map_spec_change_points(sspec, lambda cps: map_change_points_to_original(positions, cps))
    record = IterationRecord(
        iteration=1,
        loglik=fit.loglik,
        loglik_change=0.0,
        coef_change=0.0,
        param_change=0.0,
        params=fit.params.as_dict(),
        change_points=_change_points(out_spec),
    )
    return ImputationResult(
        method=method,
        pooled=pooled,
        completed=ds.y[None, :].copy(),
        params=fit.params,
        trace=(record,),
        converged=fit.converged,
        spec=out_spec,
        change_points=_change_points(out_spec),
        spliced=spliced,
        time_map=time_map,
        classification=cls,
    )


# --- Baselines ---------------------------------------------------------------------------


def _fill_mean(y: np.ndarray, observed: np.ndarray) -> np.ndarray:
    return np.where(observed, y, float(np.mean(y[observed])))


def _fill_locf(y: np.ndarray, observed: np.ndarray) -> np.ndarray:
    return pd.Series(y).ffill().bfill().to_numpy()


def _fill_spline(y: np.ndarray, observed: np.ndarray) -> np.ndarray:
    t = np.arange(y.shape[0])
    if observed.sum() < 4:
        logger.warning("spline needs 4 observed outcomes, have %d; using linear", int(observed.sum()))
        return initial_guess(y)
    t_obs, y_obs = t[observed], y[observed]
    inner = CubicSpline(t_obs, y_obs, bc_type="natural")(t)
    edge = np.interp(t, t_obs, y_obs)
    inside = (t >= t_obs[0]) & (t <= t_obs[-1])
    return np.where(observed, y, np.where(inside, inner, edge))


def _lagged_exogenous(ds: TimeSeriesDataset) -> np.ndarray:
    cols = []
    for values in list(ds.exposures.values()) + list(ds.covariates.values()):
        cols.append(values)
        cols.append(np.concatenate(([np.nan], values[:-1])))
    return np.column_stack(cols) if cols else np.empty((ds.T, 0))


def _fill_mice(ds: TimeSeriesDataset, r: int, sweeps: int, rng: np.random.Generator) -> np.ndarray:
    """Chained-equations fill of y_t from (1, y_{t-1}, current and 1-lagged exogenous series).

    Each chain starts from the linear interpolation and runs ``sweeps`` passes; every pass
    refits the regression on rows with an observed response and draws the parameters from
    their approximate posterior before filling forward in time with residual noise.
    """
    y = ds.y
    observed = np.isfinite(y)
    exo = _lagged_exogenous(ds)
    start = initial_guess(y)
    chains = np.empty((r, ds.T))
    fit_rows = observed.copy()
    fit_rows[0] = False
    if fit_rows.sum() < exo.shape[1] + 3:
        raise InsufficientData("too few observed outcomes for the chained-equations regression")
    for i in range(r):
        y_cur = start.copy()
        for _ in range(sweeps):
            X = np.column_stack([np.ones(ds.T), np.concatenate(([np.nan], y_cur[:-1])), exo])
            res = sm.OLS(y[fit_rows], X[fit_rows]).fit()
            df = res.df_resid
            sigma2 = float(res.ssr / rng.chisquare(df))
            cov = res.cov_params() * (sigma2 / res.scale) if res.scale > 0 else np.zeros((X.shape[1],) * 2)
            beta = rng.multivariate_normal(res.params, cov)
            if not observed[0]:
                y_cur[0] = float(np.mean(y[observed])) + np.sqrt(sigma2) * rng.standard_normal()
            for t in np.flatnonzero(~observed):
                if t == 0:
                    continue
                x_t = X[t].copy()
                x_t[1] = y_cur[t - 1]
                y_cur[t] = float(x_t @ beta) + np.sqrt(sigma2) * rng.standard_normal()
        chains[i] = y_cur
    return chains


def _fill_ar(y: np.ndarray, observed: np.ndarray) -> np.ndarray:
    """AR(p) by AIC over p = 1..5 on a common sample, filled by forward conditional expectation."""
    T = y.shape[0]
    lags = np.column_stack([np.concatenate((np.full(j, np.nan), y[: T - j])) for j in range(1, AR_MAX_ORDER + 1)])
    best_p, best = 0, None
    for max_p in range(AR_MAX_ORDER, 0, -1):
        rows = observed & np.all(np.isfinite(lags[:, :max_p]), axis=1)
        if rows.sum() >= max_p + 10:
            break
    else:
        logger.warning("too few consecutive observed outcomes for an AR fit; filling with the mean")
        return _fill_mean(y, observed)
    for p in range(1, max_p + 1):
        res = sm.OLS(y[rows], sm.add_constant(lags[rows, :p], has_constant="add")).fit()
        if best is None or res.aic < best.aic:
            best_p, best = p, res
    logger.debug("ar baseline picked p=%d (aic %.3f)", best_p, best.aic)
    const, phi = float(best.params[0]), np.asarray(best.params[1:], dtype=float)
    fallback = float(np.mean(y[observed]))
    out = y.copy()
    for t in np.flatnonzero(~observed):
        if t < best_p:
            out[t] = fallback
        else:
            out[t] = const + float(phi @ out[t - best_p : t][::-1])
    return out


_SINGLE_FILLS = {
    "mean": _fill_mean,
    "locf": _fill_locf,
    "linear": lambda y, observed: initial_guess(y),
    "spline": _fill_spline,
    "ar": _fill_ar,
}


def baseline_impute(
    ds: TimeSeriesDataset,
    method: str,
    r: int = 20,
    seed: Optional[int] = None,
    sweeps: int = 10,
) -> np.ndarray:
    """Completed outcome series, shape (m, T): m = r for mice, 1 for the deterministic fills."""
    if method not in BASELINES:
        raise ContractError(f"unknown baseline '{method}', expected one of {BASELINES}")
    y = ds.y
    observed = np.isfinite(y)
    if not observed.any():
        raise ContractError("every outcome is missing")
    if observed.all():
        return y[None, :].copy()
    if method == "mice":
        out = _fill_mice(ds, r, sweeps, np.random.default_rng(seed))
    else:
        out = _SINGLE_FILLS[method](y, observed)[None, :]
    out[:, observed] = y[observed]
    return out


def baseline_fit(
    ds: TimeSeriesDataset, spec: ModelSpec, method: str, cfg: ImputationConfig = ImputationConfig()
) -> ImputationResult:
    """Fill with a baseline, then fit each completed series (response and lag slots both filled)."""
    completed = baseline_impute(ds, method, r=cfg.r, seed=cfg.seed, sweeps=cfg.mice_sweeps)
    tag = method_tag(method, cfg.analysis)
    if cfg.analysis == "lm":
        spec = spec.all_invariant()
    fits = []
    params: Optional[StructuralParams] = None
    out_spec, cls = spec, DynamicsClassification()
    for i, y in enumerate(completed):
        cds = ds.with_y(y, keep_truth=False)
        dm = build_design(cds, spec)
        fit, out_spec, cls = fit_with_structure(
            cds, dm, spec, cfg, params=params, restarts=cfg.restarts if i == 0 else 1
        )
        if params is None:
            params = fit.params
        fits.append(fit)
    if len(fits) == 1:
        pooled = PooledEstimate.from_fit(fits[0], ds.t_index)
    else:
        pooled = rubin_pool(
            np.stack([f.coef_mean for f in fits]),
            np.clip(np.stack([f.coef_var for f in fits]), 0.0, None),
            names=fits[0].design.columns,
            t_index=ds.t_index,
        )
    record = IterationRecord(
        iteration=1,
        loglik=fits[0].loglik,
        loglik_change=0.0,
        coef_change=0.0,
        param_change=0.0,
        params=fits[0].params.as_dict(),
        change_points=_change_points(out_spec),
    )
    return ImputationResult(
        method=tag,
        pooled=pooled,
        completed=completed,
        params=fits[0].params,
        trace=(record,),
        converged=all(f.converged for f in fits),
        spec=out_spec,
        change_points=_change_points(out_spec),
        classification=cls,
    )


def method_tag(method: str, analysis: str = "ssm") -> str:
    if method in SSM_METHODS or analysis == "ssm":
        return method
    return f"{method}_lm"


def run_method(
    ds: TimeSeriesDataset, spec: ModelSpec, method: str, cfg: ImputationConfig = ImputationConfig()
) -> ImputationResult:
    if method not in METHODS:
        raise ContractError(f"unknown method '{method}', expected one of {METHODS}")
    logger.info("running %s on T=%d with %d missing outcomes", method, ds.T, ds.n_missing)
    if method == "ssmmp":
        return ssm_mp(ds, spec, cfg)
    if method == "ssmimpute":
        return ssm_impute(ds, spec, cfg)
    if method == "cc":
        if cfg.analysis == "lm":
            return complete_case_fit(ds, spec.all_invariant(), cfg, method="cc_lm")
        return complete_case_fit(ds, spec, cfg)
    return baseline_fit(ds, spec, method, cfg)
