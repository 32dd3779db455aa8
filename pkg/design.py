"""
design.py
Translate a regression declaration (lagged outcomes, current/lagged exposures and covariates,
per-coefficient dynamics) into a StateSpace, and build the F_t rows from a dataset whose
missing outcomes may be partially filled in.

Column order of every design row is fixed:
    (1, Y_{t-1}, ..., Y_{t-q}, A_t, ..., A_{t-p} for each exposure, C_t, ..., C_{t-o} for each covariate)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from dlm_core import (
    DIFFUSE_SCALE,
    BeliefPath,
    ContractError,
    InsufficientData,
    StateSpace,
    StateSpaceTemplate,
    StructuralParams,
    fit_structural_params,
    kalman_filter,
    kalman_smoother,
)

logger = logging.getLogger(__name__)

INTERCEPT = "intercept"
OBS_VARIANCE = "V"
JUMP_FACTOR = 1e3
DYNAMICS_KINDS = ("invariant", "random_walk", "ar", "periodic_stable")


def lag_name(series: str, lag: int) -> str:
    return series if lag == 0 else f"{series}_lag{lag}"


def outcome_lag_name(lag: int) -> str:
    return f"y_lag{lag}"


def variance_name(coefficient: str) -> str:
    return f"W:{coefficient}"


# --- Dataset ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TimeSeriesDataset:
    """Aligned outcome / exposure / covariate series; NaN in ``y`` marks a missing outcome.

    ``t_index`` carries the original 1-based time labels (consecutive unless the dataset is
    a spliced complete-case timeline). ``y_true`` keeps the unmasked outcome when the
    missingness was generated, for evaluation only.
    """

    y: np.ndarray
    exposures: Dict[str, np.ndarray] = field(default_factory=dict)
    covariates: Dict[str, np.ndarray] = field(default_factory=dict)
    t_index: Optional[np.ndarray] = None
    y_true: Optional[np.ndarray] = None

    def __post_init__(self):
        y = np.array(self.y, dtype=float).reshape(-1)
        T = y.shape[0]
        object.__setattr__(self, "y", y)
        for group in ("exposures", "covariates"):
            series = {}
            for name, values in getattr(self, group).items():
                arr = np.array(values, dtype=float).reshape(-1)
                if arr.shape[0] != T:
                    raise ContractError(f"{group[:-1]} '{name}' has length {arr.shape[0]}, expected {T}")
                if not np.all(np.isfinite(arr)):
                    raise ContractError(f"{group[:-1]} '{name}' contains missing values")
                series[name] = arr
            object.__setattr__(self, group, series)
        overlap = set(self.exposures) & set(self.covariates)
        if overlap or "y" in self.exposures or "y" in self.covariates:
            raise ContractError(f"series names must be unique, clashing: {sorted(overlap) or ['y']}")
        t_index = np.arange(1, T + 1) if self.t_index is None else np.array(self.t_index, dtype=int)
        if t_index.shape != (T,):
            raise ContractError("t_index must have one entry per time point")
        object.__setattr__(self, "t_index", t_index)
        if self.y_true is not None:
            truth = np.array(self.y_true, dtype=float).reshape(-1)
            observed = np.isfinite(y)
            if truth.shape != (T,) or not np.array_equal(truth[observed], y[observed]):
                raise ContractError("y_true must agree with y at every observed position")
            object.__setattr__(self, "y_true", truth)

    @property
    def T(self) -> int:
        return int(self.y.shape[0])

    @property
    def mask(self) -> np.ndarray:
        """True where the outcome is missing."""
        return ~np.isfinite(self.y)

    @property
    def missing_times(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def n_missing(self) -> int:
        return int(self.mask.sum())

    def series(self, name: str) -> np.ndarray:
        if name in self.exposures:
            return self.exposures[name]
        if name in self.covariates:
            return self.covariates[name]
        raise ContractError(f"unknown series '{name}'")

    def with_y(self, y: np.ndarray, keep_truth: bool = True) -> "TimeSeriesDataset":
        return replace(self, y=np.array(y, dtype=float), y_true=self.y_true if keep_truth else None)

    def subset(self, rows: np.ndarray) -> "TimeSeriesDataset":
        return TimeSeriesDataset(
            y=self.y[rows],
            exposures={k: v[rows] for k, v in self.exposures.items()},
            covariates={k: v[rows] for k, v in self.covariates.items()},
            t_index=self.t_index[rows],
            y_true=None if self.y_true is None else self.y_true[rows],
        )


# --- Model declaration ----------------------------------------------------------------


@dataclass(frozen=True)
class Dynamics:
    """How one coefficient evolves over time.

    ``variance`` None means the innovation variance is estimated by maximum likelihood.
    ``learn`` marks a coefficient whose dynamics the structure-learning loop may replace.
    ``change_points`` follow the boundary convention t <= cp / cp < t: the jump enters at cp+1.
    """

    kind: str = "invariant"
    variance: Optional[float] = None
    phi: Tuple[float, ...] = ()
    change_points: Tuple[int, ...] = ()
    learn: bool = False

    def __post_init__(self):
        if self.kind not in DYNAMICS_KINDS:
            raise ContractError(f"unknown dynamics '{self.kind}', expected one of {DYNAMICS_KINDS}")
        if self.variance is not None and not self.variance > 0:
            raise ContractError(f"dynamics variance must be > 0, got {self.variance}")
        object.__setattr__(self, "phi", tuple(float(x) for x in self.phi))
        object.__setattr__(self, "change_points", tuple(int(x) for x in self.change_points))
        if self.kind == "ar":
            if len(self.phi) < 1:
                raise ContractError("ar dynamics need at least one autoregressive coefficient")
            if not ar_is_stationary(self.phi):
                raise ContractError(f"ar coefficients {self.phi} are not stationary")
        if self.kind == "periodic_stable":
            cps = self.change_points
            if any(b <= a for a, b in zip(cps, cps[1:])):
                raise ContractError(f"change points must be strictly increasing, got {cps}")

    @classmethod
    def invariant(cls, learn: bool = False) -> "Dynamics":
        return cls("invariant", learn=learn)

    @classmethod
    def random_walk(cls, variance: Optional[float] = None, learn: bool = False) -> "Dynamics":
        return cls("random_walk", variance=variance, learn=learn)

    @classmethod
    def ar(cls, phi: Sequence[float], variance: Optional[float] = None) -> "Dynamics":
        return cls("ar", variance=variance, phi=tuple(phi))

    @classmethod
    def periodic_stable(cls, change_points: Sequence[int], learn: bool = False) -> "Dynamics":
        return cls("periodic_stable", change_points=tuple(change_points), learn=learn)

    @property
    def order(self) -> int:
        return len(self.phi) if self.kind == "ar" else 0

    @property
    def estimates_variance(self) -> bool:
        return self.kind in ("random_walk", "ar") and self.variance is None

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"kind": self.kind}
        if self.kind in ("random_walk", "ar"):
            out["variance"] = self.variance
        if self.kind == "ar":
            out["phi"] = list(self.phi)
        if self.kind == "periodic_stable":
            out["change_points"] = list(self.change_points)
        if self.learn:
            out["learn"] = True
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], where: str = "dynamics") -> "Dynamics":
        reject_unknown_keys(d, {"kind", "variance", "phi", "change_points", "learn"}, where)
        if "kind" not in d:
            raise ContractError(f"{where}.kind is required")
        return cls(
            kind=str(d["kind"]),
            variance=None if d.get("variance") is None else float(d["variance"]),
            phi=tuple(d.get("phi", ())),
            change_points=tuple(d.get("change_points", ())),
            learn=bool(d.get("learn", False)),
        )


def ar_is_stationary(phi: Sequence[float]) -> bool:
    """Roots of 1 - phi_1 z - ... - phi_p z^p lie outside the unit circle."""
    p = len(phi)
    companion = np.zeros((p, p))
    companion[0, :] = phi
    if p > 1:
        companion[1:, :-1] = np.eye(p - 1)
    return bool(np.all(np.abs(np.linalg.eigvals(companion)) < 1.0))


def reject_unknown_keys(d: Mapping[str, Any], allowed: set, where: str):
    if not isinstance(d, Mapping):
        raise ContractError(f"{where} must be an object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ContractError(f"unknown key(s) at {where}: {', '.join(unknown)}")


@dataclass(frozen=True)
class ModelSpec:
    """Lag depths, series names and per-coefficient dynamics.

    Coefficients without an entry in ``dynamics`` are invariant.
    """

    q: int = 1
    p: int = 0
    o: int = 0
    exposures: Tuple[str, ...] = ()
    covariates: Tuple[str, ...] = ()
    dynamics: Tuple[Tuple[str, Dynamics], ...] = ()
    prior_scale: float = DIFFUSE_SCALE

    def __post_init__(self):
        if self.q < 1:
            raise ContractError(f"outcome lag depth q must be >= 1, got {self.q}")
        if self.p < 0 or self.o < 0:
            raise ContractError("exposure and covariate lag depths must be >= 0")
        object.__setattr__(self, "exposures", tuple(self.exposures))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        dyn = self.dynamics.items() if isinstance(self.dynamics, Mapping) else self.dynamics
        dyn = tuple((str(k), v) for k, v in dyn)
        names = set(self.coefficient_names())
        for name, _ in dyn:
            if name not in names:
                raise ContractError(f"dynamics given for unknown coefficient '{name}'")
        order = {n: i for i, n in enumerate(self.coefficient_names())}
        object.__setattr__(self, "dynamics", tuple(sorted(dyn, key=lambda kv: order[kv[0]])))
        if not self.prior_scale > 0:
            raise ContractError("prior_scale must be > 0")

    def coefficient_names(self) -> List[str]:
        names = [INTERCEPT] + [outcome_lag_name(j) for j in range(1, self.q + 1)]
        for a in self.exposures:
            names += [lag_name(a, j) for j in range(self.p + 1)]
        for c in self.covariates:
            names += [lag_name(c, j) for j in range(self.o + 1)]
        return names

    @property
    def k(self) -> int:
        """Number of regression coefficients: 1 + q + (p+1)*#exposures + (o+1)*#covariates."""
        return 1 + self.q + (self.p + 1) * len(self.exposures) + (self.o + 1) * len(self.covariates)

    @property
    def max_lag(self) -> int:
        lags = [self.q]
        if self.exposures:
            lags.append(self.p)
        if self.covariates:
            lags.append(self.o)
        return max(lags)

    def dynamics_for(self, name: str) -> Dynamics:
        return dict(self.dynamics).get(name, Dynamics())

    def with_dynamics(self, updates: Mapping[str, Dynamics]) -> "ModelSpec":
        merged = dict(self.dynamics)
        merged.update(updates)
        return replace(self, dynamics=tuple(merged.items()))

    def all_invariant(self) -> "ModelSpec":
        return replace(self, dynamics=())

    def is_all_invariant(self) -> bool:
        return all(d.kind == "invariant" for _, d in self.dynamics)

    def learnable(self) -> List[str]:
        return [n for n, d in self.dynamics if d.learn]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "q": self.q,
            "p": self.p,
            "o": self.o,
            "exposures": list(self.exposures),
            "covariates": list(self.covariates),
            "dynamics": {n: d.to_dict() for n, d in self.dynamics if d.kind != "invariant" or d.learn},
            "prior_scale": self.prior_scale,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], where: str = "model") -> "ModelSpec":
        reject_unknown_keys(d, {"q", "p", "o", "exposures", "covariates", "dynamics", "prior_scale"}, where)
        dyn_raw = d.get("dynamics", {}) or {}
        if not isinstance(dyn_raw, Mapping):
            raise ContractError(f"{where}.dynamics must be an object keyed by coefficient name")
        dynamics = {
            str(name): Dynamics.from_dict(v, f"{where}.dynamics.{name}") for name, v in dyn_raw.items()
        }
        return cls(
            q=int(d.get("q", 1)),
            p=int(d.get("p", 0)),
            o=int(d.get("o", 0)),
            exposures=tuple(d.get("exposures", ())),
            covariates=tuple(d.get("covariates", ())),
            dynamics=tuple(dynamics.items()),
            prior_scale=float(d.get("prior_scale", DIFFUSE_SCALE)),
        )


# --- Design rows ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Per-time regressor rows and their completeness flags.

    ``rows`` holds NaN where a lagged outcome is missing and was not filled, and where a lag
    reaches before the first time point. ``burn_in`` rows (the first max-lag time points)
    never enter the likelihood.
    """

    rows: np.ndarray  # (T, k)
    columns: Tuple[str, ...]
    outcome_lag_columns: Tuple[int, ...]
    incomplete: np.ndarray  # (T,) needs a missing lagged outcome that was not filled
    imputed: np.ndarray  # (T,) used at least one filled-in lagged outcome
    burn_in: np.ndarray  # (T,)
    outcome_variance: float = 1.0
    time_map: Optional[np.ndarray] = None

    @property
    def T(self) -> int:
        return int(self.rows.shape[0])

    @property
    def k(self) -> int:
        return int(self.rows.shape[1])

    @property
    def usable(self) -> np.ndarray:
        return ~self.incomplete & ~self.burn_in


def _shift(x: np.ndarray, lag: int) -> np.ndarray:
    out = np.full(x.shape[0], np.nan)
    if lag == 0:
        out[:] = x
    elif lag < x.shape[0]:
        out[lag:] = x[:-lag]
    return out


def derive_lag_missingness(mask: np.ndarray, lags: Sequence[int]) -> Dict[int, np.ndarray]:
    """Missing regressor positions induced by missing outcomes.

    Position (t, j) is missing iff t - j is a missing outcome time; returns {lag: (T,) bool}.
    """
    lags = sorted(set(int(j) for j in lags))
    if not lags or lags[0] < 1:
        raise ContractError("lags must be a nonempty set of integers >= 1")
    mask = np.asarray(mask, dtype=bool)
    out = {}
    for j in lags:
        m = np.zeros(mask.shape[0], dtype=bool)
        if j < mask.shape[0]:
            m[j:] = mask[:-j]
        out[j] = m
    return out


def _check_imputed(ds: TimeSeriesDataset, imputed_y: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if imputed_y is None:
        return None
    fill = np.array(imputed_y, dtype=float).reshape(-1)
    if fill.shape[0] != ds.T:
        raise ContractError(f"imputed_y has length {fill.shape[0]}, expected {ds.T}")
    clash = np.isfinite(fill) & ~ds.mask
    if np.any(clash):
        t = int(np.flatnonzero(clash)[0])
        raise ContractError(f"imputed_y provides a value at observed time t={t + 1}")
    return fill


def build_design(
    ds: TimeSeriesDataset, spec: ModelSpec, imputed_y: Optional[np.ndarray] = None
) -> DesignMatrix:
    """Assemble F_t rows, substituting ``imputed_y`` into missing lagged-outcome slots.

    ``imputed_y`` is a length-T array that is NaN wherever it provides nothing; giving a
    value at an observed time is a contract error.
    """
    for name in spec.exposures + spec.covariates:
        ds.series(name)
    fill = _check_imputed(ds, imputed_y)
    y_filled = ds.y.copy()
    if fill is not None:
        use = ds.mask & np.isfinite(fill)
        y_filled[use] = fill[use]
    T = ds.T
    cols: List[np.ndarray] = [np.ones(T)]
    lag_cols = []
    imputed = np.zeros(T, dtype=bool)
    lag_missing = derive_lag_missingness(ds.mask, range(1, spec.q + 1))
    for j in range(1, spec.q + 1):
        lag_cols.append(len(cols))
        col = _shift(y_filled, j)
        cols.append(col)
        imputed |= lag_missing[j] & np.isfinite(col)
    for a in spec.exposures:
        for j in range(spec.p + 1):
            cols.append(_shift(ds.series(a), j))
    for c in spec.covariates:
        for j in range(spec.o + 1):
            cols.append(_shift(ds.series(c), j))
    rows = np.column_stack(cols)
    burn_in = np.arange(T) < spec.max_lag
    incomplete = ~np.all(np.isfinite(rows), axis=1) & ~burn_in
    observed = ds.y[np.isfinite(ds.y)]
    outcome_variance = float(np.var(observed)) if observed.size > 1 else 1.0
    return DesignMatrix(
        rows=rows,
        columns=tuple(spec.coefficient_names()),
        outcome_lag_columns=tuple(lag_cols),
        incomplete=incomplete,
        imputed=imputed & ~burn_in,
        burn_in=burn_in,
        outcome_variance=outcome_variance if outcome_variance > 0 else 1.0,
    )


def design_row(dm: DesignMatrix, t: int, y_completed: np.ndarray) -> np.ndarray:
    """Row t rebuilt from one or many completed outcome series (shape (T,) or (r, T))."""
    y_completed = np.asarray(y_completed, dtype=float)
    batch = y_completed.ndim == 2
    base = np.broadcast_to(dm.rows[t], (y_completed.shape[0], dm.k) if batch else (dm.k,)).copy()
    for j, col in enumerate(dm.outcome_lag_columns, start=1):
        if t - j >= 0:
            base[..., col] = y_completed[..., t - j]
    return base


# --- Realization -------------------------------------------------------------------------


def _state_layout(spec: ModelSpec) -> Tuple[int, Dict[str, List[int]]]:
    """Design coefficients occupy states 0..k-1; AR(p') coefficients append p'-1 lag states."""
    names = spec.coefficient_names()
    extra = {}
    d = len(names)
    for n in names:
        dyn = spec.dynamics_for(n)
        if dyn.kind == "ar" and dyn.order > 1:
            extra[n] = list(range(d, d + dyn.order - 1))
            d += dyn.order - 1
    return d, extra


def state_dimension(spec: ModelSpec) -> int:
    return _state_layout(spec)[0]


def structural_names(spec: ModelSpec) -> List[str]:
    return [OBS_VARIANCE] + [
        variance_name(n) for n in spec.coefficient_names() if spec.dynamics_for(n).estimates_variance
    ]


def realize_state_space(
    spec: ModelSpec, dm: DesignMatrix, sp: StructuralParams, active: Optional[np.ndarray] = None
) -> StateSpace:
    """Map dynamics tags onto (G_t, W_t) and the design rows onto F_t.

    invariant: identity row, zero variance. random_walk: identity, W = sigma^2.
    ar: companion block with innovation sigma^2. periodic_stable: identity, zero variance
    inside periods and W = JUMP_FACTOR * outcome variance at the first time after each
    change point.
    """
    names = spec.coefficient_names()
    if tuple(names) != dm.columns:
        raise ContractError(f"design columns {dm.columns} do not match the model's {tuple(names)}")
    if OBS_VARIANCE not in sp:
        raise ContractError("structural parameters must include the observation variance 'V'")
    T = dm.T
    d, extra = _state_layout(spec)
    k = len(names)
    G = np.eye(d)
    W_const = np.zeros((d, d))
    jumps: List[Tuple[int, int]] = []
    kappa = JUMP_FACTOR * dm.outcome_variance
    for i, n in enumerate(names):
        dyn = spec.dynamics_for(n)
        sigma2 = dyn.variance
        if dyn.estimates_variance:
            key = variance_name(n)
            if key not in sp:
                raise ContractError(f"structural parameters are missing '{key}'")
            sigma2 = sp[key]
        if dyn.kind == "random_walk":
            W_const[i, i] = sigma2
        elif dyn.kind == "ar":
            lags = [i] + extra.get(n, [])
            G[i, i] = 0.0
            for lag_idx, phi in zip(lags, dyn.phi):
                G[i, lag_idx] = phi
            for a, b in zip(lags[1:], lags[:-1]):
                G[a, :] = 0.0
                G[a, b] = 1.0
            W_const[i, i] = sigma2
        elif dyn.kind == "periodic_stable":
            for cp in dyn.change_points:
                if not 1 < cp < T:
                    raise ContractError(f"change point {cp} for '{n}' lies outside (1, {T})")
                jumps.append((cp, i))
    if jumps or not np.any(W_const):
        W = np.broadcast_to(W_const, (T, d, d)).copy()
        for cp, i in jumps:
            W[cp, i, i] += kappa
    else:
        W = W_const
    usable = dm.usable if active is None else (np.asarray(active, dtype=bool) & dm.usable)
    F = np.zeros((T, d))
    F[:, :k] = np.where(np.isfinite(dm.rows), dm.rows, 0.0)
    G_arg = None if np.array_equal(G, np.eye(d)) else G
    return StateSpace.build(
        F=F,
        V=sp[OBS_VARIANCE],
        G=G_arg,
        W=W,
        m0=np.zeros(d),
        C0=spec.prior_scale * np.eye(d),
        active=usable,
    )


def structural_template(
    spec: ModelSpec,
    dm: DesignMatrix,
    initial: Optional[StructuralParams] = None,
    active: Optional[np.ndarray] = None,
) -> StateSpaceTemplate:
    """Template whose free parameters are V and every variance the model leaves unset."""
    names = structural_names(spec)
    scale = dm.outcome_variance
    start = {OBS_VARIANCE: 0.5 * scale}
    for n in names[1:]:
        start[n] = 1e-2 * scale
    if initial is not None:
        for n in names:
            if n in initial:
                start[n] = initial[n]
    params = StructuralParams.from_values({n: start[n] for n in names})
    return StateSpaceTemplate(
        params=params,
        build=lambda p: realize_state_space(spec, dm, p, active=active),
        free=tuple(names),
    )


# --- Fitting ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ModelFit:
    """One fitted state space model: parameters, filtered and smoothed beliefs."""

    spec: ModelSpec
    design: DesignMatrix
    state_space: StateSpace
    params: StructuralParams
    filtered: BeliefPath
    smoothed: BeliefPath
    use_smoothed: bool = True

    @property
    def loglik(self) -> float:
        return self.filtered.loglik

    @property
    def path(self) -> BeliefPath:
        return self.smoothed if self.use_smoothed else self.filtered

    @property
    def coef_mean(self) -> np.ndarray:
        return self.path.means[:, : self.design.k]

    @property
    def coef_var(self) -> np.ndarray:
        return np.diagonal(self.path.covs, axis1=1, axis2=2)[:, : self.design.k]

    @property
    def obs_variance(self) -> float:
        return self.params[OBS_VARIANCE]

    @property
    def converged(self) -> bool:
        return self.params.converged


def fit_model(
    ds: TimeSeriesDataset,
    dm: DesignMatrix,
    spec: ModelSpec,
    params: Optional[StructuralParams] = None,
    estimate: bool = True,
    restarts: int = 3,
    use_smoothed: bool = True,
) -> ModelFit:
    """Fit the realized model to the observed outcomes of ``ds``.

    Only observed outcomes drive the likelihood; filled-in values reach the model only
    through the lagged-outcome slots of ``dm``. With ``estimate=False`` the structural
    parameters in ``params`` are used as they are.
    """
    template = structural_template(spec, dm, initial=params)
    if estimate:
        fitted = fit_structural_params(template, ds.y, restarts=restarts)
    else:
        if params is None:
            raise ContractError("params are required when estimate=False")
        fitted = template.params
    ss = realize_state_space(spec, dm, fitted)
    if not np.any(np.isfinite(ds.y) & ss.active):
        raise InsufficientData("no observed outcome falls on a usable design row")
    filtered = kalman_filter(ss, ds.y)
    smoothed = kalman_smoother(ss, filtered)
    if not estimate:
        fitted = replace(fitted, loglik=filtered.loglik)
    return ModelFit(
        spec=spec,
        design=dm,
        state_space=ss,
        params=fitted,
        filtered=filtered,
        smoothed=smoothed,
        use_smoothed=use_smoothed,
    )


# --- Complete-case splicing ---------------------------------------------------------------


def splice_complete_cases(
    ds: TimeSeriesDataset, dm: DesignMatrix, state_dim: Optional[int] = None
) -> Tuple[TimeSeriesDataset, DesignMatrix]:
    """Drop rows with a missing outcome or an incomplete design row and re-index survivors.

    Survivors keep their original design rows (the lag values of the original timeline) and
    are laid end to end on a new timeline; the returned dataset's ``t_index`` and the design's
    ``time_map`` record the original 1-based times.
    At least ``state_dim + 5`` usable rows must survive; ``state_dim`` defaults to the number
    of design columns, which is the state dimension unless an AR coefficient adds lag states.
    """
    if dm.T != ds.T:
        raise ContractError("dataset and design matrix lengths differ")
    keep = ~ds.mask & ~dm.incomplete
    rows = np.flatnonzero(keep)
    n_usable = int(np.sum(keep & ~dm.burn_in))
    need = (dm.k if state_dim is None else state_dim) + 5
    if n_usable < need:
        raise InsufficientData(f"complete-case analysis keeps {n_usable} usable rows, need at least {need}")
    spliced = ds.subset(rows)
    spliced_dm = replace(
        dm,
        rows=dm.rows[rows],
        incomplete=dm.incomplete[rows],
        imputed=dm.imputed[rows],
        burn_in=dm.burn_in[rows],
        time_map=ds.t_index[rows].copy(),
    )
    logger.debug("spliced %d of %d rows onto a compressed timeline", rows.size, ds.T)
    return spliced, spliced_dm


def map_change_points_to_spliced(time_map: np.ndarray, change_points: Sequence[int]) -> Tuple[int, ...]:
    """Original-time change points expressed on a spliced timeline (count of survivors <= cp)."""
    out = []
    for cp in change_points:
        c = int(np.searchsorted(time_map, cp, side="right"))
        if 1 < c < len(time_map) and (not out or c > out[-1]):
            out.append(c)
    return tuple(out)


def map_change_points_to_original(time_map: np.ndarray, change_points: Sequence[int]) -> Tuple[int, ...]:
    """Spliced-timeline change points back in original time (last survivor before the jump)."""
    return tuple(int(time_map[cp - 1]) for cp in change_points if 1 <= cp <= len(time_map))


def expand_to_original(values: np.ndarray, time_map: np.ndarray, T: int) -> np.ndarray:
    """Carry spliced-timeline values onto original times 1..T (last survivor at or before t)."""
    idx = np.searchsorted(time_map, np.arange(1, T + 1), side="right") - 1
    idx = np.clip(idx, 0, len(time_map) - 1)
    return values[idx]
