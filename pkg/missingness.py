"""
missingness.py
Generate outcome missingness under MCAR, MAR and MNAR at a target rate, and summarize how
missing outcomes propagate into lagged regressors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Tuple

import numpy as np
from scipy.special import expit

from design import ModelSpec, TimeSeriesDataset, derive_lag_missingness, reject_unknown_keys
from dlm_core import ContractError, SSMError

logger = logging.getLogger(__name__)

MECHANISMS = ("MCAR", "MAR", "MNAR")
CALIBRATION_STEPS = 50
ALPHA_BOUND = 40.0


class CalibrationError(SSMError):
    def __init__(self, message: str, achieved_rate: float):
        super().__init__(f"{message} (achieved rate {achieved_rate:.4f})")
        self.achieved_rate = achieved_rate


@dataclass(frozen=True)
class MechanismSpec:
    """Missingness mechanism for the outcome.

    MAR drives the missing probability with standardized ``drivers`` (fully observed
    series, default: every covariate); MNAR with the outcome's own standardized value.
    """

    kind: str = "MCAR"
    target_rate: float = 0.5
    drivers: Tuple[str, ...] = ()
    gamma: float = 1.0
    seed: Optional[int] = None

    def __post_init__(self):
        kind = str(self.kind).upper()
        if kind not in MECHANISMS:
            raise ContractError(f"unknown missing mechanism '{self.kind}', expected one of {MECHANISMS}")
        object.__setattr__(self, "kind", kind)
        if not 0.0 < self.target_rate < 1.0:
            raise ContractError(f"target_rate must lie in (0, 1), got {self.target_rate}")
        object.__setattr__(self, "drivers", tuple(self.drivers))

    def to_dict(self) -> Dict[str, object]:
        return {
            "kind": self.kind,
            "target_rate": self.target_rate,
            "drivers": list(self.drivers),
            "gamma": self.gamma,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, object], where: str = "mechanism") -> "MechanismSpec":
        reject_unknown_keys(d, {"kind", "target_rate", "drivers", "gamma", "seed"}, where)
        return cls(
            kind=str(d.get("kind", "MCAR")),
            target_rate=float(d.get("target_rate", 0.5)),
            drivers=tuple(d.get("drivers", ())),
            gamma=float(d.get("gamma", 1.0)),
            seed=None if d.get("seed") is None else int(d["seed"]),
        )


def _standardize(x: np.ndarray) -> np.ndarray:
    sd = float(np.std(x))
    return (x - float(np.mean(x))) / sd if sd > 0 else np.zeros_like(x)


def _driver(ds: TimeSeriesDataset, ms: MechanismSpec) -> np.ndarray:
    if ms.kind == "MNAR":
        return _standardize(ds.y)
    names = ms.drivers or tuple(ds.covariates)
    if not names:
        raise ContractError("MAR needs at least one fully observed driver series")
    z = np.mean([_standardize(ds.series(n)) for n in names], axis=0)
    return _standardize(z)


def _calibrate(u: np.ndarray, z: np.ndarray, gamma: float, target: float) -> Tuple[np.ndarray, float]:
    """Bisection on the intercept so the empirical missing rate hits ``target``."""
    T = u.shape[0]
    tol = max(0.01, 1.0 / T)
    lo, hi = -ALPHA_BOUND, ALPHA_BOUND
    mask = u < expit(gamma * z)
    rate = float(mask.mean())
    for _ in range(CALIBRATION_STEPS):
        alpha = 0.5 * (lo + hi)
        mask = u < expit(alpha + gamma * z)
        rate = float(mask.mean())
        if abs(rate - target) <= tol:
            return mask, alpha
        if rate < target:
            lo = alpha
        else:
            hi = alpha
    raise CalibrationError(f"could not calibrate the missing rate to {target:.3f}", rate)


def apply_mechanism(ds: TimeSeriesDataset, ms: MechanismSpec) -> TimeSeriesDataset:
    """Mask outcomes of a fully observed dataset; the unmasked outcome is kept in ``y_true``."""
    if ds.n_missing:
        raise ContractError("apply_mechanism expects a fully observed outcome")
    rng = np.random.default_rng(ms.seed)
    u = rng.random(ds.T)
    if ms.kind == "MCAR":
        mask = u < ms.target_rate
    else:
        mask, alpha = _calibrate(u, _driver(ds, ms), ms.gamma, ms.target_rate)
        logger.debug("%s intercept calibrated to %.4f", ms.kind, alpha)
    y = ds.y.copy()
    y[mask] = np.nan
    logger.info("%s masked %d of %d outcomes (target %.2f)", ms.kind, int(mask.sum()), ds.T, ms.target_rate)
    return TimeSeriesDataset(
        y=y,
        exposures=ds.exposures,
        covariates=ds.covariates,
        t_index=ds.t_index,
        y_true=ds.y.copy(),
    )


@dataclass(frozen=True)
class MissingnessReport:
    outcome_missing_rate: float
    lag_missing_rate: Dict[int, float] = field(default_factory=dict)
    complete_row_rate: float = 1.0
    incomplete_rows: int = 0
    analysis_rows: int = 0

    def to_dict(self) -> Dict[str, object]:
        return {
            "outcome_missing_rate": self.outcome_missing_rate,
            "lag_missing_rate": {str(k): v for k, v in self.lag_missing_rate.items()},
            "complete_row_rate": self.complete_row_rate,
            "incomplete_row_rate": 1.0 - self.complete_row_rate,
            "incomplete_rows": self.incomplete_rows,
            "analysis_rows": self.analysis_rows,
        }


def missingness_report(ds: TimeSeriesDataset, spec: ModelSpec) -> MissingnessReport:
    """Raw outcome missing rate, per-lag induced regressor missing rate, complete-row rate.

    Rates for lagged regressors and complete rows are taken over the analysis rows, i.e.
    after the burn-in of ``spec.max_lag`` time points.
    """
    mask = ds.mask
    start = min(spec.max_lag, ds.T)
    n_rows = ds.T - start
    lag_mask = derive_lag_missingness(mask, range(1, spec.q + 1))
    lag_rates = {j: float(m[start:].mean()) if n_rows else 0.0 for j, m in lag_mask.items()}
    incomplete = mask.copy()
    for m in lag_mask.values():
        incomplete |= m
    n_incomplete = int(incomplete[start:].sum())
    return MissingnessReport(
        outcome_missing_rate=float(mask.mean()) if ds.T else 0.0,
        lag_missing_rate=lag_rates,
        complete_row_rate=1.0 - n_incomplete / n_rows if n_rows else 0.0,
        incomplete_rows=n_incomplete,
        analysis_rows=n_rows,
    )
