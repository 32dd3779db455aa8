"""
structure.py
Learn coefficient dynamics from smoothed trajectories: binary segmentation for change points,
a classifier that turns a random-walk trajectory into a verdict (invariant, periodic-stable,
random walk, optionally AR), the one-step-prediction score used to rank candidate models, and
the refit loop that applies verdicts until they stop changing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from design import DesignMatrix, Dynamics, ModelFit, ModelSpec, TimeSeriesDataset, fit_model
from dlm_core import StateSpace, StructuralParams, kalman_filter

logger = logging.getLogger(__name__)

MIN_SEGMENT = 30
SPLIT_THRESHOLD = 3.0
INVARIANCE_RATIO = 2.0
MAX_ROUNDS = 5


@dataclass(frozen=True)
class StructureThresholds:
    min_seg: int = MIN_SEGMENT
    split_threshold: float = SPLIT_THRESHOLD
    invariance_ratio: float = INVARIANCE_RATIO
    allow_ar: bool = False


@dataclass(frozen=True)
class DynamicsClassification:
    """Per-coefficient verdicts and the statistics that produced them."""

    verdicts: Dict[str, Dynamics] = field(default_factory=dict)
    evidence: Dict[str, Dict[str, object]] = field(default_factory=dict)

    def change_points(self) -> Dict[str, Tuple[int, ...]]:
        return {n: d.change_points for n, d in self.verdicts.items() if d.kind == "periodic_stable"}


# --- Change points ---------------------------------------------------------------------


def _window_stat(mean: np.ndarray, var: np.ndarray, lo: int, hi: int, width: int) -> Tuple[int, float]:
    """Best split in [lo, hi): standardized difference of flanking-window means.

    Window width is ``width`` clipped to the segment; the standardizer is the root of the
    average posterior variance over both windows.
    """
    best_tau, best_stat = -1, 0.0
    c_mean = np.concatenate(([0.0], np.cumsum(mean[lo:hi])))
    c_var = np.concatenate(([0.0], np.cumsum(var[lo:hi])))
    n = hi - lo
    scale = max(1.0, float(np.max(np.abs(mean[lo:hi]))))
    for rel in range(width, n - width + 1):
        left = (c_mean[rel] - c_mean[rel - width]) / width
        right = (c_mean[rel + width] - c_mean[rel]) / width
        diff = abs(right - left)
        if diff <= 1e-12 * scale:
            continue
        pooled_var = (c_var[rel + width] - c_var[rel - width]) / (2 * width)
        stat = diff / np.sqrt(pooled_var) if pooled_var > 0 else np.inf
        if stat > best_stat:
            best_tau, best_stat = lo + rel, stat
    return best_tau, best_stat


def detect_change_points(
    mean: Sequence[float],
    var: Sequence[float],
    min_seg: int = MIN_SEGMENT,
    threshold: float = SPLIT_THRESHOLD,
) -> List[int]:
    """Binary segmentation on a smoothed coefficient path.

    A change point ``cp`` means the level changes between t=cp and t=cp+1 (1-based), the
    same convention as periodic-stable dynamics. Splits are accepted when the standardized
    jump exceeds ``threshold``; no segment gets shorter than ``min_seg``.
    """
    mean = np.asarray(mean, dtype=float)
    var = np.clip(np.asarray(var, dtype=float), 0.0, None)
    if mean.shape != var.shape:
        raise ValueError("mean and variance paths differ in length")
    found: List[int] = []
    stack = [(0, mean.shape[0])]
    while stack:
        lo, hi = stack.pop()
        if hi - lo < 2 * min_seg:
            continue
        tau, stat = _window_stat(mean, var, lo, hi, min_seg)
        if tau < 0 or stat <= threshold:
            continue
        found.append(tau)
        stack.append((lo, tau))
        stack.append((tau, hi))
    return sorted(found)


# --- Classification --------------------------------------------------------------------


def classify_path(
    mean: Sequence[float],
    var: Sequence[float],
    thresholds: StructureThresholds = StructureThresholds(),
) -> Tuple[Dynamics, Dict[str, object]]:
    mean = np.asarray(mean, dtype=float)
    var = np.clip(np.asarray(var, dtype=float), 0.0, None)
    sd = np.sqrt(var)
    scale = max(1.0, float(np.max(np.abs(mean)))) * 1e-12
    variation = float(np.std(mean))
    avg_sd = float(np.mean(sd))
    cps = detect_change_points(mean, var, thresholds.min_seg, thresholds.split_threshold)
    evidence: Dict[str, object] = {
        "variation": variation,
        "mean_sd": avg_sd,
        "ratio": variation / avg_sd if avg_sd > 0 else float("inf") if variation > scale else 0.0,
        "change_points": list(cps),
    }
    if not cps and variation <= thresholds.invariance_ratio * avg_sd + scale:
        return Dynamics.invariant(learn=True), evidence
    if cps:
        bounds = [0] + cps + [mean.shape[0]]
        # a smoothed random walk smears each jump over its neighbours; judge the treads only
        margin = max(1, thresholds.min_seg // 3)
        ratios = []
        for i, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
            lo = a + margin if i > 0 else a
            hi = b - margin if i < len(cps) else b
            if hi - lo < 2:
                lo, hi = a, b
            seg_sd = float(np.mean(sd[lo:hi]))
            seg_var = float(np.std(mean[lo:hi]))
            ratios.append(seg_var / seg_sd if seg_sd > 0 else (0.0 if seg_var <= scale else np.inf))
        evidence["within_ratio"] = float(max(ratios))
        if max(ratios) <= thresholds.invariance_ratio:
            return Dynamics.periodic_stable(cps, learn=True), evidence
    elif thresholds.allow_ar:
        dev = mean - mean.mean()
        denom = float(np.dot(dev, dev))
        acf1 = float(np.dot(dev[1:], dev[:-1]) / denom) if denom > 0 else 0.0
        evidence["acf1"] = acf1
        if 0.0 < acf1 < 0.95:
            return Dynamics(kind="ar", phi=(acf1,), learn=True), evidence
    return Dynamics.random_walk(learn=True), evidence


def classify_dynamics(
    paths: Mapping[str, Tuple[Sequence[float], Sequence[float]]],
    min_seg: int = MIN_SEGMENT,
    thresholds: Optional[StructureThresholds] = None,
) -> DynamicsClassification:
    """Classify each ``name -> (smoothed mean path, posterior variance path)``.

    Intended for paths estimated under random-walk dynamics: a flat path is invariant, a
    staircase with flat treads is periodic-stable, anything else stays a random walk.
    """
    thresholds = thresholds or StructureThresholds(min_seg=min_seg)
    verdicts, evidence = {}, {}
    for name, (mean, var) in paths.items():
        verdicts[name], evidence[name] = classify_path(mean, var, thresholds)
    return DynamicsClassification(verdicts=verdicts, evidence=evidence)


# --- Model ranking -----------------------------------------------------------------------


def one_step_prediction_score(ss: StateSpace, y) -> float:
    """Sum of squared one-step prediction errors (y_t - F_t G_t m_{t-1})^2 over observed rows."""
    fp = kalman_filter(ss, y)
    e = fp.innovations
    return float(np.sum(e[np.isfinite(e)] ** 2))


# --- Structure learning loop ---------------------------------------------------------------


def as_random_walks(spec: ModelSpec) -> ModelSpec:
    """Every learnable coefficient as a random walk; a random walk with a fixed variance stays."""
    updates = {
        n: Dynamics.random_walk(learn=True)
        for n in spec.learnable()
        if spec.dynamics_for(n).kind != "random_walk"
    }
    return spec.with_dynamics(updates) if updates else spec


def _paths(fit: ModelFit, names: Sequence[str]) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    cols = {n: i for i, n in enumerate(fit.design.columns)}
    return {n: (fit.coef_mean[:, cols[n]], fit.coef_var[:, cols[n]]) for n in names}


def _apply_verdicts(spec: ModelSpec, verdicts: Mapping[str, Dynamics]) -> ModelSpec:
    updates = {}
    for n, verdict in verdicts.items():
        # a random-walk verdict keeps the declared variance
        if verdict.kind == "random_walk" and spec.dynamics_for(n).kind == "random_walk":
            continue
        updates[n] = verdict
    return spec.with_dynamics(updates) if updates else spec


def learn_structure(
    ds: TimeSeriesDataset,
    dm: DesignMatrix,
    spec: ModelSpec,
    thresholds: StructureThresholds = StructureThresholds(),
    params: Optional[StructuralParams] = None,
    restarts: int = 3,
    max_rounds: int = MAX_ROUNDS,
    use_smoothed: bool = True,
) -> Tuple[ModelFit, ModelSpec, DynamicsClassification]:
    """Fit with every learnable coefficient as a random walk, classify, refit under the verdicts.

    Earlier verdicts never carry over: whatever ``spec`` says about a learnable coefficient,
    it is re-examined from a random-walk fit. Coefficients still judged random walks are then
    re-examined on the fit under the other verdicts, round after round, until nothing changes.
    Returns the fit under the learned dynamics, the learned model and the verdicts.
    """
    names = spec.learnable()
    if not names:
        fit = fit_model(ds, dm, spec, params=params, restarts=restarts, use_smoothed=use_smoothed)
        return fit, spec, DynamicsClassification()
    rw_spec = as_random_walks(spec)
    fit = fit_model(ds, dm, rw_spec, params=params, restarts=restarts, use_smoothed=use_smoothed)
    first = classify_dynamics(_paths(fit, names), thresholds=thresholds)
    verdicts, evidence = dict(first.verdicts), dict(first.evidence)
    learned = _apply_verdicts(rw_spec, verdicts)
    for round_no in range(1, max_rounds + 1):
        if learned == fit.spec:
            break
        logger.debug(
            "structure round %d: %s",
            round_no,
            {n: d.to_dict() for n, d in learned.dynamics if fit.spec.dynamics_for(n) != d},
        )
        fit = fit_model(ds, dm, learned, params=fit.params, restarts=1, use_smoothed=use_smoothed)
        open_names = [n for n in names if learned.dynamics_for(n).kind == "random_walk"]
        if not open_names:
            break
        again = classify_dynamics(_paths(fit, open_names), thresholds=thresholds)
        updates = {n: v for n, v in again.verdicts.items() if v.kind != "random_walk"}
        for n in updates:
            verdicts[n], evidence[n] = updates[n], again.evidence[n]
        learned = _apply_verdicts(learned, updates)
    else:
        logger.warning("structure learning did not settle after %d rounds", max_rounds)
    if fit.spec != learned:
        fit = fit_model(ds, dm, learned, params=fit.params, restarts=1, use_smoothed=use_smoothed)
    return fit, learned, DynamicsClassification(verdicts=verdicts, evidence=evidence)
