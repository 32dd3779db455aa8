"""
dlm_core.py
Linear Gaussian state space model with a scalar outcome: representation, Kalman filter and
smoother that skip missing outcomes, innovation log-likelihood, maximum-likelihood estimation
of the structural variances, and posterior state draws.

    y_t     = F_t theta_t + v_t,            v_t ~ N(0, V_t)
    theta_t = G_t theta_{t-1} + w_t,        w_t ~ N(0, W_t),   theta_0 ~ N(m0, C0)

Arrays are indexed from 0 internally; time t=1 of the model is row 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterable, Mapping, Optional, Tuple, Union

import numpy as np
from scipy.optimize import minimize

logger = logging.getLogger(__name__)

DIFFUSE_SCALE = 1e4
PSD_TOLERANCE = 1e-8
COND_WARN = 1e12
LOG_PARAM_BOUND = 30.0
_LOG_2PI = float(np.log(2.0 * np.pi))

SeedLike = Union[None, int, np.random.Generator]


# --- Errors -------------------------------------------------------------------


class SSMError(Exception):
    """Base class for every error raised by the engine."""


class ContractError(SSMError, ValueError):
    """A precondition or dimension contract was violated by the caller."""


class NumericalFailure(SSMError):
    """A covariance lost positive semi-definiteness during a recursion."""

    def __init__(self, message: str, t: Optional[int] = None):
        super().__init__(message if t is None else f"{message} (t={t})")
        self.t = t


class ModelDegeneracy(SSMError):
    """The one-step predictive variance Q_t is not strictly positive."""

    def __init__(self, message: str, t: Optional[int] = None):
        super().__init__(message if t is None else f"{message} (t={t})")
        self.t = t


class InsufficientData(SSMError):
    """Too few observed outcomes or surviving rows to estimate the model."""


def as_generator(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _min_eigenvalues(mats: np.ndarray) -> np.ndarray:
    return np.linalg.eigvalsh(_symmetrize(mats))[..., 0]


# --- Representation -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StateSpace:
    """Realized time-varying system (G_t, W_t, F_t, V_t, m0, C0) over T time points.

    ``active`` marks the rows whose outcome may update the state; inactive rows (burn-in,
    rows with unfilled lagged outcomes) are treated exactly like missing outcomes.
    """

    G: np.ndarray  # (T, d, d)
    W: np.ndarray  # (T, d, d)
    F: np.ndarray  # (T, d)
    V: np.ndarray  # (T,)
    m0: np.ndarray  # (d,)
    C0: np.ndarray  # (d, d)
    active: np.ndarray  # (T,) bool
    identity_G: bool = field(default=False)

    @property
    def T(self) -> int:
        return int(self.F.shape[0])

    @property
    def d(self) -> int:
        return int(self.F.shape[1])

    @property
    def n(self) -> int:
        return 1

    @classmethod
    def build(
        cls,
        F: np.ndarray,
        V: Union[float, np.ndarray],
        G: Optional[np.ndarray] = None,
        W: Optional[np.ndarray] = None,
        m0: Optional[np.ndarray] = None,
        C0: Optional[np.ndarray] = None,
        active: Optional[np.ndarray] = None,
    ) -> "StateSpace":
        """Broadcast time-constant pieces over T and validate the result.

        ``G`` and ``W`` may be (d, d) or (T, d, d); ``V`` a scalar or (T,). Missing ``G``
        means identity, missing ``W`` means zero, missing prior means the diffuse default
        N(0, 1e4 I).
        """
        F = np.atleast_2d(np.asarray(F, dtype=float))
        if F.ndim != 2:
            raise ContractError(f"F must be (T, d), got shape {F.shape}")
        T, d = F.shape
        eye = np.eye(d)
        if G is None:
            G_arr = np.broadcast_to(eye, (T, d, d))
            identity_G = True
        else:
            G_arr = np.asarray(G, dtype=float)
            if G_arr.ndim == 2:
                G_arr = np.broadcast_to(G_arr, (T, d, d))
            identity_G = bool(np.array_equal(G_arr, np.broadcast_to(eye, G_arr.shape)))
        if W is None:
            W_arr = np.zeros((T, d, d))
        else:
            W_arr = np.asarray(W, dtype=float)
            if W_arr.ndim == 2:
                W_arr = np.broadcast_to(W_arr, (T, d, d))
        V_arr = np.broadcast_to(np.asarray(V, dtype=float), (T,))
        m0_arr = np.zeros(d) if m0 is None else np.asarray(m0, dtype=float).reshape(-1)
        C0_arr = DIFFUSE_SCALE * eye if C0 is None else np.asarray(C0, dtype=float)
        act = np.ones(T, dtype=bool) if active is None else np.asarray(active, dtype=bool)
        return cls(
            G=np.array(G_arr, dtype=float),
            W=np.array(W_arr, dtype=float),
            F=np.array(F, dtype=float),
            V=np.array(V_arr, dtype=float),
            m0=np.array(m0_arr, dtype=float),
            C0=np.array(C0_arr, dtype=float),
            active=np.array(act, dtype=bool),
            identity_G=identity_G,
        )

    def __post_init__(self):
        T, d = self.F.shape
        if self.G.shape != (T, d, d) or self.W.shape != (T, d, d):
            raise ContractError(
                f"G{self.G.shape} and W{self.W.shape} must both be {(T, d, d)} to match F"
            )
        if self.V.shape != (T,) or self.active.shape != (T,):
            raise ContractError(f"V{self.V.shape} and active{self.active.shape} must be ({T},)")
        if self.m0.shape != (d,) or self.C0.shape != (d, d):
            raise ContractError(f"prior shapes m0{self.m0.shape}, C0{self.C0.shape} do not match d={d}")
        if not np.all(np.isfinite(self.F[self.active])):
            bad = int(np.flatnonzero(~np.all(np.isfinite(self.F), axis=1) & self.active)[0])
            raise ContractError(f"F has missing entries on an active row (t={bad + 1})")
        if not np.all(self.V > 0) or not np.all(np.isfinite(self.V)):
            raise ContractError("V_t must be finite and strictly positive for every t")
        if not np.allclose(self.W, np.swapaxes(self.W, 1, 2)) or not np.allclose(self.C0, self.C0.T):
            raise ContractError("W_t and C0 must be symmetric")
        scale = max(1.0, float(np.max(np.abs(self.C0))))
        if _min_eigenvalues(self.C0) < -PSD_TOLERANCE * scale:
            raise ContractError("C0 is not positive semi-definite")
        if np.any(self.W):
            wmin = _min_eigenvalues(self.W)
            if np.any(wmin < -PSD_TOLERANCE * max(1.0, float(np.max(np.abs(self.W))))):
                t = int(np.argmin(wmin))
                raise ContractError(f"W_t is not positive semi-definite (t={t + 1})")
        for name in ("G", "W", "F", "V", "m0", "C0", "active"):
            _readonly(getattr(self, name))


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True, eq=False)
class BeliefPath:
    """Per-time posterior beliefs plus the prediction-step quantities R_t and Q_t.

    ``innovations`` hold e_t at observed rows and NaN elsewhere. ``smoothed`` tells whether
    means/covs are filtered (y_{1:t}) or smoothed (y_{1:T}) moments.
    """

    means: np.ndarray  # (T, d)
    covs: np.ndarray  # (T, d, d)
    predicted_means: np.ndarray  # (T, d)
    R: np.ndarray  # (T, d, d)
    Q: np.ndarray  # (T,)
    innovations: np.ndarray  # (T,)
    loglik: float
    n_observed: int
    smoothed: bool = False

    def __len__(self) -> int:
        return int(self.means.shape[0])

    @property
    def beliefs(self) -> Tuple[GaussianBelief, ...]:
        return tuple(GaussianBelief(self.means[t], self.covs[t]) for t in range(len(self)))

    @property
    def variances(self) -> np.ndarray:
        return np.diagonal(self.covs, axis1=1, axis2=2).copy()


def outcome_array(y, T: Optional[int] = None) -> np.ndarray:
    """Return the outcome as a float array with NaN at missing positions.

    Accepts a plain sequence (None/NaN = missing), a numpy masked array, or a
    ``(values, mask)`` pair where mask is True at missing positions.
    """
    if isinstance(y, tuple) and len(y) == 2:
        values, mask = y
        arr = np.array(values, dtype=float)
        arr[np.asarray(mask, dtype=bool)] = np.nan
    elif isinstance(y, np.ma.MaskedArray):
        arr = y.astype(float).filled(np.nan)
    else:
        arr = np.array([np.nan if v is None else v for v in y], dtype=float) if isinstance(
            y, (list, tuple)
        ) else np.array(y, dtype=float)
    arr = arr.reshape(-1)
    if T is not None and arr.shape[0] != T:
        raise ContractError(f"outcome length {arr.shape[0]} does not match T={T}")
    return arr


# --- Filtering and smoothing -------------------------------------------------------


def kalman_filter(ss: StateSpace, y) -> BeliefPath:
    """Forward recursion; rows with a missing or inactive outcome take the zero-gain branch.

    Observed rows: R = G C G' + W, Q = F R F' + V, m = G m + R F' (y - F G m) / Q,
    C = R - R F' F R / Q. Missing rows: (m, C) = (G m, R) and nothing is added to loglik.
    """
    y = outcome_array(y, ss.T)
    T, d = ss.T, ss.d
    means = np.empty((T, d))
    covs = np.empty((T, d, d))
    a_all = np.empty((T, d))
    R_all = np.empty((T, d, d))
    Q_all = np.empty(T)
    e_all = np.full(T, np.nan)
    m = ss.m0.copy()
    C = ss.C0.copy()
    loglik = 0.0
    n_obs = 0
    for t in range(T):
        if ss.identity_G:
            a = m
            R = C + ss.W[t]
        else:
            G = ss.G[t]
            a = G @ m
            R = G @ C @ G.T + ss.W[t]
        R = 0.5 * (R + R.T)
        F = ss.F[t]
        observed = bool(ss.active[t]) and np.isfinite(y[t])
        if observed:
            RF = R @ F
            Q = float(F @ RF) + float(ss.V[t])
            if not Q > 0.0 or not np.isfinite(Q):
                raise ModelDegeneracy(f"non-positive predictive variance Q={Q!r}", t + 1)
            e = float(y[t] - F @ a)
            K = RF / Q
            m = a + K * e
            C = R - np.outer(K, RF)
            C = 0.5 * (C + C.T)
            loglik += -0.5 * (_LOG_2PI + np.log(Q) + e * e / Q)
            e_all[t] = e
            n_obs += 1
        else:
            Q = float(F @ R @ F) + float(ss.V[t]) if np.all(np.isfinite(F)) else np.nan
            m = a
            C = R
        if np.any(np.diagonal(C) < -PSD_TOLERANCE * max(1.0, float(np.max(np.abs(C))))):
            raise NumericalFailure("filtered covariance lost positive semi-definiteness", t + 1)
        means[t] = m
        covs[t] = C
        a_all[t] = a
        R_all[t] = R
        Q_all[t] = Q
    _check_path_psd(covs, "filtered")
    return BeliefPath(
        means=means,
        covs=covs,
        predicted_means=a_all,
        R=R_all,
        Q=Q_all,
        innovations=e_all,
        loglik=float(loglik),
        n_observed=n_obs,
        smoothed=False,
    )


def _check_path_psd(covs: np.ndarray, label: str):
    scale = np.maximum(1.0, np.max(np.abs(covs), axis=(1, 2)))
    mins = _min_eigenvalues(covs)
    bad = np.flatnonzero(mins < -PSD_TOLERANCE * scale)
    if bad.size:
        raise NumericalFailure(f"{label} covariance is not positive semi-definite", int(bad[0]) + 1)


def _solve_symmetric(R: np.ndarray, B: np.ndarray, t: int) -> np.ndarray:
    """Return R^{-1} B, falling back to the pseudo-inverse when R is ill-conditioned."""
    cond = np.linalg.cond(R)
    if not np.isfinite(cond) or cond > COND_WARN:
        logger.warning("R_t is singular or ill-conditioned (cond=%.3g) at t=%d; using pinv", cond, t)
        return np.linalg.pinv(R, hermitian=True) @ B
    return np.linalg.solve(R, B)


def kalman_smoother(ss: StateSpace, fp: BeliefPath) -> BeliefPath:
    """Backward (RTS) recursion started from (s_T, S_T) = (m_T, C_T)."""
    if fp.smoothed:
        raise ContractError("kalman_smoother expects a filtered BeliefPath")
    if fp.means.shape != (ss.T, ss.d):
        raise ContractError(
            f"filtered path shape {fp.means.shape} does not match state space ({ss.T}, {ss.d})"
        )
    T = ss.T
    s_all = np.empty_like(fp.means)
    S_all = np.empty_like(fp.covs)
    s_all[-1] = fp.means[-1]
    S_all[-1] = fp.covs[-1]
    for t in range(T - 2, -1, -1):
        m = fp.means[t]
        C = fp.covs[t]
        R1 = fp.R[t + 1]
        G1 = np.eye(ss.d) if ss.identity_G else ss.G[t + 1]
        # J = C G' R^{-1}
        J = _solve_symmetric(R1, G1 @ C, t + 1).T
        s = m + J @ (s_all[t + 1] - fp.predicted_means[t + 1])
        S = C + J @ (S_all[t + 1] - R1) @ J.T
        s_all[t] = s
        S_all[t] = 0.5 * (S + S.T)
    _check_path_psd(S_all, "smoothed")
    return replace(fp, means=s_all, covs=S_all, smoothed=True)


def log_likelihood(ss: StateSpace, y) -> float:
    return kalman_filter(ss, y).loglik


# --- Structural parameters ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StructuralParams:
    """Named positive scalars entering W_t and V_t, stored as logs.

    ``loglik`` and ``converged`` are filled in by :func:`fit_structural_params`.
    """

    names: Tuple[str, ...]
    log_values: np.ndarray
    loglik: float = float("nan")
    converged: bool = True
    evaluations: int = 0

    def __post_init__(self):
        if len(self.names) != len(self.log_values):
            raise ContractError("StructuralParams names and values differ in length")
        object.__setattr__(self, "log_values", np.array(self.log_values, dtype=float))
        values = np.exp(self.log_values)
        if not np.all(np.isfinite(values)) or not np.all(values > 0):
            raise ContractError("structural parameters must be strictly positive and finite")
        _readonly(self.log_values)

    @classmethod
    def from_values(cls, values: Mapping[str, float]) -> "StructuralParams":
        names = tuple(values)
        vals = np.array([float(values[k]) for k in names], dtype=float)
        if np.any(vals <= 0):
            raise ContractError(f"structural parameters must be > 0, got {dict(values)}")
        return cls(names=names, log_values=np.log(vals))

    @property
    def values(self) -> np.ndarray:
        return np.exp(self.log_values)

    def as_dict(self) -> Dict[str, float]:
        return {k: float(v) for k, v in zip(self.names, self.values)}

    def __getitem__(self, name: str) -> float:
        return float(np.exp(self.log_values[self.names.index(name)]))

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def with_log_values(self, log_values: Iterable[float], **kw) -> "StructuralParams":
        return replace(self, log_values=np.array(list(log_values), dtype=float), **kw)


@dataclass(frozen=True)
class StateSpaceTemplate:
    """A StateSpace parameterized by StructuralParams.

    ``build`` writes each parameter into its cells of W_t / V_t. Only names in ``free`` are
    optimized; the rest stay at their value in ``params``.
    """

    params: StructuralParams
    build: Callable[[StructuralParams], StateSpace]
    free: Tuple[str, ...] = ()

    def free_names(self) -> Tuple[str, ...]:
        return self.free if self.free else self.params.names


def _count_observed(ss: StateSpace, y: np.ndarray) -> int:
    return int(np.sum(np.isfinite(y) & ss.active))


def fit_structural_params(
    template: StateSpaceTemplate,
    y,
    restarts: int = 3,
    spread: float = 2.0,
    max_evaluations: int = 2000,
    xatol: float = 1e-6,
    min_observed: int = 10,
) -> StructuralParams:
    """Maximize the innovation log-likelihood over the free log-parameters.

    Nelder-Mead from ``restarts`` spread starting points (initial, initial - spread,
    initial + spread, ...). The best run wins; ``converged`` is False when that run hit
    the evaluation cap.
    """
    base = template.params
    ss0 = template.build(base)
    yv = outcome_array(y, ss0.T)
    if not np.any(np.isfinite(yv)):
        raise ContractError("cannot fit structural parameters: every outcome is missing")
    n_obs = _count_observed(ss0, yv)
    if n_obs < min_observed:
        raise InsufficientData(
            f"need at least {min_observed} observed outcomes to fit the model, have {n_obs}"
        )
    free = template.free_names()
    idx = [base.names.index(k) for k in free]
    if not idx:
        ll = kalman_filter(ss0, yv).loglik
        return replace(base, loglik=ll, converged=True, evaluations=1)

    x_base = np.array(base.log_values, dtype=float)

    def unpack(x: np.ndarray) -> StructuralParams:
        full = x_base.copy()
        full[idx] = np.clip(x, -LOG_PARAM_BOUND, LOG_PARAM_BOUND)
        return base.with_log_values(full)

    def objective(x: np.ndarray) -> float:
        try:
            return -kalman_filter(template.build(unpack(x)), yv).loglik
        except SSMError:
            return np.inf

    x0 = x_base[idx]
    offsets = [0.0]
    k = 1
    while len(offsets) < max(1, restarts):
        offsets.append(-spread * k)
        if len(offsets) < restarts:
            offsets.append(spread * k)
        k += 1

    best = None
    total_evals = 0
    for off in offsets:
        res = minimize(
            objective,
            x0 + off,
            method="Nelder-Mead",
            options={"xatol": xatol, "fatol": 1e-9, "maxfev": max_evaluations, "maxiter": max_evaluations},
        )
        total_evals += int(res.nfev)
        logger.debug("restart from %s: -loglik=%.6f nfev=%d success=%s", x0 + off, res.fun, res.nfev, res.success)
        if best is None or (np.isfinite(res.fun) and res.fun < best.fun):
            best = res
    if best is None or not np.isfinite(best.fun):
        raise NumericalFailure("likelihood could not be evaluated at any starting point")
    converged = bool(best.success)
    if not converged:
        logger.warning("structural parameter search did not converge: %s", best.message)
    return replace(unpack(best.x), loglik=float(-best.fun), converged=converged, evaluations=total_evals)


# --- Posterior draws -------------------------------------------------------------------


def draw_states(bp: BeliefPath, count: int, seed: SeedLike = None) -> np.ndarray:
    """Draw ``count`` state paths, theta_t ~ N(mean_t, cov_t) independently per t.

    Returns an array of shape (count, T, d). Negative eigenvalues are clipped at 0.
    """
    if count < 1:
        raise ContractError(f"count must be >= 1, got {count}")
    rng = as_generator(seed)
    vals, vecs = np.linalg.eigh(_symmetrize(bp.covs))
    neg = vals < 0
    if np.any(vals < -PSD_TOLERANCE * np.maximum(1.0, np.abs(vals).max(axis=1, keepdims=True))):
        t = int(np.flatnonzero(np.any(neg, axis=1))[0])
        logger.warning("clipping negative covariance eigenvalues before drawing (first at t=%d)", t + 1)
    vals = np.clip(vals, 0.0, None)
    L = vecs * np.sqrt(vals)[:, None, :]
    z = rng.standard_normal((count,) + bp.means.shape)
    return bp.means[None, :, :] + np.einsum("tij,rtj->rti", L, z)

