"""Macroeconomic-risk model: probit-transformed tail rates regressed on macro variables.

For initial grade ``i`` the probability of ending strictly below grade ``j``
is ``S(x_j - m' beta_i)``, where ``S`` is the standard normal survival
function. Inverting the observed tail sums gives

    U_ij,t = S^{-1}(sum_{k > j} P_ik,t) = x_j - M_t' beta_i + e_t

which is linear in the macro vector. Each initial grade is fitted by
ordinary least squares on all destination grades ``j = 1..K-1`` stacked,
with one intercept per ``j`` and a single slope vector per grade.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .domain import DataError, MacroSeries, RatingScale, TransitionPanel, normalize_rows
from .numerics import ClipPolicy, bounded_intervals, norm_inv_sf

__all__ = [
    "FitError",
    "MacroRiskFit",
    "MonotonicityWarning",
    "ProbitPanel",
    "RankDeficiencyError",
    "fit_regression",
    "forecast_pd",
    "predict_matrices",
    "predict_matrix",
    "probit_transform",
    "tail_sums",
]

log = logging.getLogger(__name__)


class FitError(ValueError):
    pass


class RankDeficiencyError(FitError):
    def __init__(self, message: str, columns: Sequence[str] = ()):
        super().__init__(message)
        self.columns = tuple(columns)


class MonotonicityWarning(UserWarning):
    """Fitted intercepts out of order; prediction floored and renormalized."""


@dataclass(frozen=True)
class ProbitPanel:
    """Probit-scale tail rates ``U[t, i, j-1]`` for ``j = 1..K-1``.

    ``usable`` marks entries that enter the regression; entries from
    unobserved rows or whose tail sum had to be clipped are excluded.
    ``U`` for clipped entries is still filled from the clipped value.
    """

    periods: tuple[str, ...]
    scale: RatingScale
    values: np.ndarray
    usable: np.ndarray
    clipped: np.ndarray
    observed: np.ndarray
    epsilon: float

    @property
    def k(self) -> int:
        return self.scale.k


def tail_sums(mats) -> np.ndarray:
    """``sum_{k > j} P[..., k]`` for ``j = 1..K-1`` (1-based), shape ``(..., K-1)``."""
    m = np.asarray(mats, dtype=float)
    return np.cumsum(m[..., ::-1], axis=-1)[..., ::-1][..., 1:]


def probit_transform(panel: TransitionPanel, policy: ClipPolicy | None = None,
                     zero_tail: str = "clip") -> ProbitPanel:
    """Map each observed row's tail sums through the inverse survival function.

    Parameters
    ----------
    zero_tail : {"clip", "continuity"}
        How exact 0/1 tail sums are treated. ``clip`` clips to
        ``[eps, 1 - eps]`` and masks the entry. ``continuity`` replaces 0 by
        ``1 / (2 N)`` (and 1 by ``1 - 1 / (2 N)``) for rows with integer
        counts; such entries stay usable unless they still need clipping.
    """
    policy = policy or ClipPolicy()
    if zero_tail not in ("clip", "continuity"):
        raise ValueError(f"zero_tail must be 'clip' or 'continuity', not {zero_tail!r}")
    mats = normalize_rows(panel.matrices().reshape(-1, panel.scale.k)).reshape(panel.matrices().shape)
    tails = tail_sums(mats)
    observed = panel.observed()
    if zero_tail == "continuity":
        for t, obs in enumerate(panel.observations):
            if obs.counts is None:
                continue
            half = np.where(obs.row_totals > 0, 0.5 / np.maximum(obs.row_totals, 1.0), 0.0)[:, None]
            row = tails[t]
            row[:] = np.where(row <= 0.0, half, np.where(row >= 1.0, 1.0 - half, row))
    eps = policy.epsilon
    clipped = (tails < eps) | (tails > 1.0 - eps)
    u = norm_inv_sf(policy.clip(tails))
    u = np.where(observed[..., None], u, np.nan)
    usable = observed[..., None] & ~clipped
    return ProbitPanel(tuple(panel.periods), panel.scale, u, usable, clipped & observed[..., None],
                       observed, eps)


@dataclass(frozen=True)
class MacroRiskFit:
    """Per-grade least-squares estimates.

    ``intercepts[i, j-1]`` is the threshold ``x_j`` of initial grade ``i``
    and ``slopes[i]`` its macro sensitivity ``beta_i``. A positive slope
    means a rise in that variable lowers ``U`` and shifts mass toward
    worse grades.
    """

    scale: RatingScale
    names: tuple[str, ...]
    slopes: np.ndarray
    intercepts: np.ndarray
    slope_se: np.ndarray
    intercept_se: np.ndarray
    resid_var: np.ndarray
    n_obs: np.ndarray
    active: np.ndarray
    epsilon: float
    residuals: tuple[np.ndarray, ...] = field(default=(), repr=False)
    warnings: tuple[str, ...] = ()

    @property
    def k(self) -> int:
        return self.scale.k

    def macro_vector(self, m) -> np.ndarray:
        if isinstance(m, Mapping):
            missing = [n for n in self.names if n not in m]
            if missing:
                raise DataError(f"macro input lacks variables {missing}")
            return np.array([float(m[n]) for n in self.names])
        v = np.asarray(m, dtype=float)
        if v.shape[-1] != len(self.names):
            raise DataError(f"expected {len(self.names)} macro values ({', '.join(self.names)}), "
                            f"got {v.shape[-1]}")
        return v

    def to_dict(self) -> dict:
        g = self.scale.initial_labels

        def num(a):
            return [None if not np.isfinite(v) else float(v) for v in np.ravel(a)]

        return {
            "model": "macrorisk",
            "scale": list(self.scale.labels),
            "coefficients": {
                gi: {"active": bool(self.active[i]),
                     "slopes": dict(zip(self.names, num(self.slopes[i]))),
                     "slope_se": dict(zip(self.names, num(self.slope_se[i]))),
                     "resid_var": num([self.resid_var[i]])[0],
                     "n_obs": int(self.n_obs[i])}
                for i, gi in enumerate(g)
            },
            "thresholds": {
                gi: {"values": num(self.intercepts[i]), "se": num(self.intercept_se[i])}
                for i, gi in enumerate(g)
            },
            "variables": list(self.names),
            "epsilon": self.epsilon,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MacroRiskFit":
        if d.get("model") != "macrorisk":
            raise DataError("not a macro-risk fit document")
        scale = RatingScale(tuple(d["scale"]))
        names = tuple(d["variables"])
        g = scale.initial_labels

        def arr(v):
            return np.array([np.nan if x is None else x for x in v], dtype=float)

        coef = d["coefficients"]
        th = d["thresholds"]
        return cls(
            scale=scale,
            names=names,
            slopes=np.stack([arr([coef[gi]["slopes"][n] for n in names]) for gi in g]),
            intercepts=np.stack([arr(th[gi]["values"]) for gi in g]),
            slope_se=np.stack([arr([coef[gi]["slope_se"][n] for n in names]) for gi in g]),
            intercept_se=np.stack([arr(th[gi]["se"]) for gi in g]),
            resid_var=arr([coef[gi]["resid_var"] for gi in g]),
            n_obs=np.array([coef[gi]["n_obs"] for gi in g]),
            active=np.array([coef[gi]["active"] for gi in g]),
            epsilon=float(d.get("epsilon", ClipPolicy().epsilon)),
            warnings=tuple(d.get("warnings", ())),
        )


def _collinear_columns(X: np.ndarray, names: Sequence[str], first_macro: int) -> list[str]:
    full = np.linalg.matrix_rank(X)
    out = []
    for k, name in enumerate(names):
        reduced = np.delete(X, first_macro + k, axis=1)
        if np.linalg.matrix_rank(reduced) == full:
            out.append(name)
    return out


def fit_regression(probit: ProbitPanel, macro: MacroSeries) -> MacroRiskFit:
    """Per-grade stacked OLS of probit tail rates on macro variables.

    Raises
    ------
    RankDeficiencyError
        The design of some grade is rank deficient (collinear macro
        columns, or fewer usable observations than parameters).
    FitError
        A grade that was observed has no usable entry at all.
    """
    M = macro.aligned(probit.periods)
    n = M.shape[1]
    km1 = probit.k - 1
    labels = probit.scale.initial_labels
    slopes = np.full((km1, n), np.nan)
    slope_se = np.full((km1, n), np.nan)
    icpt = np.full((km1, km1), np.nan)
    icpt_se = np.full((km1, km1), np.nan)
    rvar = np.full(km1, np.nan)
    nobs = np.zeros(km1, dtype=int)
    active = np.zeros(km1, dtype=bool)
    resids: list[np.ndarray] = []
    notes: list[str] = []

    for i in range(km1):
        use = probit.usable[:, i, :]
        if not use.any():
            resids.append(np.empty((0, 3)))
            if not probit.observed[:, i].any():
                notes.append(f"grade {labels[i]}: never observed, excluded from the fit")
                continue
            raise FitError(f"grade {labels[i]}: every probit entry is clipped or masked")
        t_idx, j_idx = np.nonzero(use)
        y = probit.values[t_idx, i, j_idx]
        cols = np.flatnonzero(use.any(axis=0))
        pos = np.full(km1, -1)
        pos[cols] = np.arange(cols.size)
        X = np.zeros((y.size, cols.size + n))
        X[np.arange(y.size), pos[j_idx]] = 1.0
        X[:, cols.size:] = -M[t_idx]
        p = X.shape[1]
        rank = np.linalg.matrix_rank(X)
        if rank < p:
            bad = _collinear_columns(X, macro.names, cols.size)
            if y.size < p:
                msg = f"grade {labels[i]}: {y.size} usable observations for {p} parameters"
            else:
                msg = (f"grade {labels[i]}: design is rank deficient; "
                       f"collinear macro columns: {', '.join(bad) or 'none identified'}")
            raise RankDeficiencyError(msg, bad)
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        res = y - X @ coef
        dof = y.size - p
        s2 = float(res @ res) / dof if dof > 0 else np.nan
        cov = s2 * np.linalg.inv(X.T @ X)
        se = np.sqrt(np.diag(cov))
        icpt[i, cols] = coef[:cols.size]
        icpt_se[i, cols] = se[:cols.size]
        slopes[i] = coef[cols.size:]
        slope_se[i] = se[cols.size:]
        rvar[i] = s2
        nobs[i] = y.size
        active[i] = True
        resids.append(np.column_stack([t_idx, j_idx + 1, res]))

        missing = np.setdiff1d(np.arange(km1), cols)
        if missing.size:
            # No usable entry for these destinations: hold the slope fixed and
            # take the intercept from the clipped values.
            obs_t = probit.observed[:, i]
            for j in missing:
                icpt[i, j] = float(np.mean(probit.values[obs_t, i, j] + M[obs_t] @ slopes[i]))
            notes.append(f"grade {labels[i]}: thresholds {[int(j) + 1 for j in missing]} "
                         "set from clipped tail sums")
        if np.any(np.diff(icpt[i]) <= 0):
            notes.append(f"grade {labels[i]}: fitted thresholds are not strictly increasing")

    for msg in notes:
        log.info(msg)
    return MacroRiskFit(probit.scale, tuple(macro.names), slopes, icpt, slope_se, icpt_se,
                        rvar, nobs, active, probit.epsilon, tuple(resids), tuple(notes))


def predict_matrices(fit: MacroRiskFit, m) -> np.ndarray:
    """Fitted matrices for one macro vector or a stack of them, shape ``(..., K-1, K)``."""
    v = fit.macro_vector(m)
    x = np.where(fit.active[:, None], fit.intercepts, 0.0)
    b = np.where(fit.active[:, None], fit.slopes, 0.0)
    u = x - np.einsum("...n,in->...i", v, b)[..., None]
    p = bounded_intervals(u)
    if np.any(p < 0):
        msg = "non-monotone fitted thresholds produced negative cells; floored at 0 and renormalized"
        warnings.warn(msg, MonotonicityWarning, stacklevel=3)
        p = np.maximum(p, 0.0)
        p = p / p.sum(axis=-1, keepdims=True)
    p[..., ~fit.active, :] = 0.0
    return p


def predict_matrix(fit: MacroRiskFit, m) -> np.ndarray:
    """Fitted ``(K-1, K)`` transition matrix at macro values ``m``.

    ``m`` is a mapping from variable name to value or a vector in the fit's
    variable order.
    """
    v = fit.macro_vector(m)
    if v.ndim != 1:
        raise DataError("predict_matrix takes a single macro vector")
    return predict_matrices(fit, v)


def forecast_pd(fit: MacroRiskFit, scenario: MacroSeries) -> np.ndarray:
    """PD per scenario period and initial grade, shape ``(S, K-1)``.

    The scenario may carry extra variables; those in the fit must all be present.
    """
    missing = [n for n in fit.names if n not in scenario.names]
    if missing:
        raise DataError(f"scenario lacks variables {missing}")
    cols = [scenario.names.index(n) for n in fit.names]
    return predict_matrices(fit, scenario.values[:, cols])[..., -1]
