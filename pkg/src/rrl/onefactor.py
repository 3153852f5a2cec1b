"""One-factor credit-cycle model of rating migrations.

An obligor's latent creditworthiness change is ``sqrt(1 - rho) * Y + sqrt(rho) * Z``
with idiosyncratic ``Y`` and systematic ``Z``. Migration from grade ``i``
lands in grade ``j`` when the latent value falls between consecutive
thresholds ``x[i, j-1] < X <= x[i, j]``. Thresholds come from the average
historical matrix and ``Z_t`` is backed out of each period's matrix by a
weighted least-squares fit.

With thresholds built from cumulative sums starting at the best grade,
a larger ``z`` pushes mass toward worse grades, so ``z`` here reads as
downgrade pressure. ``OneFactorFit.presented_z(flip=True)`` gives the
opposite convention for display.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .domain import DataError, TransitionObservation, TransitionPanel, average_matrix, normalize_rows
from .numerics import (
    ClipPolicy,
    bounded_intervals,
    minimize_scalar,
    minimize_scalar_batch,
    norm_inv_cdf,
    norm_pdf,
)

__all__ = [
    "OneFactorFit",
    "RhoSearchWarning",
    "ThresholdSet",
    "basel_rho",
    "calibrate_rho_variance",
    "calibrate_thresholds",
    "conditional_matrices",
    "conditional_matrix",
    "conditional_matrix_dz",
    "extract_z",
    "extract_z_series",
    "fit_onefactor",
    "pd_from_matrix",
    "z_objective",
]

log = logging.getLogger(__name__)

Z_BRACKET = (-8.0, 8.0)
Z_GRID = 33


class RhoSearchWarning(UserWarning):
    """The variance-one search found no crossing and fell back to a boundary."""


@dataclass(frozen=True)
class ThresholdSet:
    """Latent cut points per initial grade.

    ``values[i]`` holds ``x_1 .. x_{K-1}`` for initial grade ``i``; the outer
    thresholds are implicitly -inf and +inf. A grade that was never observed
    has ``active[i] == False`` and a row of NaN. Equal neighbouring
    thresholds encode a zero-probability destination grade.
    """

    values: np.ndarray
    active: np.ndarray | None = None

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"thresholds must be (K-1) x (K-1), got {v.shape}")
        act = np.all(np.isfinite(v), axis=1) if self.active is None else np.array(self.active, dtype=bool)
        if np.any(~np.isfinite(v[act])):
            raise ValueError("active threshold rows must be finite")
        if np.any(np.diff(v[act], axis=1) < 0):
            raise ValueError("thresholds must be nondecreasing within each grade")
        v[~act] = np.nan
        v.flags.writeable = False
        act.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "active", act)

    @property
    def k(self) -> int:
        return self.values.shape[0] + 1

    def strictly_increasing(self) -> np.ndarray:
        """Per-grade flag: all interior thresholds distinct."""
        return np.all(np.diff(self.values, axis=1) > 0, axis=1) & self.active


def calibrate_thresholds(avg, policy: ClipPolicy | None = None) -> ThresholdSet:
    """Thresholds from the average matrix: quantiles of cumulative row sums.

    All-zero rows (grades never observed) become inactive. Cumulative sums
    are clipped to ``[eps, 1 - eps]`` so empty cells give finite thresholds.
    """
    policy = policy or ClipPolicy()
    avg = np.asarray(avg, dtype=float)
    if avg.ndim != 2 or avg.shape[1] != avg.shape[0] + 1:
        raise DataError(f"average matrix must be (K-1) x K, got {avg.shape}")
    if np.any(avg < 0):
        raise DataError("average matrix has negative entries")
    sums = avg.sum(axis=1)
    active = sums > 0
    bad = active & (np.abs(sums - 1.0) > 1e-9)
    if bad.any():
        raise DataError(f"rows {np.flatnonzero(bad).tolist()} do not sum to 1 "
                        "(normalize percent-rounded input first)")
    cum = policy.clip(np.cumsum(avg, axis=1)[:, :-1])
    x = np.full(cum.shape, np.nan)
    x[active] = norm_inv_cdf(cum[active])
    return ThresholdSet(x, active)


def _check_rho(rho, k: int, *, open_low: bool = False) -> np.ndarray:
    r = np.broadcast_to(np.asarray(rho, dtype=float), (k - 1,)).copy()
    low_ok = r > 0 if open_low else r >= 0
    if not np.all(low_ok & (r < 1)):
        rng = "(0, 1)" if open_low else "[0, 1)"
        raise ValueError(f"rho must lie in {rng}, got {rho!r}")
    return r


def conditional_matrices(th: ThresholdSet, rho, z) -> np.ndarray:
    """Conditional transition matrices for each value in ``z``.

    Returns shape ``z.shape + (K-1, K)``. Inactive grades give zero rows.
    ``rho`` may be a scalar or one value per initial grade.
    """
    r = _check_rho(rho, th.k)
    z = np.asarray(z, dtype=float)
    x = np.where(th.active[:, None], th.values, 0.0)
    s = np.sqrt(r)[:, None]
    c = np.sqrt(1.0 - r)[:, None]
    zz = z[..., None, None]
    p = bounded_intervals((x - s * zz) / c)
    p[..., ~th.active, :] = 0.0
    return p


def conditional_matrix(th: ThresholdSet, rho, z: float) -> np.ndarray:
    """Transition matrix conditional on the systematic factor ``Z = z``."""
    return conditional_matrices(th, rho, float(z))


def conditional_matrix_dz(th: ThresholdSet, rho, z: float) -> np.ndarray:
    """Analytic derivative of :func:`conditional_matrix` with respect to ``z``."""
    r = _check_rho(rho, th.k)
    x = np.where(th.active[:, None], th.values, 0.0)
    s = np.sqrt(r)[:, None]
    c = np.sqrt(1.0 - r)[:, None]
    dens = norm_pdf((x - s * z) / c)
    zero = np.zeros((x.shape[0], 1))
    dens = np.concatenate([zero, dens, zero], axis=1)
    d = -(s / c) * (dens[:, 1:] - dens[:, :-1])
    d[~th.active] = 0.0
    return d


def pd_from_matrix(m) -> np.ndarray:
    """Default column of one or more ``(K-1, K)`` matrices."""
    return np.asarray(m, dtype=float)[..., -1].copy()


def basel_rho(pd):
    """Asset correlation ``0.12 + 0.12 * exp(-50 * PD)``."""
    pd = np.asarray(pd, dtype=float)
    if np.any((pd < 0) | (pd > 1)):
        raise ValueError("PD must lie in [0, 1]")
    out = 0.12 + 0.12 * np.exp(-50.0 * pd)
    return float(out) if out.ndim == 0 else out


def _weights(obs_mats: np.ndarray, totals: np.ndarray, th: ThresholdSet) -> np.ndarray:
    w = np.where((obs_mats.sum(axis=-1) > 0) & th.active, totals, 0.0)
    return w


def z_objective(z, obs_mats, weights, th: ThresholdSet, rho, policy: ClipPolicy | None = None):
    """Weighted least-squares criterion for the systematic factor.

    ``sum_i sum_j n_i (P_ij - Phat_ij(z))^2 / (Phat_ij(z) (1 - Phat_ij(z)))``

    ``z`` broadcasts against the leading axes of ``obs_mats``; fitted
    probabilities in the denominator are clipped to ``[eps, 1 - eps]``.
    """
    policy = policy or ClipPolicy()
    fitted = conditional_matrices(th, rho, z)
    pc = policy.clip(fitted)
    terms = (obs_mats - fitted) ** 2 / (pc * (1.0 - pc))
    return np.einsum("...ij,...i->...", terms, weights)


def extract_z(obs: TransitionObservation, th: ThresholdSet, rho,
              policy: ClipPolicy | None = None, tol: float = 1e-10) -> tuple[float, float]:
    """Back out the systematic factor of one period.

    Returns
    -------
    (z, objective)
        Minimizer over ``[-8, 8]`` and the criterion value there.
    """
    policy = policy or ClipPolicy()
    if obs.k != th.k:
        raise DataError("observation and thresholds disagree on the number of grades")
    _check_rho(rho, th.k, open_low=True)
    w = _weights(obs.empirical, obs.row_totals, th)
    if not np.any(w > 0):
        raise DataError(f"period {obs.period!r} has no observed cohort to fit")
    mats = obs.empirical

    def f(z: float) -> float:
        return float(z_objective(z, mats, w, th, rho, policy))

    z = minimize_scalar(f, Z_BRACKET, tol=tol, grid=Z_GRID)
    return z, f(z)


def extract_z_series(obs_mats, totals, th: ThresholdSet, rho,
                     policy: ClipPolicy | None = None, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`extract_z` over a stack of ``T`` matrices.

    Parameters
    ----------
    obs_mats : ndarray, shape (T, K-1, K)
    totals : ndarray, shape (T, K-1)
        Cohort sizes used as weights.
    """
    policy = policy or ClipPolicy()
    mats = np.asarray(obs_mats, dtype=float)
    _check_rho(rho, th.k, open_low=True)
    w = _weights(mats, np.asarray(totals, dtype=float), th)
    empty = ~np.any(w > 0, axis=1)
    if empty.any():
        raise DataError(f"periods {np.flatnonzero(empty).tolist()} have no observed cohort to fit")

    def f(z: np.ndarray) -> np.ndarray:
        return z_objective(z, mats, w, th, rho, policy)

    z = minimize_scalar_batch(f, mats.shape[0], Z_BRACKET, tol=tol, grid=Z_GRID)
    return z, f(z)


@dataclass(frozen=True)
class OneFactorFit:
    rho: float | np.ndarray
    thresholds: ThresholdSet
    periods: tuple[str, ...]
    z_series: np.ndarray
    objective_values: np.ndarray
    warnings: tuple[str, ...] = field(default=())

    def presented_z(self, flip: bool = False) -> np.ndarray:
        return -self.z_series if flip else self.z_series.copy()

    def fitted_matrices(self) -> np.ndarray:
        return conditional_matrices(self.thresholds, self.rho, self.z_series)


def fit_onefactor(panel: TransitionPanel, rho, policy: ClipPolicy | None = None) -> OneFactorFit:
    """Thresholds from the panel average plus per-period ``Z_t`` for a given ``rho``."""
    policy = policy or ClipPolicy()
    th = calibrate_thresholds(normalize_rows(average_matrix(panel)), policy)
    z, obj = extract_z_series(panel.matrices(), panel.row_totals(), th, rho, policy)
    r = np.asarray(rho, dtype=float)
    return OneFactorFit(float(r) if r.ndim == 0 else r.copy(), th, tuple(panel.periods), z, obj)


def calibrate_rho_variance(panel: TransitionPanel, policy: ClipPolicy | None = None,
                           bounds: tuple[float, float] = (0.01, 0.99), scan: int = 25,
                           tol: float = 1e-4) -> tuple[float, OneFactorFit]:
    """Find the ``rho`` at which the extracted ``Z_t`` series has sample variance one.

    A coarse scan over ``bounds`` looks for a sign change of
    ``var(Z(rho)) - 1`` (sample variance, ``T - 1`` denominator), then
    bisection narrows it until ``|var - 1| < tol``. Without a crossing the
    boundary value closest to variance one is returned and a
    :class:`RhoSearchWarning` is issued.
    """
    policy = policy or ClipPolicy()
    if len(panel) < 3:
        raise DataError("variance calibration needs at least 3 periods")
    th = calibrate_thresholds(normalize_rows(average_matrix(panel)), policy)
    mats, totals = panel.matrices(), panel.row_totals()

    def excess(r: float) -> tuple[float, np.ndarray, np.ndarray]:
        z, obj = extract_z_series(mats, totals, th, r, policy)
        return float(np.var(z, ddof=1)) - 1.0, z, obj

    grid = np.linspace(bounds[0], bounds[1], scan)
    evals = [excess(float(r)) for r in grid]
    g = np.array([e[0] for e in evals])
    cross = np.flatnonzero(np.sign(g[:-1]) * np.sign(g[1:]) <= 0)
    notes: tuple[str, ...] = ()
    if cross.size == 0:
        k = int(np.argmin(np.abs(g)))
        rho = float(grid[k])
        _, z, obj = evals[k]
        msg = (f"no rho in [{bounds[0]}, {bounds[1]}] gives unit Z variance "
               f"(variance ranges {g.min() + 1:.4g}..{g.max() + 1:.4g}); using rho={rho:.4g}")
        warnings.warn(msg, RhoSearchWarning, stacklevel=2)
        log.warning(msg)
        notes = (msg,)
    else:
        k = int(cross[0])
        lo, hi = float(grid[k]), float(grid[k + 1])
        glo = g[k]
        rho, (gm, z, obj) = lo, evals[k]
        if g[k + 1] == 0:
            rho, (gm, z, obj) = hi, evals[k + 1]
        while abs(gm) >= tol and hi - lo > 1e-12:
            mid = 0.5 * (lo + hi)
            gm, z, obj = excess(mid)
            rho = mid
            if np.sign(gm) == np.sign(glo):
                lo, glo = mid, gm
            else:
                hi = mid
    fit = OneFactorFit(rho, th, tuple(panel.periods), z, obj, notes)
    return rho, fit
