"""Standard-normal kernel and bracketed scalar minimization.

Every model module goes through these functions, so they accept scalars or
numpy arrays and return the same shape. The quantile uses Acklam's rational
approximation followed by one Halley correction against ``norm_cdf``, which
brings it to full double precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import ndtr

__all__ = [
    "ClipPolicy",
    "ConvergenceError",
    "bounded_intervals",
    "interval_prob",
    "minimize_scalar",
    "minimize_scalar_batch",
    "norm_cdf",
    "norm_inv_cdf",
    "norm_inv_sf",
    "norm_pdf",
    "norm_sf",
]

_SQRT_2PI = math.sqrt(2.0 * math.pi)

# Acklam (2003) rational approximation coefficients.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


class ConvergenceError(RuntimeError):
    """Raised when an iterative routine hits its iteration cap."""


@dataclass(frozen=True)
class ClipPolicy:
    """Keeps probabilities away from 0 and 1 before they reach a quantile.

    Zero cells are common in cohort matrices; without clipping a single
    empty cell sends a threshold to infinity.
    """

    epsilon: float = 1e-6

    def __post_init__(self) -> None:
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError(f"epsilon must lie in (0, 0.5), got {self.epsilon!r}")

    def clip(self, p):
        return np.clip(p, self.epsilon, 1.0 - self.epsilon)


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def norm_cdf(x):
    """Standard normal CDF; saturates to 0/1 far in the tails."""
    return _out(ndtr(np.asarray(x, dtype=float)))


def norm_sf(x):
    """Right-tail probability ``1 - norm_cdf(x)``, accurate for large ``x``."""
    return _out(ndtr(-np.asarray(x, dtype=float)))


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return _out(np.exp(-0.5 * x * x) / _SQRT_2PI)


def _acklam(p: np.ndarray) -> np.ndarray:
    x = np.empty_like(p)
    lo = p < _P_LOW
    hi = p > 1.0 - _P_LOW
    mid = ~(lo | hi)

    if lo.any():
        q = np.sqrt(-2.0 * np.log(p[lo]))
        x[lo] = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    if hi.any():
        q = np.sqrt(-2.0 * np.log1p(-p[hi]))
        x[hi] = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    if mid.any():
        q = p[mid] - 0.5
        r = q * q
        x[mid] = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / (
            ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)
    return x


def norm_inv_cdf(p):
    """Standard normal quantile.

    Parameters
    ----------
    p : float or array_like
        Probabilities strictly inside (0, 1). Clip with :class:`ClipPolicy`
        first if the data can contain exact zeros or ones.

    Returns
    -------
    float or ndarray
        ``x`` with ``norm_cdf(x) == p`` to about 1e-16 absolute.
    """
    p = np.asarray(p, dtype=float)
    if not np.all((p > 0.0) & (p < 1.0)):
        raise ValueError("norm_inv_cdf is defined only for 0 < p < 1")
    x = _acklam(p)
    # One Halley step; the error is measured in the tail where it is small
    # relative to the probability, so lower-tail quantiles keep full relative accuracy.
    e = np.where(p > 0.5, (1.0 - p) - ndtr(-x), ndtr(x) - p)
    u = e * _SQRT_2PI * np.exp(0.5 * x * x)
    x = x - u / (1.0 + 0.5 * x * u)
    return _out(x)


def norm_inv_sf(p):
    """Inverse of :func:`norm_sf`; strictly decreasing in ``p``."""
    return _out(-np.asarray(norm_inv_cdf(p)))


def interval_prob(lo, hi):
    """``P(lo < Y <= hi)`` for standard normal ``Y``, elementwise.

    Picks the tail in which both endpoints lie so that narrow intervals far
    from the origin do not lose their digits to cancellation.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    right = lo >= 0.0
    return np.where(right, ndtr(-lo) - ndtr(-hi), ndtr(hi) - ndtr(lo))


def bounded_intervals(cuts: np.ndarray) -> np.ndarray:
    """Standard normal mass between consecutive cut points, with -inf/+inf ends.

    ``cuts`` has shape ``(..., K-1)``; the result ``(..., K)``. Each interval
    is differenced in whichever tail keeps its digits (see
    :func:`interval_prob`), and each cut is pushed through the
    normal CDF only once.
    """
    shape = cuts.shape[:-1] + (1,)
    cdf = np.concatenate([np.zeros(shape), ndtr(cuts), np.ones(shape)], axis=-1)
    sf = np.concatenate([np.ones(shape), ndtr(-cuts), np.zeros(shape)], axis=-1)
    lo = np.concatenate([np.full(shape, -np.inf), cuts], axis=-1)
    return np.where(lo >= 0.0, sf[..., :-1] - sf[..., 1:], cdf[..., 1:] - cdf[..., :-1])


_INV_GOLD = 0.5 * (3.0 - math.sqrt(5.0))


def _brent(f: Callable[[float], float], a: float, b: float, tol: float,
           maxiter: int) -> tuple[float, float, int]:
    # Brent's method (golden section with parabolic steps) on [a, b].
    x = w = v = a + _INV_GOLD * (b - a)
    fx = fw = fv = f(x)
    d = e = 0.0
    for it in range(1, maxiter + 1):
        m = 0.5 * (a + b)
        tol1 = tol / 3.0 + 1e-15 * abs(x)
        tol2 = 2.0 * tol1
        if abs(x - m) <= tol2 - 0.5 * (b - a):
            return x, fx, it
        golden = True
        if abs(e) > tol1:
            r = (x - w) * (fx - fv)
            q = (x - v) * (fx - fw)
            p = (x - v) * q - (x - w) * r
            q = 2.0 * (q - r)
            if q > 0.0:
                p = -p
            q = abs(q)
            if abs(p) < abs(0.5 * q * e) and q * (a - x) < p < q * (b - x):
                e, d = d, p / q
                u = x + d
                if u - a < tol2 or b - u < tol2:
                    d = tol1 if m >= x else -tol1
                golden = False
        if golden:
            e = (b - x) if x < m else (a - x)
            d = _INV_GOLD * e
        u = x + (d if abs(d) >= tol1 else math.copysign(tol1, d))
        fu = f(u)
        if fu <= fx:
            if u < x:
                b = x
            else:
                a = x
            v, fv, w, fw, x, fx = w, fw, x, fx, u, fu
        else:
            if u < x:
                a = u
            else:
                b = u
            if fu <= fw or w == x:
                v, fv, w, fw = w, fw, u, fu
            elif fu <= fv or v == x or v == w:
                v, fv = u, fu
    raise ConvergenceError(f"Brent search did not converge in {maxiter} iterations")


def minimize_scalar(
    f: Callable[[float], float],
    bracket: tuple[float, float] = (-8.0, 8.0),
    tol: float = 1e-8,
    grid: int = 33,
    maxiter: int = 200,
) -> float:
    """Minimize ``f`` over a finite interval.

    A coarse grid of ``grid`` points locates the best cell, then Brent's
    method refines inside the two grid cells around it. For a unimodal ``f``
    the result is within ``tol`` of the minimizer; otherwise it is the best
    local refinement of the best grid point.

    Raises
    ------
    ConvergenceError
        If the refinement needs more than ``maxiter`` iterations.
    """
    lo, hi = float(bracket[0]), float(bracket[1])
    if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
        raise ValueError(f"invalid bracket {bracket!r}")
    if grid < 3:
        raise ValueError("grid needs at least 3 points")
    xs = np.linspace(lo, hi, grid)
    fs = np.array([f(float(x)) for x in xs])
    k = int(np.argmin(fs))
    a = xs[max(k - 1, 0)]
    b = xs[min(k + 1, grid - 1)]
    x, fx, _ = _brent(f, float(a), float(b), tol, maxiter)
    # Brent never evaluates the endpoints; the grid point may still be better.
    return float(x) if fx <= fs[k] else float(xs[k])


def minimize_scalar_batch(
    f: Callable[[np.ndarray], np.ndarray],
    n: int,
    bracket: tuple[float, float] = (-8.0, 8.0),
    tol: float = 1e-10,
    grid: int = 33,
) -> np.ndarray:
    """Minimize ``n`` independent scalar problems at once.

    ``f`` maps a length-``n`` vector of abscissae (one per problem) to the
    ``n`` objective values. Each problem gets the same grid seed as
    :func:`minimize_scalar`, followed by a vectorized golden-section search
    on the two grid cells around its best grid point.
    """
    lo, hi = float(bracket[0]), float(bracket[1])
    xs = np.linspace(lo, hi, grid)
    fs = np.stack([f(np.full(n, x)) for x in xs])
    k = np.argmin(fs, axis=0)
    best_x, best_f = xs[k], fs[k, np.arange(n)]
    a = xs[np.maximum(k - 1, 0)]
    b = xs[np.minimum(k + 1, grid - 1)]
    g = 1.0 - _INV_GOLD
    c = b - g * (b - a)
    d = a + g * (b - a)
    fc, fd = f(c), f(d)
    width = float(np.max(b - a))
    steps = max(1, int(math.ceil(math.log(tol / width) / math.log(g)))) if width > tol else 0
    for _ in range(steps):
        left = fc < fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        c, d = (np.where(left, b - g * (b - a), d),
                np.where(left, c, a + g * (b - a)))
        fresh = f(np.where(left, c, d))
        fc, fd = np.where(left, fresh, fd), np.where(left, fc, fresh)
    x = np.where(fc < fd, c, d)
    fx = np.minimum(fc, fd)
    return np.where(fx <= best_f, x, best_x)
