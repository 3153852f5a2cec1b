"""Monte Carlo comparison of the one-factor and macro-risk PD estimators.

The study fixes a "true" world from a historical panel (thresholds from
its average matrix, a correlation ``rho`` and the factor series ``Z_t``
backed out of each period), then repeatedly perturbs the factor,
``Z~_t = Z_t + a * eta_t``, regenerates matrices from the one-factor model
and asks both estimators to recover the true PD path. Squared errors are
averaged over replicates per period and grade.

Random draws come from Philox streams keyed by ``(seed, purpose,
replicate, period)``, so a replicate's data do not depend on which
process computes it or in what order.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Mapping, Sequence

import numpy as np

from .domain import (
    MacroSeries,
    RatingScale,
    TransitionObservation,
    TransitionPanel,
    average_matrix,
    estimate_cohort,
    normalize_rows,
)
from .macrorisk import MonotonicityWarning, fit_regression, predict_matrices, probit_transform
from .numerics import ClipPolicy
from .onefactor import (
    ThresholdSet,
    basel_rho,
    calibrate_rho_variance,
    calibrate_thresholds,
    conditional_matrices,
    extract_z_series,
)

__all__ = [
    "BASE_MATRIX",
    "ComparisonReport",
    "SimulationConfig",
    "TruthSet",
    "estimate_both",
    "generate_replicate",
    "make_truth",
    "perturbed_factor",
    "readout_macro",
    "run_comparison",
    "synthetic_history",
]

log = logging.getLogger(__name__)

_ETA, _COUNTS, _MACRO, _HISTORY = 1, 2, 3, 4

# Nine-bin annual migration matrix (rows: bins 1-8, columns: bins 1-9 with
# 9 = default) used to drive the synthetic history.
BASE_MATRIX = np.array([
    [0.9150, 0.0700, 0.0090, 0.0030, 0.0012, 0.0008, 0.0004, 0.0002, 0.0004],
    [0.0250, 0.8900, 0.0550, 0.0150, 0.0070, 0.0040, 0.0015, 0.0005, 0.0015],
    [0.0030, 0.0600, 0.8000, 0.0700, 0.0350, 0.0180, 0.0060, 0.0020, 0.0060],
    [0.0010, 0.0080, 0.0900, 0.7200, 0.1000, 0.0500, 0.0120, 0.0030, 0.0160],
    [0.0005, 0.0030, 0.0150, 0.0850, 0.7100, 0.1200, 0.0300, 0.0065, 0.0300],
    [0.0003, 0.0015, 0.0050, 0.0150, 0.0800, 0.7500, 0.0700, 0.0200, 0.0582],
    [0.0002, 0.0010, 0.0030, 0.0060, 0.0200, 0.1000, 0.5500, 0.0700, 0.2498],
    [0.0001, 0.0005, 0.0015, 0.0030, 0.0100, 0.0500, 0.1500, 0.4000, 0.3849],
])
BASE_MATRIX = BASE_MATRIX / BASE_MATRIX.sum(axis=1, keepdims=True)
BASE_COHORTS = (800, 700, 400, 300, 250, 220, 80, 25)


def _stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed & (2**64 - 1), *keys])))


@dataclass(frozen=True)
class SimulationConfig:
    """Settings of one comparison run.

    ``macro_loadings``/``macro_noise`` describe the synthetic macro
    variables used when no macro file is supplied: variable ``k`` is
    ``loading_k * Z_t + macro_noise * xi_tk``. With ``macro_mode="independent"``
    the loadings are ignored and the variables are pure noise.
    """

    noise_scale: float = 0.5
    replicates: int = 1000
    seed: int = 20240917
    rho_source: str = "basel"
    rho: float = 0.12
    count_sampling: str = "deterministic"
    epsilon: float = 1e-6
    zero_tail: str = "clip"
    macro_mode: str = "readout"
    macro_names: tuple[str, ...] = ("vix", "gdp_growth", "baa_spread")
    macro_loadings: tuple[float, ...] = (0.8, -1.0, 0.6)
    macro_noise: float = 0.25
    trace_replicate: int = 0
    history_periods: int = 40
    history_start: str = "1990Q1"

    def __post_init__(self) -> None:
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if self.noise_scale < 0 or not math.isfinite(self.noise_scale):
            raise ValueError("noise_scale must be a finite nonnegative number")
        if self.rho_source not in ("basel", "variance_search", "fixed"):
            raise ValueError(f"unknown rho_source {self.rho_source!r}")
        if self.count_sampling not in ("deterministic", "multinomial"):
            raise ValueError(f"unknown count_sampling {self.count_sampling!r}")
        if self.macro_mode not in ("readout", "independent"):
            raise ValueError(f"unknown macro_mode {self.macro_mode!r}")
        if len(self.macro_names) != len(self.macro_loadings):
            raise ValueError("macro_names and macro_loadings differ in length")
        if self.macro_noise < 0:
            raise ValueError("macro_noise must be nonnegative")
        if not 0 <= self.trace_replicate < self.replicates:
            raise ValueError("trace_replicate must index an existing replicate")
        ClipPolicy(self.epsilon)

    @property
    def policy(self) -> ClipPolicy:
        return ClipPolicy(self.epsilon)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("macro_names", "macro_loadings"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SimulationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("macro_names", "macro_loadings"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def quarter_labels(start: str, n: int) -> list[str]:
    year, q = int(start[:4]), int(start[-1])
    out = []
    for _ in range(n):
        out.append(f"{year}Q{q}")
        q += 1
        if q > 4:
            year, q = year + 1, 1
    return out


def synthetic_history(cfg: SimulationConfig | None = None, base=BASE_MATRIX,
                      cohorts: Sequence[int] = BASE_COHORTS) -> TransitionPanel:
    """Stand-in for a historical cohort panel on the nine-bin scale.

    Counts are multinomial draws from the one-factor model around ``base``
    with Basel correlations and i.i.d. standard normal factors, so the
    panel shows the zero cells and sampling noise of real cohort data.
    """
    cfg = cfg or SimulationConfig()
    base = np.asarray(base, dtype=float)
    th = calibrate_thresholds(base)
    rho = basel_rho(base[:, -1])
    periods = quarter_labels(cfg.history_start, cfg.history_periods)
    z = _stream(cfg.seed, _HISTORY).standard_normal(len(periods))
    mats = conditional_matrices(th, rho, z)
    obs = []
    for t, p in enumerate(periods):
        rng = _stream(cfg.seed, _HISTORY, 0, t)
        counts = np.array([rng.multinomial(n, row / row.sum()) for n, row in zip(cohorts, mats[t])])
        obs.append(estimate_cohort(counts, p))
    return TransitionPanel(RatingScale.numbered(base.shape[1]), tuple(obs))


@dataclass(frozen=True)
class TruthSet:
    scale: RatingScale
    periods: tuple[str, ...]
    thresholds: ThresholdSet
    rho: np.ndarray
    z: np.ndarray
    matrices: np.ndarray
    pd: np.ndarray
    cohorts: np.ndarray

    @property
    def active(self) -> np.ndarray:
        return self.thresholds.active


def _resolve_rho(panel: TransitionPanel, avg: np.ndarray, cfg: SimulationConfig) -> np.ndarray:
    km1 = avg.shape[0]
    if cfg.rho_source == "basel":
        return np.asarray(basel_rho(avg[:, -1]), dtype=float)
    if cfg.rho_source == "fixed":
        return np.full(km1, float(cfg.rho))
    rho, _ = calibrate_rho_variance(panel, cfg.policy)
    return np.full(km1, rho)


def make_truth(panel: TransitionPanel, cfg: SimulationConfig | None = None) -> TruthSet:
    """Fix the true world: thresholds, ``rho``, factor path and matrices.

    Grades never observed in ``panel`` are inactive and carry zero rows.
    Cohort sizes for replicate weighting are the historical ones; a period
    in which an active grade was empty borrows that grade's mean size.
    """
    cfg = cfg or SimulationConfig()
    policy = cfg.policy
    avg = normalize_rows(average_matrix(panel))
    th = calibrate_thresholds(avg, policy)
    rho = _resolve_rho(panel, avg, cfg)
    z, _ = extract_z_series(panel.matrices(), panel.row_totals(), th, rho, policy)
    mats = conditional_matrices(th, rho, z)

    totals = panel.row_totals()
    obs = panel.observed()
    mean_n = np.array([totals[obs[:, i], i].mean() if obs[:, i].any() else 0.0
                       for i in range(totals.shape[1])])
    cohorts = np.where(obs, totals, np.round(mean_n)[None, :])
    cohorts = np.where(th.active[None, :], np.maximum(cohorts, 1.0), 0.0)
    return TruthSet(panel.scale, tuple(panel.periods), th, rho, z, mats, mats[..., -1].copy(), cohorts)


def perturbed_factor(truth: TruthSet, cfg: SimulationConfig, replicate: int) -> np.ndarray:
    """``Z~_t = Z_t + a * eta_t`` for one replicate."""
    eta = np.array([_stream(cfg.seed, _ETA, replicate, t).standard_normal()
                    for t in range(len(truth.periods))])
    return truth.z + cfg.noise_scale * eta


def generate_replicate(truth: TruthSet, cfg: SimulationConfig, replicate: int) -> TransitionPanel:
    """One simulated panel: perturbed factor pushed through the one-factor model.

    With ``count_sampling="multinomial"`` each row is further resampled with
    the historical cohort size, which reintroduces zero cells.
    """
    zt = perturbed_factor(truth, cfg, replicate)
    mats = conditional_matrices(truth.thresholds, truth.rho, zt)
    obs = []
    for t, p in enumerate(truth.periods):
        if cfg.count_sampling == "multinomial":
            rng = _stream(cfg.seed, _COUNTS, replicate, t)
            counts = np.zeros(mats[t].shape, dtype=np.int64)
            for i, n in enumerate(truth.cohorts[t]):
                if n > 0:
                    row = np.maximum(mats[t, i], 0.0)
                    counts[i] = rng.multinomial(int(n), row / row.sum())
            obs.append(estimate_cohort(counts, p))
        else:
            obs.append(TransitionObservation(p, mats[t], truth.cohorts[t]))
    return TransitionPanel(truth.scale, tuple(obs))


def readout_macro(truth: TruthSet, cfg: SimulationConfig) -> MacroSeries:
    """Synthetic macro variables driven by the true factor path."""
    rng = _stream(cfg.seed, _MACRO)
    noise = rng.standard_normal((len(truth.periods), len(cfg.macro_names)))
    if cfg.macro_mode == "independent":
        vals = noise
    else:
        vals = truth.z[:, None] * np.asarray(cfg.macro_loadings)[None, :] + cfg.macro_noise * noise
    return MacroSeries(cfg.macro_names, truth.periods, vals)


def estimate_both(replicate: TransitionPanel, thresholds: ThresholdSet, rho, macro: MacroSeries,
                  policy: ClipPolicy | None = None, zero_tail: str = "clip") -> tuple[np.ndarray, np.ndarray]:
    """PD paths from both estimators, each of shape ``(T, K-1)``.

    The one-factor path extracts ``Z_t`` per period with the given
    thresholds and ``rho`` and rebuilds the matrices; the macro-risk path
    fits the regression on the replicate and predicts at each period's
    macro values.
    """
    policy = policy or ClipPolicy()
    z_hat, _ = extract_z_series(replicate.matrices(), replicate.row_totals(), thresholds, rho, policy)
    pd_of = conditional_matrices(thresholds, rho, z_hat)[..., -1]
    fit = fit_regression(probit_transform(replicate, policy, zero_tail), macro)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MonotonicityWarning)
        pd_new = predict_matrices(fit, macro.aligned(replicate.periods))[..., -1]
    return pd_of, pd_new


def _run_one(truth: TruthSet, macro: MacroSeries, cfg: SimulationConfig, r: int):
    panel = generate_replicate(truth, cfg, r)
    return estimate_both(panel, truth.thresholds, truth.rho, macro, cfg.policy, cfg.zero_tail)


def _run_chunk(args) -> list[tuple[int, Any]]:
    truth, macro, cfg, indices = args
    out = []
    for r in indices:
        try:
            out.append((r, _run_one(truth, macro, cfg, r)))
        except Exception as exc:  # a failed replicate is reported, not fatal
            out.append((r, f"{type(exc).__name__}: {exc}"))
    return out


@dataclass
class ComparisonReport:
    """Per-period, per-grade MSE of both estimators plus raw traces.

    ``est_onefactor``/``est_new`` hold every replicate's PD estimates,
    shape ``(R, T, K-1)``; rows of failed replicates are NaN. Grades that
    are inactive in the truth are NaN throughout.
    """

    config: SimulationConfig
    scale: RatingScale
    periods: tuple[str, ...]
    active: np.ndarray
    true_pd: np.ndarray
    true_z: np.ndarray
    rho: np.ndarray
    est_onefactor: np.ndarray
    est_new: np.ndarray
    failures: dict[int, str] = field(default_factory=dict)

    @property
    def succeeded(self) -> np.ndarray:
        ok = np.ones(self.est_onefactor.shape[0], dtype=bool)
        ok[list(self.failures)] = False
        return ok

    def _mse(self, est: np.ndarray) -> np.ndarray:
        ok = self.succeeded
        if not ok.any():
            raise RuntimeError("every replicate failed")
        err = (est[ok] - self.true_pd[None]) ** 2
        out = err.sum(axis=0) / ok.sum()
        out[:, ~self.active] = np.nan
        return out

    @property
    def mse_onefactor(self) -> np.ndarray:
        return self._mse(self.est_onefactor)

    @property
    def mse_new(self) -> np.ndarray:
        return self._mse(self.est_new)

    def grade_summary(self) -> list[dict]:
        mz, mn = self.mse_onefactor, self.mse_new
        out = []
        for i, g in enumerate(self.scale.initial_labels):
            if not self.active[i]:
                out.append({"grade": g, "active": False})
                continue
            out.append({
                "grade": g,
                "active": True,
                "rho": float(self.rho[i]),
                "mean_mse_onefactor": float(mz[:, i].mean()),
                "mean_mse_new": float(mn[:, i].mean()),
                "periods_new_better": int(np.sum(mn[:, i] <= mz[:, i])),
                "new_better_on_average": bool(mn[:, i].mean() < mz[:, i].mean()),
            })
        return out

    # --- emission -----------------------------------------------------------

    def pd_trace_csv(self, replicate: int | None = None) -> str:
        r = self.config.trace_replicate if replicate is None else replicate
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["period", "grade", "true_pd", "pd_onefactor", "pd_new"])
        for t, p in enumerate(self.periods):
            for i, g in enumerate(self.scale.initial_labels):
                if self.active[i]:
                    w.writerow([p, g, fmt(self.true_pd[t, i]), fmt(self.est_onefactor[r, t, i]),
                                fmt(self.est_new[r, t, i])])
        return buf.getvalue()

    def mse_csv(self) -> str:
        mz, mn = self.mse_onefactor, self.mse_new
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["period", "grade", "mse_onefactor", "mse_new"])
        for t, p in enumerate(self.periods):
            for i, g in enumerate(self.scale.initial_labels):
                if self.active[i]:
                    w.writerow([p, g, fmt(mz[t, i]), fmt(mn[t, i])])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "replicates_ok": int(self.succeeded.sum()),
            "failures": {str(k): v for k, v in sorted(self.failures.items())},
            "grades": self.grade_summary(),
        }


def fmt(v: float) -> str:
    """Fixed 12-significant-digit rendering used in every CSV output."""
    return "nan" if not np.isfinite(v) else format(float(v), ".12g")


def run_comparison(panel: TransitionPanel, macro: MacroSeries | None = None,
                   cfg: SimulationConfig | None = None, workers: int = 1,
                   order: Sequence[int] | None = None) -> ComparisonReport:
    """Truth construction, ``R`` replicate cycles, and MSE accumulation.

    ``workers > 1`` spreads replicates over processes. Results land in
    per-replicate slots and are summed in replicate order, so the report
    does not depend on ``workers`` or on ``order`` (an optional execution
    order used to check exactly that).
    """
    cfg = cfg or SimulationConfig()
    truth = make_truth(panel, cfg)
    if macro is None:
        macro = readout_macro(truth, cfg)
    else:
        macro.aligned(truth.periods)
    R, T, G = cfg.replicates, len(truth.periods), truth.scale.k - 1
    est_of = np.full((R, T, G), np.nan)
    est_new = np.full((R, T, G), np.nan)
    failures: dict[int, str] = {}

    idx = list(range(R)) if order is None else list(order)
    if sorted(idx) != list(range(R)):
        raise ValueError("order must be a permutation of the replicate indices")
    if workers > 1 and R > 1:
        chunks = [idx[k::workers] for k in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = [item for part in ex.map(_run_chunk, [(truth, macro, cfg, c) for c in chunks])
                       for item in part]
    else:
        results = _run_chunk((truth, macro, cfg, idx))
    for r, res in results:
        if isinstance(res, str):
            failures[r] = res
            log.warning("replicate %d failed: %s", r, res)
        else:
            est_of[r], est_new[r] = res

    est_of[..., ~truth.active] = np.nan
    est_new[..., ~truth.active] = np.nan
    return ComparisonReport(cfg, truth.scale, truth.periods, truth.active.copy(), truth.pd,
                            truth.z, truth.rho, est_of, est_new, failures)


def summary_json(report: ComparisonReport, extra: Mapping[str, Any] | None = None) -> str:
    doc = report.summary()
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
