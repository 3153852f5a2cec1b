"""Rating scales, cohort observations, panels, macro series and file ingestion."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .numerics import ClipPolicy

__all__ = [
    "AGENCY_REBIN",
    "DataError",
    "MacroSeries",
    "RatingScale",
    "RebinMap",
    "TransitionObservation",
    "TransitionPanel",
    "ValidationReport",
    "average_matrix",
    "detect_units",
    "estimate_cohort",
    "normalize_rows",
    "observation_from_table",
    "panel_from_matrices",
    "read_macro_csv",
    "read_panel_long_csv",
    "read_period_csv",
    "rebin_label",
    "validate_panel",
]


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class RatingScale:
    """Ordered grade labels; the last label is the absorbing default grade."""

    labels: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "labels", tuple(str(s) for s in self.labels))
        if len(self.labels) < 2:
            raise ValueError("a rating scale needs at least two grades")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError(f"duplicate grade labels in {self.labels}")

    @classmethod
    def numbered(cls, k: int) -> "RatingScale":
        return cls(tuple(str(i) for i in range(1, k + 1)))

    @property
    def k(self) -> int:
        return len(self.labels)

    @property
    def default_label(self) -> str:
        return self.labels[-1]

    @property
    def initial_labels(self) -> tuple[str, ...]:
        """Grades that carry a modeled row (all but default)."""
        return self.labels[:-1]

    def index(self, label: str) -> int:
        try:
            return self.labels.index(str(label))
        except ValueError:
            raise DataError(f"unknown grade label {label!r}") from None


@dataclass(frozen=True)
class TransitionObservation:
    """One period of a cohort transition matrix.

    ``empirical`` is the ``(K-1, K)`` matrix of migration frequencies and
    ``row_totals`` the cohort size of each initial grade. ``counts`` is kept
    when the observation came from integer counts; matrices read from
    percent/fraction tables or generated by a model carry ``counts=None``.
    Rows with zero total are unobserved and stay all-zero.
    """

    period: str
    empirical: np.ndarray
    row_totals: np.ndarray
    counts: np.ndarray | None = None

    def __post_init__(self) -> None:
        emp = np.array(self.empirical, dtype=float)
        tot = np.array(self.row_totals, dtype=float)
        if emp.ndim != 2 or emp.shape[1] != emp.shape[0] + 1:
            raise DataError(f"expected a (K-1) x K matrix, got shape {emp.shape}")
        if tot.shape != (emp.shape[0],):
            raise DataError("row_totals must have one entry per initial grade")
        if np.any(emp < 0) or np.any(tot < 0) or not np.all(np.isfinite(emp)):
            raise DataError("negative or non-finite entries in transition data")
        emp.flags.writeable = False
        tot.flags.writeable = False
        object.__setattr__(self, "empirical", emp)
        object.__setattr__(self, "row_totals", tot)
        if self.counts is not None:
            c = np.array(self.counts, dtype=np.int64)
            c.flags.writeable = False
            object.__setattr__(self, "counts", c)

    @classmethod
    def from_matrix(cls, period: str, matrix, row_totals=None) -> "TransitionObservation":
        """Wrap a probability matrix; unit weight for every nonzero row by default."""
        m = np.asarray(matrix, dtype=float)
        if row_totals is None:
            row_totals = (m.sum(axis=1) > 0).astype(float)
        return cls(str(period), m, np.asarray(row_totals, dtype=float))

    @property
    def k(self) -> int:
        return self.empirical.shape[1]

    @property
    def observed(self) -> np.ndarray:
        """Boolean mask of initial grades with a nonempty cohort."""
        return (self.row_totals > 0) & (self.empirical.sum(axis=1) > 0)


def estimate_cohort(counts, period: str = "", scale: RatingScale | None = None) -> TransitionObservation:
    """Cohort estimator: divide each row of counts by its total.

    Parameters
    ----------
    counts : array_like, shape (K-1, K)
        Nonnegative integer migration counts ``N_ij`` for one period.
    period : str
        Opaque period label.
    scale : RatingScale, optional
        If given, the count matrix must match its size.
    """
    c = np.asarray(counts)
    if c.ndim != 2 or c.shape[1] != c.shape[0] + 1:
        raise DataError(f"count matrix must be (K-1) x K, got {c.shape}")
    if scale is not None and c.shape[1] != scale.k:
        raise DataError(f"count matrix has {c.shape[1]} columns, scale has {scale.k} grades")
    if np.any(c < 0):
        raise DataError("negative counts")
    if not np.all(np.equal(np.mod(c, 1), 0)):
        raise DataError("counts must be integers")
    c = c.astype(np.int64)
    totals = c.sum(axis=1)
    emp = np.zeros(c.shape, dtype=float)
    nz = totals > 0
    emp[nz] = c[nz] / totals[nz, None]
    return TransitionObservation(str(period), emp, totals.astype(float), counts=c)


@dataclass(frozen=True)
class TransitionPanel:
    """Time-ordered sequence of observations on one rating scale."""

    scale: RatingScale
    observations: tuple[TransitionObservation, ...]

    def __post_init__(self) -> None:
        obs = tuple(self.observations)
        object.__setattr__(self, "observations", obs)
        if not obs:
            raise DataError("a panel needs at least one observation")
        for o in obs:
            if o.k != self.scale.k:
                raise DataError(f"period {o.period!r} has {o.k} grades, scale has {self.scale.k}")
        periods = [o.period for o in obs]
        if len(set(periods)) != len(periods):
            raise DataError("duplicate period labels in panel")

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def periods(self) -> list[str]:
        return [o.period for o in self.observations]

    def matrices(self) -> np.ndarray:
        """Stacked empirical matrices, shape ``(T, K-1, K)``."""
        return np.stack([o.empirical for o in self.observations])

    def row_totals(self) -> np.ndarray:
        return np.stack([o.row_totals for o in self.observations])

    def observed(self) -> np.ndarray:
        """``(T, K-1)`` mask of observed rows."""
        return np.stack([o.observed for o in self.observations])

    def ever_observed(self) -> np.ndarray:
        return self.observed().any(axis=0)


def average_matrix(panel: TransitionPanel) -> np.ndarray:
    """Entrywise mean of the panel's matrices.

    Each row is averaged over the periods in which that grade was observed;
    a grade never observed yields an all-zero row.
    """
    if len(panel) == 0:
        raise DataError("empty panel")
    mats = panel.matrices()
    obs = panel.observed()
    n = obs.sum(axis=0)
    total = np.einsum("tij,ti->ij", mats, obs.astype(float))
    out = np.zeros_like(total)
    nz = n > 0
    out[nz] = total[nz] / n[nz, None]
    return out


def normalize_rows(m) -> np.ndarray:
    """Rescale nonzero rows to sum to one (used on percent-rounded input)."""
    m = np.asarray(m, dtype=float)
    s = m.sum(axis=1, keepdims=True)
    return np.divide(m, s, out=np.zeros_like(m), where=s > 0)


@dataclass(frozen=True)
class MacroSeries:
    names: tuple[str, ...]
    periods: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        object.__setattr__(self, "names", tuple(str(s) for s in self.names))
        object.__setattr__(self, "periods", tuple(str(s) for s in self.periods))
        if v.shape != (len(self.periods), len(self.names)):
            raise DataError(f"macro values shape {v.shape} does not match "
                            f"{len(self.periods)} periods x {len(self.names)} variables")
        if not np.all(np.isfinite(v)):
            raise DataError("macro series has missing or non-finite values")
        if len(set(self.names)) != len(self.names):
            raise DataError("duplicate macro variable names")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def aligned(self, periods: Sequence[str]) -> np.ndarray:
        """Rows of ``values`` in the order of ``periods``."""
        pos = {p: i for i, p in enumerate(self.periods)}
        missing = [p for p in periods if p not in pos]
        if missing:
            raise DataError(f"macro series lacks periods {missing[:5]}")
        return self.values[[pos[p] for p in periods]]


# --- agency rebinning -----------------------------------------------------

AGENCY_REBIN: dict[str, int] = {
    "AAA": 1, "AA+": 1, "AA": 1, "AA-": 1, "A+": 1, "A": 1, "A-": 1,
    "BBB+": 2, "BBB": 2, "BBB-": 2,
    "BB+": 3, "BB": 3,
    "BB-": 4,
    "B+": 5,
    "B": 6, "B-": 6,
    "CCC+": 7, "CCC": 7, "CCC-": 7,
    "CC": 8, "C": 8,
    "D": 9,
}


@dataclass(frozen=True)
class RebinMap:
    """Agency rating label to modeled bin, listed from best to worst."""

    mapping: Mapping[str, int] = field(default_factory=lambda: dict(AGENCY_REBIN))

    def __post_init__(self) -> None:
        bins = list(self.mapping.values())
        if any(b2 < b1 for b1, b2 in zip(bins, bins[1:])):
            raise ValueError("rebin map must be monotone in agency order")

    @property
    def n_bins(self) -> int:
        return max(self.mapping.values())


def rebin_label(label: str, rebin: RebinMap | None = None) -> int:
    rebin = rebin or RebinMap()
    try:
        return rebin.mapping[label.strip()]
    except KeyError:
        raise DataError(f"unknown agency rating {label!r}") from None


# --- validation -----------------------------------------------------------

@dataclass
class ValidationReport:
    unobserved_rows: list[tuple[str, str]] = field(default_factory=list)
    zero_cells: list[tuple[str, str, str]] = field(default_factory=list)
    rounding_defects: list[tuple[str, str, float]] = field(default_factory=list)
    needs_clipping: list[tuple[str, str]] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not (self.unobserved_rows or self.zero_cells
                    or self.rounding_defects or self.needs_clipping)

    def to_dict(self) -> dict:
        return {
            "unobserved_rows": [{"period": p, "from": i} for p, i in self.unobserved_rows],
            "zero_cells": [{"period": p, "from": i, "to": j} for p, i, j in self.zero_cells],
            "rounding_defects": [{"period": p, "from": i, "row_sum": s}
                                 for p, i, s in self.rounding_defects],
            "needs_clipping": [{"period": p, "from": i} for p, i in self.needs_clipping],
        }


ROUNDING_TOL = 5e-4


def validate_panel(panel: TransitionPanel, policy: ClipPolicy | None = None) -> ValidationReport:
    """List zero rows, zero cells, rounding defects and rows that need clipping.

    A row needs clipping when one of its cumulative sums (or tail sums)
    short of the last grade falls outside ``[eps, 1 - eps]``, i.e. a normal
    quantile of it would be infinite or saturated.
    """
    policy = policy or ClipPolicy()
    eps = policy.epsilon
    rep = ValidationReport()
    labels = panel.scale.labels
    for obs in panel.observations:
        for i, row in enumerate(obs.empirical):
            gi = labels[i]
            for j, v in enumerate(row):
                if v == 0.0:
                    rep.zero_cells.append((obs.period, gi, labels[j]))
            if not obs.observed[i]:
                rep.unobserved_rows.append((obs.period, gi))
                continue
            s = float(row.sum())
            if abs(s - 1.0) > ROUNDING_TOL:
                rep.rounding_defects.append((obs.period, gi, s))
            cum = np.cumsum(row)[:-1] / s
            if np.any((cum < eps) | (cum > 1.0 - eps)):
                rep.needs_clipping.append((obs.period, gi))
    return rep


# --- ingestion ------------------------------------------------------------

def detect_units(matrix: np.ndarray, units: str = "auto") -> str:
    """Decide whether a matrix holds counts, percents or fractions.

    ``auto`` looks at the sums of the nonzero rows: all near 1 means
    fractions, all near 100 means percents, otherwise integral entries are
    read as counts. Anything else is ambiguous.
    """
    if units != "auto":
        if units not in ("counts", "percent", "fraction"):
            raise DataError(f"unknown units {units!r}")
        return units
    sums = matrix.sum(axis=1)
    sums = sums[sums > 0]
    if sums.size == 0:
        raise DataError("matrix has no nonzero rows; cannot infer units")
    if np.all(np.abs(sums - 1.0) <= 0.01):
        return "fraction"
    if np.all(np.abs(sums - 100.0) <= 1.0):
        return "percent"
    if np.all(np.mod(matrix, 1) == 0):
        return "counts"
    raise DataError(f"row sums {np.round(sums, 4).tolist()} are near neither 1 nor 100 "
                    "and entries are not integer counts; pass --units explicitly")


def observation_from_table(period: str, matrix: np.ndarray, units: str) -> TransitionObservation:
    if units == "counts":
        return estimate_cohort(matrix, period)
    frac = matrix / 100.0 if units == "percent" else matrix
    return TransitionObservation.from_matrix(period, frac)


def _read_rows(source) -> list[list[str]]:
    if isinstance(source, (str, Path)) and Path(source).exists():
        text = Path(source).read_text()
    elif isinstance(source, io.IOBase):
        text = source.read()
    else:
        text = str(source)
    rows = [r for r in csv.reader(io.StringIO(text)) if any(c.strip() for c in r)]
    if not rows:
        raise DataError("empty CSV input")
    return [[c.strip() for c in r] for r in rows]


def _float(s: str, where: str) -> float:
    try:
        v = float(s)
    except ValueError:
        raise DataError(f"non-numeric value {s!r} at {where}") from None
    if not math.isfinite(v):
        raise DataError(f"non-finite value at {where}")
    return v


def read_period_csv(source, period: str, units: str = "auto",
                    scale: RatingScale | None = None) -> tuple[RatingScale, np.ndarray, TransitionObservation]:
    """Read a per-period matrix: header ``from,<grade labels>``, one row per initial grade.

    Returns the scale, the raw table exactly as printed, and the observation.
    """
    rows = _read_rows(source)
    header = rows[0]
    if header[0].lower() != "from":
        raise DataError("per-period CSV must start with a 'from' column")
    file_scale = RatingScale(tuple(header[1:]))
    if scale is not None and scale != file_scale:
        raise DataError(f"grade columns {file_scale.labels} differ from {scale.labels}")
    k = file_scale.k
    raw = np.zeros((k - 1, k))
    seen = set()
    for n, r in enumerate(rows[1:], start=2):
        if len(r) != k + 1:
            raise DataError(f"line {n}: expected {k + 1} fields, got {len(r)}")
        i = file_scale.index(r[0])
        if i == k - 1:
            raise DataError(f"line {n}: default grade {r[0]!r} cannot have an outgoing row")
        if i in seen:
            raise DataError(f"line {n}: duplicate row for grade {r[0]!r}")
        seen.add(i)
        raw[i] = [_float(c, f"line {n}") for c in r[1:]]
    if np.any(raw < 0):
        raise DataError("negative entries")
    u = detect_units(raw, units)
    return file_scale, raw, observation_from_table(period, raw, u)


def read_panel_long_csv(source, scale: RatingScale | None = None) -> TransitionPanel:
    """Read long-format counts with header ``period,from,to,count``.

    Periods keep their order of first appearance. Without an explicit scale
    the grade labels are sorted numerically when they are all integers,
    otherwise by first appearance; the last one is the default grade.
    """
    rows = _read_rows(source)
    header = [h.lower() for h in rows[0]]
    if header != ["period", "from", "to", "count"]:
        raise DataError("long-format panel header must be period,from,to,count")
    recs = []
    for n, r in enumerate(rows[1:], start=2):
        if len(r) != 4:
            raise DataError(f"line {n}: expected 4 fields")
        c = _float(r[3], f"line {n}")
        if c < 0 or c != int(c):
            raise DataError(f"line {n}: count must be a nonnegative integer")
        recs.append((r[0], r[1], r[2], int(c)))
    if not recs:
        raise DataError("no data rows in panel file")
    if scale is None:
        labels: list[str] = []
        for _, a, b, _ in recs:
            for g in (a, b):
                if g not in labels:
                    labels.append(g)
        if all(g.lstrip("-").isdigit() for g in labels):
            labels.sort(key=int)
        scale = RatingScale(tuple(labels))
    periods: list[str] = []
    for p, *_ in recs:
        if p not in periods:
            periods.append(p)
    k = scale.k
    counts = {p: np.zeros((k - 1, k), dtype=np.int64) for p in periods}
    for p, a, b, c in recs:
        i, j = scale.index(a), scale.index(b)
        if i == k - 1:
            raise DataError(f"transition out of default grade {a!r} in period {p!r}")
        counts[p][i, j] += c
    return TransitionPanel(scale, tuple(estimate_cohort(counts[p], p, scale) for p in periods))


def read_macro_csv(source) -> MacroSeries:
    """Read ``period,<var1>,...,<varn>``."""
    rows = _read_rows(source)
    header = rows[0]
    if header[0].lower() != "period" or len(header) < 2:
        raise DataError("macro CSV header must be period,<var1>,...")
    periods, vals = [], []
    for n, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise DataError(f"line {n}: expected {len(header)} fields")
        periods.append(r[0])
        vals.append([_float(c, f"line {n}") for c in r[1:]])
    if not periods:
        raise DataError("macro CSV has no data rows")
    if len(set(periods)) != len(periods):
        raise DataError("duplicate periods in macro CSV")
    return MacroSeries(tuple(header[1:]), tuple(periods), np.array(vals))


def panel_from_matrices(matrices: Iterable, periods: Sequence[str] | None = None,
                        row_totals=None, scale: RatingScale | None = None) -> TransitionPanel:
    """Build a panel from stacked probability matrices (model output, tests)."""
    mats = [np.asarray(m, dtype=float) for m in matrices]
    if periods is None:
        periods = [str(t) for t in range(1, len(mats) + 1)]
    scale = scale or RatingScale.numbered(mats[0].shape[1])
    if row_totals is None:
        obs = [TransitionObservation.from_matrix(p, m) for p, m in zip(periods, mats)]
    else:
        tot = np.broadcast_to(np.asarray(row_totals, dtype=float), (len(mats), mats[0].shape[0]))
        obs = [TransitionObservation(str(p), m, n) for p, m, n in zip(periods, mats, tot)]
    return TransitionPanel(scale, tuple(obs))
