import numpy as np
import pytest

from rrl.simlab import BASE_MATRIX

# 1990Q1 cohort matrix in percent, as printed (rows: initial bins 1-8).
TABLE1 = [
    [99.65, 0.35, 0, 0, 0, 0, 0, 0, 0],
    [0.37, 96.33, 2.21, 0, 0, 1.10, 0, 0, 0],
    [0, 0, 96.15, 0.77, 1.54, 1.54, 0, 0, 0],
    [0, 0, 0, 94.90, 1.02, 3.06, 0, 0, 1.02],
    [0.99, 0, 0, 1.48, 92.11, 3.94, 0.98, 0, 0.50],
    [0, 0.87, 0, 0, 1.74, 94.78, 0.87, 0, 1.74],
    [0, 0, 0, 0, 0, 2.78, 83.33, 0, 13.89],
    [0, 0, 0, 0, 0, 0, 0, 0, 0],
]


def table1_csv() -> str:
    lines = ["from," + ",".join(str(j) for j in range(1, 10))]
    for i, row in enumerate(TABLE1, start=1):
        lines.append(f"{i}," + ",".join(f"{v:g}" if v else "0" for v in row))
    return "\n".join(lines) + "\n"


@pytest.fixture
def table1_file(tmp_path):
    p = tmp_path / "1990Q1.csv"
    p.write_text(table1_csv())
    return p


@pytest.fixture
def base_matrix():
    return BASE_MATRIX.copy()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_thresholds(rng, k):
    """Random strictly increasing thresholds for a ``k``-grade scale."""
    from rrl.onefactor import ThresholdSet

    return ThresholdSet(np.sort(rng.normal(0.0, 1.5, size=(k - 1, k - 1)), axis=1))


def unit_variance_factor(rng, t):
    """Draw ``t`` normals rescaled to sample mean 0 and sample variance exactly 1."""
    z = rng.standard_normal(t)
    z = z - z.mean()
    return z / z.std(ddof=1)


def onefactor_panel(rho, z, base=None, cohorts=None):
    """Panel of exact one-factor matrices around the base matrix thresholds."""
    from rrl.domain import panel_from_matrices
    from rrl.onefactor import calibrate_thresholds, conditional_matrices
    from rrl.simlab import BASE_COHORTS

    base = BASE_MATRIX if base is None else base
    th = calibrate_thresholds(base)
    mats = conditional_matrices(th, rho, np.asarray(z))
    cohorts = BASE_COHORTS if cohorts is None else cohorts
    return panel_from_matrices(mats, row_totals=cohorts)


def macro_truth(rng, k=9, n=3, t=40):
    """Random well-separated intercepts, slopes and macro paths for a ``k``-grade scale."""
    x = np.linspace(-2.5, 2.5, k - 1) + rng.uniform(-0.2, 0.2, size=(k - 1, k - 1))
    x.sort(axis=1)
    beta = rng.uniform(-0.5, 0.5, size=(k - 1, n))
    m = rng.standard_normal((t, n))
    return x, beta, m


def macro_panel(x, beta, m, periods=None):
    """Exact panel whose tail sums are ``S(x_j - m' beta_i)``, plus its macro series."""
    from rrl.domain import MacroSeries, panel_from_matrices
    from rrl.numerics import bounded_intervals

    u = x[None] - np.einsum("tn,in->ti", m, beta)[..., None]
    mats = bounded_intervals(u)
    periods = periods or [f"p{t:03d}" for t in range(m.shape[0])]
    names = tuple(f"m{q}" for q in range(m.shape[1]))
    return panel_from_matrices(mats, periods), MacroSeries(names, tuple(periods), m)


# --- acceptance reporting -------------------------------------------------

ACCEPTANCE: list[str] = []


def acceptance_line(number, title, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  ({detail})"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
