import io
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rrl.domain import (
    AGENCY_REBIN,
    DataError,
    MacroSeries,
    RatingScale,
    RebinMap,
    TransitionObservation,
    TransitionPanel,
    average_matrix,
    detect_units,
    estimate_cohort,
    panel_from_matrices,
    read_macro_csv,
    read_panel_long_csv,
    read_period_csv,
    rebin_label,
    validate_panel,
)
from rrl.numerics import ClipPolicy

from conftest import TABLE1


# --- rating scale ---------------------------------------------------------

def test_scale_basics():
    s = RatingScale.numbered(9)
    assert s.k == 9
    assert s.default_label == "9"
    assert s.initial_labels == tuple(str(i) for i in range(1, 9))
    assert s.index("3") == 2


def test_scale_rejects_bad_labels():
    with pytest.raises(ValueError):
        RatingScale(("A",))
    with pytest.raises(ValueError):
        RatingScale(("A", "B", "A"))
    with pytest.raises(DataError):
        RatingScale.numbered(3).index("7")


# --- cohort estimator -----------------------------------------------------

def test_cohort_table1_first_row():
    counts = np.zeros((8, 9), dtype=int)
    counts[0, :2] = [9965, 35]
    obs = estimate_cohort(counts, "1990Q1")
    np.testing.assert_array_equal(obs.empirical[0, :2], [0.9965, 0.0035])
    assert obs.row_totals[0] == 10000
    assert obs.observed.tolist() == [True] + [False] * 7
    np.testing.assert_array_equal(obs.empirical[1:], 0.0)


def test_cohort_identity():
    counts = np.hstack([np.diag([5, 7, 11]), np.zeros((3, 1), dtype=int)])
    obs = estimate_cohort(counts)
    np.testing.assert_array_equal(obs.empirical, np.hstack([np.eye(3), np.zeros((3, 1))]))


def test_cohort_small_row():
    obs = estimate_cohort([[3, 5, 2], [0, 0, 0]])
    np.testing.assert_allclose(obs.empirical[0], [0.3, 0.5, 0.2], rtol=0, atol=1e-15)
    assert not obs.observed[1]


def test_cohort_errors():
    with pytest.raises(DataError):
        estimate_cohort(np.ones((3, 3), dtype=int))
    with pytest.raises(DataError):
        estimate_cohort([[1, -1, 0]])
    with pytest.raises(DataError):
        estimate_cohort([[1.5, 1, 0]])
    with pytest.raises(DataError):
        estimate_cohort(np.ones((2, 3), dtype=int), scale=RatingScale.numbered(4))


@settings(max_examples=100)
@given(arrays(np.int64, (4, 5), elements=st.integers(0, 10**6)))
def test_cohort_rows_stochastic(counts):
    obs = estimate_cohort(counts)
    tot = counts.sum(axis=1)
    np.testing.assert_array_equal(obs.counts.sum(axis=1), obs.row_totals)
    for i in range(4):
        if tot[i] > 0:
            assert abs(obs.empirical[i].sum() - 1.0) <= 1e-12
            # exact in rational arithmetic
            assert sum(Fraction(int(c), int(tot[i])) for c in counts[i]) == 1
        else:
            assert not obs.observed[i]
    assert np.all((obs.empirical >= 0) & (obs.empirical <= 1))


def test_observation_is_immutable():
    obs = estimate_cohort([[1, 1, 0], [0, 2, 1]])
    with pytest.raises(ValueError):
        obs.empirical[0, 0] = 0.3


def test_observation_shape_checks():
    with pytest.raises(DataError):
        TransitionObservation("t", np.ones((2, 2)), [1, 1])
    with pytest.raises(DataError):
        TransitionObservation("t", np.full((1, 2), 0.5), [1, 1])
    with pytest.raises(DataError):
        TransitionObservation("t", [[1.5, -0.5]], [1])


# --- panel and average ----------------------------------------------------

def test_panel_checks():
    a = TransitionObservation.from_matrix("a", [[0.5, 0.5]])
    with pytest.raises(DataError):
        TransitionPanel(RatingScale.numbered(2), ())
    with pytest.raises(DataError):
        TransitionPanel(RatingScale.numbered(2), (a, a))
    with pytest.raises(DataError):
        TransitionPanel(RatingScale.numbered(3), (a,))


def test_average_constant_panel(base_matrix):
    panel = panel_from_matrices([base_matrix] * 5)
    np.testing.assert_allclose(average_matrix(panel), base_matrix, atol=1e-15)


def test_average_two_periods():
    panel = panel_from_matrices([[[1.0, 0.0]], [[0.0, 1.0]]])
    np.testing.assert_array_equal(average_matrix(panel), [[0.5, 0.5]])


def test_average_three_rows_by_hand():
    rows = [[0.2, 0.3, 0.5], [0.6, 0.1, 0.3], [0.1, 0.8, 0.1]]
    panel = panel_from_matrices([[r, [0, 1, 0]] for r in rows])
    np.testing.assert_allclose(average_matrix(panel)[0], [0.3, 0.4, 0.3], atol=1e-15)


def test_average_skips_unobserved_periods():
    # a grade absent in one period is averaged over the periods that saw it
    panel = panel_from_matrices([[[0.2, 0.8, 0], [0, 0, 0]], [[0.4, 0.6, 0], [1.0, 0, 0]]])
    np.testing.assert_allclose(average_matrix(panel), [[0.3, 0.7, 0], [1.0, 0, 0]], atol=1e-15)


def test_average_never_observed_row_is_zero():
    panel = panel_from_matrices([[[0.2, 0.7, 0.1], [0, 0, 0]]] * 3)
    np.testing.assert_array_equal(average_matrix(panel)[1], [0, 0, 0])


def test_average_commutes_with_row_selection(rng):
    mats = rng.dirichlet(np.ones(5), size=(6, 4))
    full = average_matrix(panel_from_matrices(mats))
    for i in range(4):
        np.testing.assert_allclose(full[i], mats[:, i, :].mean(axis=0), atol=1e-15)
    np.testing.assert_allclose(full.sum(axis=1), 1.0, atol=1e-12)


# --- macro series ---------------------------------------------------------

def test_macro_series_align():
    m = MacroSeries(("a", "b"), ("p1", "p2", "p3"), np.arange(6.0).reshape(3, 2))
    np.testing.assert_array_equal(m.aligned(["p3", "p1"]), [[4, 5], [0, 1]])
    with pytest.raises(DataError):
        m.aligned(["p4"])


def test_macro_series_validation():
    with pytest.raises(DataError):
        MacroSeries(("a",), ("p1", "p2"), [1.0, np.nan])
    with pytest.raises(DataError):
        MacroSeries(("a", "b"), ("p1",), [1.0])
    with pytest.raises(DataError):
        MacroSeries(("a", "a"), ("p1",), [[1.0, 2.0]])


# --- rebinning ------------------------------------------------------------

@pytest.mark.parametrize("label,bin_", [("AAA", 1), ("BB-", 4), ("D", 9), ("A-", 1),
                                        ("BBB-", 2), ("B-", 6), ("CCC", 7), ("C", 8)])
def test_rebin_examples(label, bin_):
    assert rebin_label(label) == bin_


def test_rebin_map_total_monotone_surjective():
    assert len(AGENCY_REBIN) == 22
    bins = list(AGENCY_REBIN.values())
    assert sorted(set(bins)) == list(range(1, 10))
    assert bins == sorted(bins)
    assert RebinMap().n_bins == 9


def test_rebin_errors():
    with pytest.raises(DataError):
        rebin_label("NR")
    with pytest.raises(ValueError):
        RebinMap({"AAA": 2, "AA": 1})


# --- ingestion ------------------------------------------------------------

def test_table1_ingestion_reproduces_printed_entries(table1_file):
    scale, raw, obs = read_period_csv(table1_file, "1990Q1")
    assert scale.k == 9
    np.testing.assert_array_equal(raw, np.array(TABLE1))
    np.testing.assert_allclose(obs.empirical, np.array(TABLE1) / 100.0, rtol=0, atol=1e-15)
    sums = raw.sum(axis=1)
    assert np.all(np.abs(sums[:7] - 100.0) <= 0.05)
    assert obs.observed.tolist() == [True] * 7 + [False]


def test_table1_validation_report(table1_file):
    scale, _, obs = read_period_csv(table1_file, "1990Q1")
    rep = validate_panel(TransitionPanel(scale, (obs,)))
    assert rep.unobserved_rows == [("1990Q1", "8")]
    # 35 zeros in rows 1-7 plus the 9 of the empty row 8
    assert len(rep.zero_cells) == 44
    # row 2 sums to 100.01 percent: 1e-4 off, inside the 5e-4 tolerance
    assert rep.rounding_defects == []
    # row 1 never reaches grade 3 or worse, so its upper cumulative sums are 1
    assert ("1990Q1", "1") in rep.needs_clipping
    d = rep.to_dict()
    assert d["unobserved_rows"] == [{"period": "1990Q1", "from": "8"}]


def test_validation_clean_panel(base_matrix):
    rep = validate_panel(panel_from_matrices([base_matrix] * 3))
    assert rep.empty


def test_validation_rounding_defect():
    panel = panel_from_matrices([[[0.5, 0.4]]])
    rep = validate_panel(panel, ClipPolicy())
    assert rep.rounding_defects == [("1", "1", pytest.approx(0.9))]


@pytest.mark.parametrize("m,expected", [
    (np.array([[0.5, 0.5], [0.2, 0.8]]), "fraction"),
    (np.array([[50.0, 50.0], [0.0, 0.0]]), "percent"),
    (np.array([[3.0, 9.0], [1.0, 1.0]]), "counts"),
])
def test_detect_units(m, expected):
    assert detect_units(m) == expected


def test_detect_units_errors():
    with pytest.raises(DataError):
        detect_units(np.array([[0.3, 0.3]]))
    with pytest.raises(DataError):
        detect_units(np.zeros((2, 3)))
    with pytest.raises(DataError):
        detect_units(np.ones((1, 2)), "bananas")
    assert detect_units(np.ones((1, 2)), "counts") == "counts"


def test_read_period_counts():
    text = "from,A,B,D\nA,8,2,0\nB,1,6,3\n"
    scale, _, obs = read_period_csv(io.StringIO(text), "t1")
    assert scale.labels == ("A", "B", "D")
    np.testing.assert_allclose(obs.empirical, [[0.8, 0.2, 0], [0.1, 0.6, 0.3]])
    np.testing.assert_array_equal(obs.row_totals, [10, 10])


@pytest.mark.parametrize("text", [
    "grade,1,2\n1,1,0\n",
    "from,1,2,3\n1,1,0\n",
    "from,1,2,3\n3,1,0,0\n",
    "from,1,2,3\n1,1,0,0\n1,1,0,0\n",
    "from,1,2,3\n1,x,0,0\n",
    "from,1,2,3\n1,-1,2,0\n",
])
def test_read_period_errors(text):
    with pytest.raises(DataError):
        read_period_csv(io.StringIO(text), "t")


def test_read_period_scale_mismatch(table1_file):
    with pytest.raises(DataError):
        read_period_csv(table1_file, "t", scale=RatingScale.numbered(8))


def test_read_long_panel():
    text = ("period,from,to,count\n"
            "2001,1,1,9\n2001,1,3,1\n2001,2,2,4\n"
            "2000,10,10,1\n2000,1,1,5\n")
    # labels are sorted numerically even when 10 is seen first
    with pytest.raises(DataError):
        read_panel_long_csv(io.StringIO(text))  # "10" is the default grade and cannot have a row
    text = ("period,from,to,count\n"
            "2001,1,1,9\n2001,1,3,1\n2001,2,2,4\n2000,2,1,2\n2000,1,1,5\n")
    panel = read_panel_long_csv(io.StringIO(text))
    assert panel.periods == ["2001", "2000"]
    assert panel.scale.labels == ("1", "2", "3")
    np.testing.assert_allclose(panel.matrices()[0], [[0.9, 0, 0.1], [0, 1, 0]])
    np.testing.assert_array_equal(panel.row_totals()[1], [5, 2])


@pytest.mark.parametrize("text", [
    "period,from,to\n1,1,1\n",
    "period,from,to,count\n",
    "period,from,to,count\n1,1,2,1.5\n",
    "period,from,to,count\n1,1,2\n",
])
def test_read_long_errors(text):
    with pytest.raises(DataError):
        read_panel_long_csv(io.StringIO(text))


def test_read_macro():
    m = read_macro_csv(io.StringIO("period,vix,gdp\n1,20.5,2.0\n2,31,-1.5\n"))
    assert m.names == ("vix", "gdp")
    np.testing.assert_array_equal(m.values, [[20.5, 2.0], [31, -1.5]])


@pytest.mark.parametrize("text", [
    "date,vix\n1,2\n",
    "period,vix\n",
    "period,vix\n1,2\n1,3\n",
    "period,vix\n1,nan\n",
    "period,vix\n1,2,3\n",
])
def test_read_macro_errors(text):
    with pytest.raises(DataError):
        read_macro_csv(io.StringIO(text))
