import math

import numpy as np
import pytest

from mipolr.dataset import Column, Nominal, Numeric, Ordinal
from mipolr.screening import (
    ChiSquareResult,
    CorrelationMatrix,
    chi_square_test,
    collinearity_screen,
    correlation_matrix,
    spearman_rho,
)
from tests.test_dataset import LIKERT, make_table


# ----------------------------------------------------------- naive oracles


def naive_average_ranks(v):
    """Assign average ranks explicitly: sort, group ties, share positions."""
    n = len(v)
    order = sorted(range(n), key=lambda i: v[i])
    ranks = [0.0] * n
    i = 0
    while i < n:
        j = i
        while j + 1 < n and v[order[j + 1]] == v[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def naive_pearson(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    num = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    da = math.sqrt(sum((x - ma) ** 2 for x in a))
    db = math.sqrt(sum((y - mb) ** 2 for y in b))
    return num / (da * db)


def naive_chi_square(table):
    rows = len(table)
    cols = len(table[0])
    row_sums = [sum(row) for row in table]
    col_sums = [sum(table[i][j] for i in range(rows)) for j in range(cols)]
    total = sum(row_sums)
    stat = 0.0
    for i in range(rows):
        for j in range(cols):
            expected = row_sums[i] * col_sums[j] / total
            stat += (table[i][j] - expected) ** 2 / expected
    return stat


# ------------------------------------------------------------ spearman_rho


def test_spearman_perfect_monotone():
    assert spearman_rho([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0, abs=1e-15)
    assert spearman_rho([1, 2, 3], [30, 20, 10]) == pytest.approx(-1.0, abs=1e-15)


def test_spearman_ties_match_naive_oracle():
    x = [1, 2, 2, 4]
    y = [1, 3, 2, 4]
    expect = naive_pearson(naive_average_ranks(x), naive_average_ranks(y))
    assert expect == pytest.approx(0.9486832980505138, rel=1e-12)  # frozen from the oracle
    assert spearman_rho(x, y) == pytest.approx(expect, rel=1e-12)


def test_spearman_random_ties_match_naive_oracle():
    rng = np.random.default_rng(5)
    for _ in range(50):
        n = int(rng.integers(4, 30))
        x = rng.integers(1, 6, n).astype(float)
        y = rng.integers(1, 6, n).astype(float)
        try:
            got = spearman_rho(x, y)
        except ValueError:
            continue  # constant draw
        expect = naive_pearson(naive_average_ranks(list(x)), naive_average_ranks(list(y)))
        assert got == pytest.approx(expect, abs=1e-12)


def test_spearman_pairwise_deletion():
    x = [1, np.nan, 3, 4, 5]
    y = [2, 9, 6, np.nan, 10]
    # complete pairs: (1,2), (3,6), (5,10)
    assert spearman_rho(x, y) == pytest.approx(1.0)


def test_spearman_errors():
    with pytest.raises(ValueError, match="3 complete pairs"):
        spearman_rho([1, 2], [3, 4])
    with pytest.raises(ValueError, match="zero variance"):
        spearman_rho([1, 1, 1], [1, 2, 3])


def test_spearman_symmetry_and_rank_invariance():
    rng = np.random.default_rng(19)
    for _ in range(25):
        x = rng.normal(size=20)
        y = rng.normal(size=20)
        r = spearman_rho(x, y)
        assert spearman_rho(y, x) == pytest.approx(r, abs=1e-15)
        # strictly increasing transforms leave ranks, hence r, unchanged
        assert spearman_rho(np.exp(x), y) == pytest.approx(r, abs=1e-15)
        assert spearman_rho(x, 3.0 * y + 1.0) == pytest.approx(r, abs=1e-15)
        assert abs(r) <= 1.0


def test_spearman_extremes_iff_strictly_monotone():
    rng = np.random.default_rng(23)
    x = rng.permutation(40).astype(float)
    assert spearman_rho(x, np.cbrt(x)) == pytest.approx(1.0)
    y = x.copy()
    y[0], y[1] = y[1], y[0]  # break monotonicity
    assert abs(spearman_rho(x, y)) < 1.0


# ------------------------------------------------------- correlation_matrix


def test_correlation_matrix_identical_columns():
    t = make_table([(1, 1), (2, 2), (3, 3)], [("a", Numeric()), ("b", Numeric())])
    m = correlation_matrix(t, ["a", "b"])
    assert m.entry("a", "b") == pytest.approx(1.0)
    assert np.array_equal(np.diag(m.r), np.ones(2))


def test_correlation_matrix_independent_columns_near_zero():
    rng = np.random.default_rng(101)
    n = 10000
    rows = list(zip(rng.normal(size=n), rng.normal(size=n)))
    t = make_table(rows, [("a", Numeric()), ("b", Numeric())])
    m = correlation_matrix(t, ["a", "b"])
    # null sampling sd is ~1/sqrt(n) = 0.01; 0.05 is a 5-sigma bound
    assert abs(m.entry("a", "b")) < 0.05


def test_correlation_matrix_reports_failures():
    t = make_table([(1, 1), (2, 1), (3, 1)], [("a", Numeric()), ("c", Numeric())])
    m = correlation_matrix(t, ["a", "c"])
    assert math.isnan(m.entry("a", "c"))
    assert m.failures[0][:2] == ("a", "c")


def test_correlation_matrix_rejects_nominal():
    t = make_table([("x", 1)], [("s", Nominal(("x", "y"), "x")), ("a", Numeric())])
    with pytest.raises(ValueError, match="nominal"):
        correlation_matrix(t, ["s", "a"])


# ---------------------------------------------------------- chi_square_test


def nominal_col(name, labels, levels):
    mask = np.array([v is None for v in labels])
    return Column(name, Nominal(tuple(levels), levels[0]), np.array(labels, object), mask)


def ordinal_col(name, vals, levels=(1, 2, 3, 4, 5)):
    mask = np.array([v is None for v in vals])
    arr = np.array([np.nan if v is None else float(v) for v in vals])
    return Column(name, Ordinal(tuple(levels)), arr, mask)


def from_counts(counts):
    """Expand a 2x2 count table into predictor/response columns."""
    labels, vals = [], []
    for i, row in enumerate(counts):
        for j, c in enumerate(row):
            labels += [["a", "b"][i]] * c
            vals += [j + 1] * c
    return nominal_col("p", labels, ["a", "b"]), ordinal_col("r", vals, (1, 2))


def test_chi_square_perfect_independence():
    p, r = from_counts([[10, 10], [10, 10]])
    res = chi_square_test(p, r)
    assert res.statistic == pytest.approx(0.0, abs=1e-12)
    assert res.p_value == pytest.approx(1.0)
    assert res.degrees_of_freedom == 1


def test_chi_square_hand_oracle():
    counts = [[20, 5], [5, 20]]
    p, r = from_counts(counts)
    res = chi_square_test(p, r)
    assert naive_chi_square(counts) == pytest.approx(18.0, rel=1e-12)  # frozen from the oracle
    assert res.statistic == pytest.approx(18.0, rel=1e-12)
    assert res.degrees_of_freedom == 1
    assert res.p_value == pytest.approx(2.2090496998585475e-05, rel=1e-9)
    assert res.low_expected_cells == 0


def test_chi_square_permutation_invariance():
    rng = np.random.default_rng(31)
    labels = ["a", "b", "c"]
    draw = rng.integers(0, 3, 300)
    resp = rng.integers(1, 5, 300)
    p1 = nominal_col("p", [labels[d] for d in draw], labels)
    r1 = ordinal_col("r", list(resp), (1, 2, 3, 4))
    base = chi_square_test(p1, r1)
    # permute predictor level identities
    perm = {"a": "c", "b": "a", "c": "b"}
    p2 = nominal_col("p", [perm[labels[d]] for d in draw], labels)
    alt = chi_square_test(p2, r1)
    assert alt.statistic == pytest.approx(base.statistic, rel=1e-12)
    assert alt.degrees_of_freedom == base.degrees_of_freedom


def test_chi_square_low_expected_warning_count():
    p, r = from_counts([[2, 1], [1, 2]])
    res = chi_square_test(p, r)
    assert res.low_expected_cells == 4


def test_chi_square_degenerate():
    p = nominal_col("p", ["a", "a", "a"], ["a", "b"])
    r = ordinal_col("r", [1, 2, 1], (1, 2))
    with pytest.raises(ValueError, match="degenerate"):
        chi_square_test(p, r)


def test_chi_square_null_calibration_monte_carlo():
    # independent predictor/response: rejection rate at 0.05 should be ~5%
    rng = np.random.default_rng(404)
    n, reps = 5000, 400
    rejections = 0
    labels = ["a", "b", "c", "d"]
    for _ in range(reps):
        p = nominal_col("p", [labels[i] for i in rng.integers(0, 4, n)], labels)
        r = ordinal_col("r", list(rng.integers(1, 6, n)))
        if chi_square_test(p, r).p_value < 0.05:
            rejections += 1
    rate = rejections / reps
    # binomial 3-sigma band around 0.05 with 400 draws
    assert 0.017 <= rate <= 0.083


# ------------------------------------------------------- collinearity_screen


def cm(names, entries):
    p = len(names)
    r = np.eye(p)
    for (i, j), v in entries.items():
        r[i, j] = r[j, i] = v
    return CorrelationMatrix(tuple(names), r)


def test_collinearity_flags_and_order():
    m = cm(["h", "w", "x"], {(0, 1): 0.76, (0, 2): -0.81, (1, 2): 0.3})
    flags = collinearity_screen(m, 0.7)
    assert [(a, b) for a, b, _ in flags] == [("h", "x"), ("h", "w")]


def test_collinearity_threshold_one():
    m = cm(["a", "b"], {(0, 1): 0.999})
    assert collinearity_screen(m, 1.0) == []
    m2 = cm(["a", "b"], {(0, 1): 1.0})
    assert len(collinearity_screen(m2, 1.0)) == 1


def test_collinearity_identity_matrix_empty():
    m = cm(["a", "b", "c"], {})
    assert collinearity_screen(m, 0.5) == []


def test_collinearity_monotone_in_threshold():
    rng = np.random.default_rng(13)
    entries = {(i, j): float(rng.uniform(-1, 1)) for i in range(5) for j in range(i + 1, 5)}
    m = cm(list("abcde"), entries)
    prev = None
    for threshold in (0.2, 0.4, 0.6, 0.8, 0.99):
        got = {(a, b) for a, b, _ in collinearity_screen(m, threshold)}
        if prev is not None:
            assert got <= prev
        prev = got


def test_collinearity_threshold_validation():
    m = cm(["a", "b"], {})
    with pytest.raises(ValueError):
        collinearity_screen(m, 0.0)
    with pytest.raises(ValueError):
        collinearity_screen(m, 1.5)


# ----------------------------------------------------------------- invariants


def test_correlation_matrix_validation():
    with pytest.raises(ValueError, match="diagonal"):
        CorrelationMatrix(("a",), np.array([[0.9]]))
    bad = np.array([[1.0, 0.5], [0.4, 1.0]])
    with pytest.raises(ValueError, match="symmetric"):
        CorrelationMatrix(("a", "b"), bad)


def test_chi_square_result_validation():
    with pytest.raises(ValueError):
        ChiSquareResult(-1.0, 1, 0.5, 0)
    with pytest.raises(ValueError):
        ChiSquareResult(1.0, 1, 1.5, 0)
