"""Pre-imputation variable screening.

Spearman rank correlations among non-categorical variables, chi-square
independence tests for categorical predictors against the ordinal response,
and collinearity flags that drive merge/drop decisions. Screening runs on
the raw (incomplete) table with pairwise-complete deletion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .dataset import Column, DataTable, Nominal, Numeric, Ordinal


@dataclass(frozen=True)
class CorrelationMatrix:
    names: tuple[str, ...]
    r: np.ndarray
    # pairs whose coefficient could not be computed, with the reason
    failures: tuple[tuple[str, str, str], ...] = ()

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float)
        p = len(self.names)
        if r.shape != (p, p):
            raise ValueError("correlation matrix shape does not match names")
        if not np.array_equal(np.diag(r), np.ones(p)):
            raise ValueError("correlation diagonal must be exactly 1")
        finite = np.isfinite(r)
        if not np.array_equal(finite, finite.T) or not np.array_equal(r[finite & finite.T], r.T[finite & finite.T]):
            raise ValueError("correlation matrix must be symmetric")
        if np.any(np.abs(r[finite]) > 1 + 1e-12):
            raise ValueError("correlation entries must lie in [-1, 1]")
        object.__setattr__(self, "r", r)

    def entry(self, a: str, b: str) -> float:
        i, j = self.names.index(a), self.names.index(b)
        return float(self.r[i, j])


@dataclass(frozen=True)
class ChiSquareResult:
    statistic: float
    degrees_of_freedom: int
    p_value: float
    low_expected_cells: int

    def __post_init__(self):
        if self.statistic < 0 or self.degrees_of_freedom < 1:
            raise ValueError("invalid chi-square result")
        if not 0.0 <= self.p_value <= 1.0:
            raise ValueError("p-value outside [0, 1]")


def spearman_rho(x, y) -> float:
    """Spearman correlation with average ranks for ties.

    Rows where either value is missing (NaN) are dropped pairwise; at least
    3 complete pairs are required. Ranks receive the mean of the positions
    they span, then an ordinary Pearson correlation is taken on the ranks.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError("sequences must have equal length")
    keep = np.isfinite(x) & np.isfinite(y)
    x, y = x[keep], y[keep]
    if x.size < 3:
        raise ValueError(f"need at least 3 complete pairs, got {x.size}")
    rx = stats.rankdata(x, method="average")
    ry = stats.rankdata(y, method="average")
    sx = rx - rx.mean()
    sy = ry - ry.mean()
    nx = float(np.sqrt(sx @ sx))
    ny = float(np.sqrt(sy @ sy))
    if nx == 0.0 or ny == 0.0:
        raise ValueError("zero variance in ranked sequence")
    r = float((sx @ sy) / (nx * ny))
    return min(1.0, max(-1.0, r))


def _screen_values(col: Column) -> np.ndarray:
    if isinstance(col.kind, Nominal):
        raise ValueError(f"column {col.name!r} is nominal; correlations need numeric or ordinal data")
    return np.where(col.mask, np.nan, col.values)


def correlation_matrix(t: DataTable, variables) -> CorrelationMatrix:
    """Pairwise Spearman correlations over pairwise-complete observations.

    Pairs that cannot be computed (too few complete pairs, zero variance)
    are reported in ``failures`` and left as NaN.
    """
    variables = tuple(variables)
    data = [_screen_values(t.column(name)) for name in variables]
    p = len(variables)
    r = np.full((p, p), np.nan)
    np.fill_diagonal(r, 1.0)
    failures = []
    for i in range(p):
        for j in range(i + 1, p):
            try:
                rij = spearman_rho(data[i], data[j])
            except ValueError as exc:
                failures.append((variables[i], variables[j], str(exc)))
                continue
            r[i, j] = r[j, i] = rij
    return CorrelationMatrix(variables, r, tuple(failures))


def chi_square_test(predictor: Column, response: Column) -> ChiSquareResult:
    """Pearson chi-square test of independence on a contingency table.

    Pairwise-complete rows only; levels with no observations are dropped
    before forming the table. The p-value uses the asymptotic chi-square
    reference; ``low_expected_cells`` counts expected cells below 5 so the
    caller can judge whether that reference is trustworthy.
    """
    if len(predictor) != len(response):
        raise ValueError("columns must cover the same rows")
    keep = ~(predictor.mask | response.mask)
    pv = predictor.values[keep]
    rv = response.values[keep]

    def codes(col, values):
        if isinstance(col.kind, Nominal):
            levels = list(col.kind.levels)
            idx = np.array([levels.index(v) for v in values])
            k = len(levels)
        elif isinstance(col.kind, Ordinal):
            levels = list(col.kind.levels)
            idx = np.searchsorted(np.asarray(levels, dtype=float), values)
            k = len(levels)
        else:
            uniq, idx = np.unique(values, return_inverse=True)
            k = len(uniq)
        return idx, k

    pi, pk = codes(predictor, pv)
    ri, rk = codes(response, rv)
    table = np.zeros((pk, rk))
    np.add.at(table, (pi, ri), 1.0)
    table = table[table.sum(axis=1) > 0][:, table.sum(axis=0) > 0]
    if table.shape[0] < 2 or table.shape[1] < 2:
        raise ValueError("degenerate contingency table: a variable has a single observed level")

    row_sums = table.sum(axis=1, keepdims=True)
    col_sums = table.sum(axis=0, keepdims=True)
    expected = row_sums * col_sums / table.sum()
    statistic = float(((table - expected) ** 2 / expected).sum())
    df = (table.shape[0] - 1) * (table.shape[1] - 1)
    p_value = float(stats.chi2.sf(statistic, df))
    low = int((expected < 5).sum())
    return ChiSquareResult(statistic, df, p_value, low)


def collinearity_screen(m: CorrelationMatrix, threshold: float = 0.7):
    """All unordered variable pairs with |r| >= threshold, strongest first.

    The caller decides what to do with flagged pairs (merge into a derived
    variable, drop one, or keep both); this only reports them.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must lie in (0, 1]")
    flagged = []
    p = len(m.names)
    for i in range(p):
        for j in range(i + 1, p):
            rij = m.r[i, j]
            if np.isfinite(rij) and abs(rij) >= threshold:
                flagged.append((m.names[i], m.names[j], float(rij)))
    flagged.sort(key=lambda item: (-abs(item[2]), item[0], item[1]))
    return flagged
