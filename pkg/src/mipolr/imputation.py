"""Multiple imputation for incomplete survey tables.

The imputation model is a multivariate normal fitted by EM on the
incomplete data. Parameter uncertainty is propagated the bootstrap way:
each of the m replicates re-fits EM on a bootstrap resample of the rows,
then draws every missing cell of the original table from the conditional
normal given that replicate's parameters (the EM-with-bootstrap, "EMB",
construction used by Amelia; Honaker & King 2010). Drawn values are
coerced back to their declared column kinds.

Also provides Little's (1988) chi-square diagnostic for the
missing-completely-at-random assumption.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.linalg import cho_factor, cho_solve

from .dataset import Column, DataTable, Nominal, Numeric, Ordinal

DEFAULT_EM_TOL = 1e-8
DEFAULT_EM_MAX_ITER = 1000


class EmError(RuntimeError):
    """EM could not produce usable multivariate-normal parameters."""


@dataclass(frozen=True)
class MvnParams:
    """Multivariate-normal parameters estimated by EM on incomplete data."""

    names: tuple[str, ...]
    mean: np.ndarray
    covariance: np.ndarray
    log_likelihood: float
    iterations: int
    converged: bool
    loglik_history: tuple[float, ...] = ()

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=float)
        if np.abs(cov - cov.T).max() > 1e-10:
            raise ValueError("covariance must be symmetric within 1e-10")
        if np.linalg.eigvalsh(cov).min() < -1e-8:
            raise ValueError("covariance has a materially negative eigenvalue")


@dataclass(frozen=True)
class McarTestResult:
    statistic: float
    degrees_of_freedom: int
    p_value: float

    def __post_init__(self):
        if self.statistic < 0 or not 0.0 <= self.p_value <= 1.0:
            raise ValueError("invalid MCAR test result")


@dataclass(frozen=True)
class ImputedSet:
    """m completed copies of one table, plus how they were produced."""

    datasets: tuple[DataTable, ...]
    m: int
    master_seed: int
    em_diagnostics: tuple[MvnParams, ...] = ()

    def __post_init__(self):
        if self.m < 2 or len(self.datasets) != self.m:
            raise ValueError("an imputed set needs m >= 2 completed datasets")


# ------------------------------------------------------------------ encoding


def _matrix_for_model(t: DataTable, exclude=(), nominal: str = "onehot"):
    """Flatten a table into a float matrix with NaN for missing cells.

    Nominal columns become indicator blocks: the full one-hot block for the
    imputation model ("onehot"), or baseline-omitted indicators ("baseline")
    where a singular block would break plain maximum likelihood.
    Returns (matrix, labels, spans) where spans maps each source column to
    its [start, stop) slice of the matrix.
    """
    exclude = set(exclude)
    blocks, labels, spans = [], [], []
    for col in t.columns:
        if col.name in exclude:
            continue
        start = len(labels)
        if isinstance(col.kind, Nominal):
            levels = col.kind.levels if nominal == "onehot" else tuple(
                lv for lv in col.kind.levels if lv != col.kind.baseline
            )
            block = np.full((t.n_rows, len(levels)), np.nan)
            present = ~col.mask
            for j, lv in enumerate(levels):
                block[present, j] = (col.values[present] == lv).astype(float)
            blocks.append(block)
            labels.extend(f"{col.name}={lv}" for lv in levels)
        else:
            blocks.append(np.where(col.mask, np.nan, col.values)[:, None])
            labels.append(col.name)
        spans.append((col.name, start, len(labels)))
    if not blocks:
        raise ValueError("no columns left to model")
    return np.hstack(blocks), tuple(labels), tuple(spans)


def _shrink(cov: np.ndarray, ridge: float, n: int) -> np.ndarray:
    """Ridge prior: ridge pseudo-observations of per-column variance.

    Equivalent to averaging the covariance with its own diagonal, so the
    diagonal is preserved and off-diagonal terms shrink by n/(n+ridge).
    """
    if ridge <= 0:
        return cov
    out = cov * (n / (n + ridge))
    np.fill_diagonal(out, np.diag(cov))
    return out


def _resolve_ridge(ridge, n: int) -> float:
    if ridge is None:
        return 0.005 * n
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    return float(ridge)


# ------------------------------------------------------------------- EM core


def _patterns(observed: np.ndarray):
    """Group row indices by missingness pattern."""
    groups: dict[bytes, list[int]] = {}
    packed = np.packbits(observed, axis=1)
    for i in range(observed.shape[0]):
        groups.setdefault(packed[i].tobytes(), []).append(i)
    return [(observed[rows[0]], np.asarray(rows)) for rows in groups.values()]


def _e_step(X, observed, patterns, mu, sigma):
    """Expected completed rows, conditional-covariance mass, and the
    observed-data log-likelihood under (mu, sigma)."""
    n, p = X.shape
    xhat = np.empty_like(X)
    cond_mass = np.zeros((p, p))
    loglik = 0.0
    log2pi = np.log(2.0 * np.pi)
    for obs, rows in patterns:
        miss = ~obs
        if not obs.any():
            xhat[rows] = mu
            cond_mass += len(rows) * sigma
            continue
        o = np.flatnonzero(obs)
        mm = np.flatnonzero(miss)
        dev = X[np.ix_(rows, o)] - mu[o]
        try:
            cho = cho_factor(sigma[np.ix_(o, o)], lower=True)
        except np.linalg.LinAlgError as exc:
            raise EmError(f"singular observed-block covariance: {exc}") from None
        logdet = 2.0 * np.log(np.diag(cho[0])).sum()
        solved = cho_solve(cho, dev.T)
        qforms = np.einsum("ij,ji->i", dev, solved)
        loglik += -0.5 * (len(rows) * (len(o) * log2pi + logdet) + qforms.sum())
        xhat[np.ix_(rows, o)] = X[np.ix_(rows, o)]
        if mm.size:
            gain = cho_solve(cho, sigma[np.ix_(o, mm)])  # Sigma_oo^-1 Sigma_om
            xhat[np.ix_(rows, mm)] = mu[mm] + dev @ gain
            cond = sigma[np.ix_(mm, mm)] - sigma[np.ix_(mm, o)] @ gain
            cond_mass[np.ix_(mm, mm)] += len(rows) * cond
    return xhat, cond_mass, float(loglik)


def _m_step(xhat, cond_mass, ridge):
    n = xhat.shape[0]
    mu = xhat.mean(axis=0)
    dev = xhat - mu
    sigma = (dev.T @ dev + cond_mass) / n
    sigma = _shrink(sigma, ridge, n)
    return mu, 0.5 * (sigma + sigma.T)


def _init_params(X, observed, ridge):
    n, p = X.shape
    mu = np.nanmean(X, axis=0)
    centered = np.where(observed, X - mu, 0.0)
    pair_counts = observed.T.astype(float) @ observed.astype(float)
    sigma = (centered.T @ centered) / np.maximum(pair_counts, 1.0)
    sigma = _shrink(sigma, ridge, n)
    sigma = 0.5 * (sigma + sigma.T)
    # available-case covariance can be indefinite; nudge only when it is
    eigmin = float(np.linalg.eigvalsh(sigma).min())
    floor = 1e-10 * max(1.0, float(np.diag(sigma).max()))
    if eigmin < floor:
        sigma = sigma + (floor - eigmin) * np.eye(p)
    return mu, sigma


def _em_mvn(X, names, ridge, tol, max_iter):
    X = np.asarray(X, dtype=float)
    observed = ~np.isnan(X)
    if not observed.any(axis=0).all():
        dead = int(np.flatnonzero(~observed.any(axis=0))[0])
        raise EmError(f"column {names[dead]!r} has no observed values")
    patterns = _patterns(observed)
    mu, sigma = _init_params(X, observed, ridge)
    history = []
    converged = False
    iterations = 0
    for _ in range(max_iter + 1):
        xhat, cond_mass, loglik = _e_step(X, observed, patterns, mu, sigma)
        if history:
            rel = (loglik - history[-1]) / max(abs(history[-1]), 1.0)
            if rel < tol:
                history.append(loglik)
                converged = True
                break
        history.append(loglik)
        if iterations == max_iter:
            break
        mu, sigma = _m_step(xhat, cond_mass, ridge)
        iterations += 1
    return MvnParams(
        names=tuple(names),
        mean=mu,
        covariance=sigma,
        log_likelihood=history[-1],
        iterations=iterations,
        converged=converged,
        loglik_history=tuple(history),
    )


def em_fit(t: DataTable, ridge=None, tol: float = DEFAULT_EM_TOL,
           max_iter: int = DEFAULT_EM_MAX_ITER) -> MvnParams:
    """Fit a multivariate normal to an incomplete table by EM.

    Nominal columns enter as full one-hot blocks, which are singular
    without a ridge; ``ridge=None`` resolves to the default prior of
    0.5% of n pseudo-observations pulling the covariance toward its
    diagonal. Pass ``ridge=0`` for the plain maximum-likelihood fit.

    The E-step replaces missing cells by their conditional means and adds
    the conditional covariance to the second-moment totals; the M-step is
    the complete-data MLE (divisor n) plus the ridge. The observed-data
    log-likelihood is tracked each sweep and, at ``ridge=0``, never
    decreases; iteration stops when its relative change drops below
    ``tol``.
    """
    X, labels, _ = _matrix_for_model(t)
    ridge = _resolve_ridge(ridge, t.n_rows)
    return _em_mvn(X, labels, ridge, tol, max_iter)


# ------------------------------------------------------------------ sampling


def conditional_draw(params: MvnParams, row, rng: np.random.Generator) -> np.ndarray:
    """Complete one partially observed vector by a conditional-normal draw.

    Missing coordinates (NaN) are drawn from N(mu_m|o, Sigma_m|o); observed
    coordinates pass through untouched. A fully missing row draws from the
    unconditional distribution.
    """
    row = np.asarray(row, dtype=float)
    out = row.copy()
    miss = np.isnan(row)
    if not miss.any():
        return out
    obs = ~miss
    mu, sigma = params.mean, params.covariance
    mm = np.flatnonzero(miss)
    if obs.any():
        o = np.flatnonzero(obs)
        try:
            cho = cho_factor(sigma[np.ix_(o, o)], lower=True)
        except np.linalg.LinAlgError:
            raise EmError("singular observed-block covariance; increase the ridge") from None
        gain = cho_solve(cho, sigma[np.ix_(o, mm)])
        mean = mu[mm] + (row[o] - mu[o]) @ gain
        cond = sigma[np.ix_(mm, mm)] - sigma[np.ix_(mm, o)] @ gain
    else:
        mean = mu[mm]
        cond = sigma[np.ix_(mm, mm)]
    cond = 0.5 * (cond + cond.T)
    try:
        chol = np.linalg.cholesky(cond + 1e-12 * np.trace(cond) / len(mm) * np.eye(len(mm)))
    except np.linalg.LinAlgError:
        raise EmError("singular conditional covariance; increase the ridge") from None
    out[mm] = mean + chol @ rng.standard_normal(len(mm))
    return out


def coerce_imputed(value, kind):
    """Map a continuous imputed value back to a valid cell for its kind.

    Numeric values pass through; ordinal values snap to the nearest
    declared level (which also clamps out-of-range draws); a nominal dummy
    block maps to the level with the largest indicator.
    """
    if isinstance(kind, Numeric):
        return float(value)
    if isinstance(kind, Ordinal):
        levels = np.asarray(kind.levels, dtype=float)
        return float(levels[np.argmin(np.abs(levels - float(value)))])
    block = np.asarray(value, dtype=float)
    if block.shape != (len(kind.levels),):
        raise ValueError("nominal coercion expects one indicator per level")
    return kind.levels[int(np.argmax(block))]


# ----------------------------------------------------------------- EMB loop


def _bootstrap_em(X, labels, rng, ridge, tol, max_iter):
    n = X.shape[0]
    failure = "no attempt made"
    for _ in range(3):
        idx = rng.integers(0, n, size=n)
        resample = X[idx]
        if np.isnan(resample).all(axis=0).any():
            failure = "bootstrap resample lost every observation of a column"
            continue
        try:
            params = _em_mvn(resample, labels, ridge, tol, max_iter)
        except EmError as exc:
            failure = str(exc)
            continue
        if params.converged:
            return params
        failure = f"EM stopped at max_iter={max_iter} without converging"
    raise EmError(f"replicate failed after 3 bootstrap attempts: {failure}")


def _rebuild_columns(t: DataTable, filled: np.ndarray, spans, exclude, coerce):
    columns = []
    span_by_name = {name: (a, b) for name, a, b in spans}
    for col in t.columns:
        if col.name in exclude or not col.mask.any():
            columns.append(col)
            continue
        a, b = span_by_name[col.name]
        values = np.array(col.values, copy=True)
        kind = col.kind
        if isinstance(col.kind, Nominal):
            for i in np.flatnonzero(col.mask):
                values[i] = coerce_imputed(filled[i, a:b], col.kind)
        elif isinstance(col.kind, Ordinal) and coerce == "continuous":
            kind = Numeric()
            values[col.mask] = filled[col.mask, a]
        else:
            for i in np.flatnonzero(col.mask):
                values[i] = coerce_imputed(filled[i, a], col.kind)
        columns.append(Column(col.name, kind, values, np.zeros(t.n_rows, dtype=bool)))
    return DataTable(columns)


def emb_impute(t: DataTable, m: int, master_seed: int, ridge=None,
               tol: float = DEFAULT_EM_TOL, max_iter: int = DEFAULT_EM_MAX_ITER,
               exclude=(), coerce: str = "round", jobs: int = 1) -> ImputedSet:
    """Produce m completed copies of a table by bootstrap-EM imputation.

    Replicate k draws a bootstrap resample of the rows seeded from
    ``master_seed + k``, fits EM to it, then fills every incomplete row of
    the original table from the conditional normal under those parameters.
    Replicates are independent given their derived seeds, so results are
    bit-identical whether they run sequentially or on ``jobs`` threads.

    ``exclude`` columns (typically the response) are carried through
    untouched and must already be complete. ``coerce`` controls ordinal
    fills: "round" snaps to the nearest level, "continuous" keeps the raw
    draw and relabels the completed column numeric.
    """
    if m < 2:
        raise ValueError("m must be at least 2")
    if coerce not in ("round", "continuous"):
        raise ValueError("coerce must be 'round' or 'continuous'")
    exclude = tuple(exclude)
    for name in exclude:
        if t.mask(name).any():
            raise ValueError(f"excluded column {name!r} has missing cells; drop or impute them first")
    X, labels, spans = _matrix_for_model(t, exclude=exclude)
    if not np.isnan(X).any():
        return ImputedSet((t,) * m, m, master_seed, ())

    ridge = _resolve_ridge(ridge, t.n_rows)
    incomplete = np.flatnonzero(np.isnan(X).any(axis=1))

    def replicate(k: int):
        rng = np.random.default_rng(master_seed + k)
        params = _bootstrap_em(X, labels, rng, ridge, tol, max_iter)
        filled = X.copy()
        for i in incomplete:
            filled[i] = conditional_draw(params, X[i], rng)
        return _rebuild_columns(t, filled, spans, exclude, coerce), params

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(replicate, range(1, m + 1)))
    else:
        results = [replicate(k) for k in range(1, m + 1)]
    datasets = tuple(ds for ds, _ in results)
    diagnostics = tuple(params for _, params in results)
    return ImputedSet(datasets, m, master_seed, diagnostics)


# ------------------------------------------------------------------ MCAR test


def mcar_test(t: DataTable, tol: float = DEFAULT_EM_TOL,
              max_iter: int = DEFAULT_EM_MAX_ITER) -> McarTestResult:
    """Little's chi-square test of missing-completely-at-random.

    Compares each missingness pattern's observed-variable means against
    the EM estimates; under MCAR the statistic is asymptotically
    chi-square with sum(p_j) - p degrees of freedom. Nominal columns enter
    as baseline-omitted indicators. A high p-value is consistent with
    MCAR; the test cannot confirm it.
    """
    X, labels, _ = _matrix_for_model(t, nominal="baseline")
    observed = ~np.isnan(X)
    patterns = _patterns(observed)
    informative = [(obs, rows) for obs, rows in patterns if obs.any()]
    if len({obs.tobytes() for obs, _ in patterns}) < 2:
        raise ValueError("MCAR test undefined: table has a single missingness pattern")
    params = _em_mvn(X, labels, ridge=0.0, tol=tol, max_iter=max_iter)
    mu, sigma = params.mean, params.covariance
    statistic = 0.0
    df = -X.shape[1]
    for obs, rows in informative:
        o = np.flatnonzero(obs)
        df += len(o)
        dev = X[np.ix_(rows, o)].mean(axis=0) - mu[o]
        try:
            cho = cho_factor(sigma[np.ix_(o, o)], lower=True)
        except np.linalg.LinAlgError as exc:
            raise EmError(f"singular covariance block in MCAR test: {exc}") from None
        statistic += len(rows) * float(dev @ cho_solve(cho, dev))
    if df < 1:
        raise ValueError("MCAR test undefined: no surplus pattern information")
    return McarTestResult(float(statistic), int(df), float(stats.chi2.sf(statistic, df)))
