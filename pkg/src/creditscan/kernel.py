"""Weighted least squares, fixed-effect absorption, 2SLS, and clustered errors.

This is the shared engine under every regression in the package.  Weights are
analytic/population weights: they scale both the point estimates and the meat
of every sandwich estimator.  All functions are pure; inputs are never
mutated and results are safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg
from scipy import stats

from creditscan import _backend
from creditscan.errors import (
    ConvergenceError,
    EmptySampleError,
    EstimationError,
    RankDeficientError,
    TooFewClustersError,
    UnderidentifiedError,
)

PIVOT_RTOL = 1e-10  # pivot magnitude below this fraction of the largest -> collinear
DEMEAN_TOL = 1e-10
DEMEAN_MAX_ITER = 10_000


def _as_float_matrix(values, name="values"):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional")
    return arr


@dataclass(frozen=True)
class DesignMatrix:
    """Dense weighted design: named columns plus per-row nonnegative weights."""

    names: tuple[str, ...]
    values: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        values = _as_float_matrix(self.values)
        if values.shape[1] != len(self.names):
            raise ValueError("number of names must match number of columns")
        if values.shape[1] < 1:
            raise ValueError("design needs at least one column")
        if not np.all(np.isfinite(values)):
            raise ValueError("design contains NaN or Inf entries")
        if self.weights is None:
            weights = np.ones(values.shape[0])
        else:
            weights = np.asarray(self.weights, dtype=np.float64)
        if weights.shape != (values.shape[0],):
            raise ValueError("weights must be one per row")
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise ValueError("weights must be finite and nonnegative")
        if not np.any(weights > 0):
            raise ValueError("at least one weight must be strictly positive")
        object.__setattr__(self, "names", tuple(str(n) for n in self.names))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_columns(cls, columns: Mapping[str, Sequence[float]], weights=None):
        names = tuple(columns)
        values = np.column_stack([np.asarray(columns[n], dtype=np.float64) for n in names])
        return cls(names, values, weights)

    @property
    def n_rows(self):
        return self.values.shape[0]

    @property
    def n_columns(self):
        return self.values.shape[1]

    def select(self, names):
        idx = [self.names.index(n) for n in names]
        return DesignMatrix(tuple(names), self.values[:, idx], self.weights)


@dataclass(frozen=True)
class GroupLabels:
    """Integer-coded group labels for one or more dimensions."""

    dims: tuple[str, ...]
    codes: tuple[np.ndarray, ...]
    sizes: tuple[int, ...]
    levels: tuple[np.ndarray, ...]

    @classmethod
    def from_arrays(cls, **dims):
        if not dims:
            raise ValueError("at least one grouping dimension is required")
        names, codes, sizes, levels = [], [], [], []
        n_rows = None
        for name, labels in dims.items():
            arr = np.asarray(labels)
            if arr.ndim != 1:
                raise ValueError(f"labels for {name!r} must be one-dimensional")
            if n_rows is None:
                n_rows = arr.shape[0]
            elif arr.shape[0] != n_rows:
                raise ValueError("all dimensions must label the same number of rows")
            if arr.dtype.kind == "f" and np.isnan(arr).any():
                raise ValueError(f"dimension {name!r} has unlabeled rows (NaN)")
            if arr.dtype.kind == "O" and any(v is None for v in arr):
                raise ValueError(f"dimension {name!r} has unlabeled rows (None)")
            lev, code = np.unique(arr, return_inverse=True)
            names.append(str(name))
            codes.append(code.astype(np.int64))
            sizes.append(int(lev.shape[0]))
            levels.append(lev)
        return cls(tuple(names), tuple(codes), tuple(sizes), tuple(levels))

    @property
    def n_rows(self):
        return self.codes[0].shape[0]

    @property
    def n_dims(self):
        return len(self.dims)


@dataclass(frozen=True)
class ClusterSpec:
    """One cluster label per row."""

    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "labels", np.asarray(self.labels))
        if self.labels.ndim != 1:
            raise ValueError("cluster labels must be one-dimensional")


@dataclass(frozen=True)
class _FitContext:
    """Per-row fit state needed to recompute sandwich covariances."""

    design: np.ndarray
    residuals: np.ndarray
    weights: np.ndarray
    bread: np.ndarray
    n_eff: int
    k_total: int


@dataclass
class RegressionResult:
    """Coefficients, covariance, and diagnostics for one fitted model."""

    names: tuple[str, ...]
    params: np.ndarray
    vcov: np.ndarray
    se: np.ndarray
    n_obs: int
    n_clusters: int
    r_squared: float
    dof_residual: int
    dof_inference: int
    vcov_type: str
    diagnostics: dict = field(default_factory=dict)
    _ctx: _FitContext | None = field(default=None, repr=False)

    @property
    def coefficients(self):
        return dict(zip(self.names, (float(v) for v in self.params)))

    @property
    def standard_errors(self):
        return dict(zip(self.names, (float(v) for v in self.se)))

    def __getitem__(self, name):
        return float(self.params[self.names.index(name)])

    def se_of(self, name):
        return float(self.se[self.names.index(name)])

    @property
    def t_stats(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.se > 0, self.params / self.se, np.nan)

    @property
    def p_values(self):
        t = np.abs(self.t_stats)
        return 2.0 * stats.t.sf(t, df=max(self.dof_inference, 1))

    def conf_int(self, level=0.95):
        """Symmetric t confidence intervals at the given level."""
        crit = stats.t.ppf(0.5 + level / 2.0, df=max(self.dof_inference, 1))
        lo = self.params - crit * self.se
        hi = self.params + crit * self.se
        return np.column_stack([lo, hi])

    def to_json_dict(self):
        """Serializable form: coefficients, se, vcov, n_obs, n_clusters, r2."""
        return {
            "coefficients": self.coefficients,
            "se": self.standard_errors,
            "vcov": [[float(v) for v in row] for row in self.vcov],
            "n_obs": int(self.n_obs),
            "n_clusters": int(self.n_clusters),
            "r2": float(self.r_squared),
        }


def _pivoted_qr_solve(xw, yw, names, on_collinear):
    """Least-squares solve via pivoted QR with collinearity detection.

    Returns (beta, bread, kept_index) where kept_index is None when all
    columns survive, else the indices of retained columns.
    """
    q, r, piv = scipy.linalg.qr(xw, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    largest = diag[0] if diag.size else 0.0
    if largest <= 0.0:
        rank = 0
    else:
        rank = int(np.sum(diag >= PIVOT_RTOL * largest))
    k = xw.shape[1]
    if rank < k:
        dropped = [names[j] for j in piv[rank:]]
        if on_collinear == "raise":
            raise RankDeficientError(dropped)
        kept = np.sort(piv[:rank])
        if kept.size == 0:
            raise RankDeficientError(dropped)
        beta, bread, _ = _pivoted_qr_solve(xw[:, kept], yw, [names[j] for j in kept], "raise")
        return beta, bread, kept
    qty = q.T @ yw
    beta_piv = scipy.linalg.solve_triangular(r, qty)
    rinv = scipy.linalg.solve_triangular(r, np.eye(k))
    bread_piv = rinv @ rinv.T
    beta = np.empty(k)
    beta[piv] = beta_piv
    bread = np.empty((k, k))
    bread[np.ix_(piv, piv)] = bread_piv
    return beta, bread, None


def _has_intercept(values, weights):
    pos = weights > 0
    if not np.any(pos):
        return False
    sub = values[pos]
    for j in range(sub.shape[1]):
        col = sub[:, j]
        if col[0] != 0.0 and np.all(col == col[0]):
            return True
    return False


def _r_squared(y, residuals, weights, centered):
    pos = weights > 0
    w = weights[pos]
    e = residuals[pos]
    yy = y[pos]
    ssr = float(np.sum(w * e * e))
    if centered:
        ybar = float(np.sum(w * yy) / np.sum(w))
        tss = float(np.sum(w * (yy - ybar) ** 2))
    else:
        tss = float(np.sum(w * yy * yy))
    if tss <= 0.0:
        return 1.0 if ssr <= 0.0 else 0.0
    return 1.0 - ssr / tss


def wls_fit(X: DesignMatrix, y, *, vcov="HC1", center_tss=None, extra_dof=0,
            on_collinear="raise"):
    """Weighted least squares via pivoted QR on the weighted design.

    Minimizes sum(w_i * (y_i - x_i @ b)**2).  The default covariance is the
    HC1 heteroskedasticity-robust sandwich with scores w_i * e_i * x_i;
    ``vcov="classical"`` gives the homoskedastic estimator.

    ``vcov="known"`` treats the weights as known inverse error variances
    and returns (X'WX)^-1 with no residual-based scale, the right choice
    when each row's variance is known a priori (e.g. log bin counts).

    ``extra_dof`` counts parameters absorbed outside the design (fixed
    effects), entering every degrees-of-freedom correction.  ``center_tss``
    controls whether R-squared uses the weighted-centered total sum of
    squares; by default it is centered when the design has a constant
    column (demeaned data should pass ``center_tss=True``).

    Raises RankDeficientError naming the collinear columns (or drops them
    when ``on_collinear="drop"``) and EmptySampleError when no row has
    positive weight.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (X.n_rows,):
        raise ValueError("y must have one value per design row")
    if not np.all(np.isfinite(y)):
        raise ValueError("y contains NaN or Inf entries")
    if vcov not in ("HC1", "classical", "known"):
        raise ValueError("vcov must be 'HC1', 'classical', or 'known'")

    weights = X.weights
    pos = weights > 0
    n_eff = int(np.count_nonzero(pos))
    if n_eff == 0:
        raise EmptySampleError("no observations with positive weight")

    sqrtw = np.sqrt(weights[pos])
    xw = X.values[pos] * sqrtw[:, None]
    yw = y[pos] * sqrtw

    names = X.names
    beta, bread, kept = _pivoted_qr_solve(xw, yw, names, on_collinear)
    values = X.values
    dropped = []
    if kept is not None:
        dropped = [n for i, n in enumerate(names) if i not in set(kept.tolist())]
        names = tuple(names[i] for i in kept)
        values = values[:, kept]

    k = len(names)
    k_total = k + int(extra_dof)
    residuals = y - values @ beta
    dof_residual = n_eff - k_total

    if center_tss is None:
        center_tss = _has_intercept(values, weights)
    r2 = _r_squared(y, residuals, weights, center_tss)

    ctx = _FitContext(values, residuals, weights, bread, n_eff, k_total)
    if vcov == "HC1":
        cov = _hc1_vcov(ctx)
    elif vcov == "classical":
        cov = _classical_vcov(ctx)
    else:
        cov = bread.copy()
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))

    diagnostics = {"vcov": vcov}
    if dropped:
        diagnostics["dropped_columns"] = dropped
    return RegressionResult(
        names=names,
        params=beta,
        vcov=cov,
        se=se,
        n_obs=n_eff,
        n_clusters=0,
        r_squared=r2,
        dof_residual=dof_residual,
        dof_inference=max(dof_residual, 1),
        vcov_type=vcov,
        diagnostics=diagnostics,
        _ctx=ctx,
    )


def _hc1_vcov(ctx):
    scores = ctx.design * (ctx.weights * ctx.residuals)[:, None]
    meat = scores.T @ scores
    scale = ctx.n_eff / max(ctx.n_eff - ctx.k_total, 1)
    cov = scale * (ctx.bread @ meat @ ctx.bread)
    return (cov + cov.T) / 2.0


def _classical_vcov(ctx):
    pos = ctx.weights > 0
    ssr = float(np.sum(ctx.weights[pos] * ctx.residuals[pos] ** 2))
    sigma2 = ssr / max(ctx.n_eff - ctx.k_total, 1)
    return sigma2 * ctx.bread


def cluster_robust_vcov(result: RegressionResult, clusters) -> np.ndarray:
    """CR1 cluster-robust covariance from a fitted model's stored scores.

    Sandwich with per-cluster score sums s_g = sum_{i in g} w_i x_i e_i and
    small-sample scale G/(G-1) * (N-1)/(N-K).  Requires at least two
    clusters with positive weight.
    """
    ctx = result._ctx
    if ctx is None:
        raise EstimationError("result does not carry per-row scores; refit to cluster")
    labels = clusters.labels if isinstance(clusters, ClusterSpec) else np.asarray(clusters)
    if labels.shape[0] != ctx.design.shape[0]:
        raise ValueError("cluster labels must cover every design row")

    pos = ctx.weights > 0
    _, codes = np.unique(labels[pos], return_inverse=True)
    n_clusters = int(codes.max()) + 1 if codes.size else 0
    if n_clusters < 2:
        raise TooFewClustersError(
            f"cluster-robust covariance needs >= 2 clusters, got {n_clusters}"
        )

    scores = ctx.design[pos] * (ctx.weights[pos] * ctx.residuals[pos])[:, None]
    sums = _backend.cluster_score_sums(
        np.ascontiguousarray(scores), codes.astype(np.int64), n_clusters
    )
    meat = sums.T @ sums
    n, k = ctx.n_eff, ctx.k_total
    scale = (n_clusters / (n_clusters - 1.0)) * ((n - 1.0) / max(n - k, 1))
    cov = scale * (ctx.bread @ meat @ ctx.bread)
    return (cov + cov.T) / 2.0


def with_cluster_vcov(result: RegressionResult, clusters) -> RegressionResult:
    """Copy of ``result`` with CR1 covariance and G-1 inference dof."""
    labels = clusters.labels if isinstance(clusters, ClusterSpec) else np.asarray(clusters)
    cov = cluster_robust_vcov(result, labels)
    pos = result._ctx.weights > 0
    n_clusters = int(np.unique(labels[pos]).shape[0])
    return replace(
        result,
        vcov=cov,
        se=np.sqrt(np.clip(np.diag(cov), 0.0, None)),
        n_clusters=n_clusters,
        dof_inference=n_clusters - 1,
        vcov_type="CR1",
        diagnostics={**result.diagnostics, "vcov": "CR1"},
    )


def _connected_components(codes_a, size_a, codes_b, size_b):
    """Components of the bipartite group graph (union-find over observed pairs)."""
    parent = np.arange(size_a + size_b)

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    pairs = np.unique(codes_a.astype(np.int64) * size_b + codes_b.astype(np.int64))
    for p in pairs:
        a = int(p // size_b)
        b = size_a + int(p % size_b)
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra
    roots = {find(int(c)) for c in range(size_a + size_b)}
    return len(roots)


def absorbed_dof(groups: GroupLabels) -> int:
    """Implied dummy columns removed by absorbing ``groups``.

    One-way: the number of groups.  Two-way: G1 + G2 - (number of connected
    components of the bipartite group graph).  Higher-way uses the usual
    G1 + sum(Gd - 1) approximation.
    """
    sizes = groups.sizes
    if groups.n_dims == 1:
        return sizes[0]
    if groups.n_dims == 2:
        comps = _connected_components(groups.codes[0], sizes[0], groups.codes[1], sizes[1])
        return sizes[0] + sizes[1] - comps
    return sizes[0] + sum(s - 1 for s in sizes[1:])


def absorb_fixed_effects(X: DesignMatrix, y, groups: GroupLabels, *,
                         tol=DEMEAN_TOL, max_iter=DEMEAN_MAX_ITER):
    """Remove weighted group means from X and y in every grouping dimension.

    Alternating projections over the dimensions of ``groups`` until the
    largest weighted group mean (relative to each column's initial weighted
    RMS, floored at 1) is at most ``tol``.  Fitting on the returned data
    reproduces the slope coefficients of the explicit-dummy regression.

    Returns ``(X_demeaned, y_demeaned, absorbed_dof)``; the dof count is the
    number of implied dummy columns removed.  Raises ConvergenceError with
    the achieved residual when ``max_iter`` sweeps are not enough.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (X.n_rows,):
        raise ValueError("y must have one value per design row")
    if groups.n_rows != X.n_rows:
        raise ValueError("groups must label every design row")

    data = np.ascontiguousarray(np.column_stack([y, X.values]))
    weights = np.ascontiguousarray(X.weights)
    wsum = float(np.sum(weights))
    rms = np.sqrt((weights @ (data * data)) / wsum)
    scales = np.ascontiguousarray(np.maximum(1.0, rms))

    codes = [np.ascontiguousarray(c) for c in groups.codes]
    iterations, resid = _backend.demean_sweeps(
        data, weights, codes, list(groups.sizes), scales, float(tol), int(max_iter)
    )
    if resid > tol:
        raise ConvergenceError(resid, iterations, tol)

    x_out = DesignMatrix(X.names, data[:, 1:].copy(), X.weights)
    return x_out, data[:, 0].copy(), absorbed_dof(groups)


def _coerce_named(block, label):
    """Accept a DesignMatrix or a name->column mapping; return (names, values)."""
    if isinstance(block, DesignMatrix):
        return block.names, block.values
    names = tuple(block)
    if not names:
        raise ValueError(f"{label} must contain at least one column")
    values = np.column_stack([np.asarray(block[n], dtype=np.float64) for n in names])
    return names, values


def tsls_fit(y, exog: DesignMatrix, endog, instruments, *, clusters=None,
             vcov="HC1", center_tss=None, extra_dof=0):
    """Two-stage least squares with robust or clustered covariance.

    ``endog`` and ``instruments`` are name->column mappings (or
    DesignMatrix); weights come from ``exog``.  Instruments are excluded
    from the structural equation.  Residuals use the actual endogenous
    values, and the sandwich bread uses the projected design, the standard
    2SLS covariance.  The first-stage F statistic for the excluded
    instruments is reported per endogenous column in diagnostics.
    """
    endog_names, endog_values = _coerce_named(endog, "endog")
    z_names, z_values = _coerce_named(instruments, "instruments")
    if len(z_names) < len(endog_names):
        raise UnderidentifiedError(
            f"{len(endog_names)} endogenous columns but only {len(z_names)} instruments"
        )
    overlap = set(endog_names) & set(exog.names)
    if overlap:
        raise ValueError(f"columns {sorted(overlap)} appear as both exogenous and endogenous")

    y = np.asarray(y, dtype=np.float64)
    weights = exog.weights

    # First stage: each endogenous column on [exog | Z].
    fs_design = DesignMatrix(
        exog.names + z_names, np.column_stack([exog.values, z_values]), weights
    )
    fitted = np.empty_like(endog_values)
    first_stage_f = {}
    for j, name in enumerate(endog_names):
        try:
            fs = wls_fit(fs_design, endog_values[:, j], vcov=vcov, extra_dof=extra_dof)
        except RankDeficientError as err:
            raise RankDeficientError(
                err.columns, f"first stage for {name!r} is rank deficient: {err}"
            ) from err
        if clusters is not None:
            fs = with_cluster_vcov(fs, clusters)
        fitted[:, j] = fs_design.values @ fs.params
        stat, _, _ = wald_test(fs, z_names)
        first_stage_f[name] = float(stat)

    # Second stage on the projected design.
    names2 = exog.names + endog_names
    x2 = np.column_stack([exog.values, fitted])
    pos = weights > 0
    n_eff = int(np.count_nonzero(pos))
    if n_eff == 0:
        raise EmptySampleError("no observations with positive weight")
    sqrtw = np.sqrt(weights[pos])
    beta, bread, _ = _pivoted_qr_solve(x2[pos] * sqrtw[:, None], y[pos] * sqrtw,
                                       names2, "raise")

    # Structural residuals with the actual endogenous values.
    x_actual = np.column_stack([exog.values, endog_values])
    residuals = y - x_actual @ beta
    k_total = len(names2) + int(extra_dof)
    dof_residual = n_eff - k_total

    if center_tss is None:
        center_tss = _has_intercept(exog.values, weights)
    r2 = _r_squared(y, residuals, weights, center_tss)

    ctx = _FitContext(x2, residuals, weights, bread, n_eff, k_total)
    cov = _hc1_vcov(ctx) if vcov == "HC1" else _classical_vcov(ctx)
    result = RegressionResult(
        names=names2,
        params=beta,
        vcov=cov,
        se=np.sqrt(np.clip(np.diag(cov), 0.0, None)),
        n_obs=n_eff,
        n_clusters=0,
        r_squared=r2,
        dof_residual=dof_residual,
        dof_inference=max(dof_residual, 1),
        vcov_type=vcov,
        diagnostics={
            "vcov": vcov,
            "estimator": "2sls",
            "endogenous": list(endog_names),
            "instruments": list(z_names),
            "first_stage_F": first_stage_f,
        },
        _ctx=ctx,
    )
    if clusters is not None:
        result = with_cluster_vcov(result, clusters)
        result.diagnostics.update(
            estimator="2sls",
            endogenous=list(endog_names),
            instruments=list(z_names),
            first_stage_F=first_stage_f,
        )
    return result


def wald_test(result: RegressionResult, restriction, value=0.0):
    """F test of linear restrictions on a fitted model.

    ``restriction`` is either a list of coefficient names (jointly zero), a
    single name, or an explicit restriction matrix R testing R @ b = value.
    Returns (F statistic, p-value, numerator df); the denominator df is the
    model's inference dof (G-1 when clustered).
    """
    if isinstance(restriction, str):
        restriction = [restriction]
    if isinstance(restriction, (list, tuple)) and all(isinstance(r, str) for r in restriction):
        rows = np.zeros((len(restriction), len(result.names)))
        for i, name in enumerate(restriction):
            rows[i, result.names.index(name)] = 1.0
    else:
        rows = np.atleast_2d(np.asarray(restriction, dtype=np.float64))
        if rows.shape[1] != len(result.names):
            raise ValueError("restriction matrix must have one column per coefficient")
    r_val = np.broadcast_to(np.asarray(value, dtype=np.float64), (rows.shape[0],))

    diff = rows @ result.params - r_val
    rvr = rows @ result.vcov @ rows.T
    try:
        solved = np.linalg.solve(rvr, diff)
    except np.linalg.LinAlgError as err:
        raise EstimationError("singular restriction covariance in Wald test") from err
    q = rows.shape[0]
    f_stat = float(diff @ solved) / q
    dof2 = max(result.dof_inference, 1)
    p_value = float(stats.f.sf(f_stat, q, dof2))
    return f_stat, p_value, q


def difference_test(result: RegressionResult, name_a, name_b):
    """Wald test of equality between two coefficients."""
    rows = np.zeros((1, len(result.names)))
    rows[0, result.names.index(name_a)] = 1.0
    rows[0, result.names.index(name_b)] = -1.0
    return wald_test(result, rows)
