"""Pure-numpy fallback for the hot kernels.

Same contracts as the compiled twins in ``creditscan._ext``; the active
implementation is chosen once at import time by ``creditscan._backend``.
"""

import numpy as np

BACKEND = "python"


def demean_sweeps(data, weights, codes_list, sizes, scales, tol, max_iter):
    """Alternating weighted within-group demeaning, in place.

    Sweeps over the grouping dimensions, each time removing the weighted
    group mean from every column of ``data``.  Group means are computed
    from positive-weight rows but subtracted from all rows.  Convergence
    is reached when the largest absolute weighted group mean seen in a
    full sweep, scaled by ``scales`` per column, is at most ``tol``.

    Parameters
    ----------
    data : (n, m) float64 array, modified in place
    weights : (n,) nonnegative float64 array
    codes_list : list of (n,) integer code arrays, one per dimension
    sizes : number of groups per dimension
    scales : (m,) positive per-column scale for the convergence test
    tol, max_iter : convergence tolerance and sweep budget

    Returns
    -------
    (iterations, max_scaled_mean) for the last sweep performed.
    """
    n, m = data.shape
    wsums = []
    for codes, size in zip(codes_list, sizes):
        ws = np.bincount(codes, weights=weights, minlength=size)
        wsums.append(np.where(ws > 0.0, ws, 1.0))

    delta = np.inf
    for it in range(1, max_iter + 1):
        delta = 0.0
        for codes, size, ws in zip(codes_list, sizes, wsums):
            for c in range(m):
                sums = np.bincount(codes, weights=weights * data[:, c], minlength=size)
                means = sums / ws
                col_delta = np.max(np.abs(means)) / scales[c] if size else 0.0
                if col_delta > delta:
                    delta = col_delta
                data[:, c] -= means[codes]
        if delta <= tol:
            return it, delta
    return max_iter, delta


def cluster_score_sums(scores, codes, n_clusters):
    """Sum score rows within clusters.

    scores : (n, k) float64 array of per-row scores (weight * residual * x)
    codes : (n,) integer cluster codes in [0, n_clusters)
    Returns the (n_clusters, k) matrix of per-cluster score sums.
    """
    n, k = scores.shape
    out = np.empty((n_clusters, k))
    for c in range(k):
        out[:, c] = np.bincount(codes, weights=scores[:, c], minlength=n_clusters)
    return out
