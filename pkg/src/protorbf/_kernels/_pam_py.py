"""Numpy fallback for PAM (BUILD + SWAP) medoid selection."""

import numpy as np

# A swap is accepted only if it lowers the cost by more than this relative
# tolerance, so float noise cannot drive the search into a cycle.
REL_TOL = 1e-12


def _nearest(D, medoids):
    """d1/n1 = distance and ordinal of the nearest medoid, d2 the runner-up.

    Ties resolve to the earliest medoid in list order, matching a sequential
    scan with a strict ``<`` comparison.
    """
    M = D[:, medoids]
    n1 = np.argmin(M, axis=1)
    rows = np.arange(D.shape[0])
    d1 = M[rows, n1].copy()
    if len(medoids) > 1:
        M = M.copy()
        M[rows, n1] = np.inf
        d2 = M.min(axis=1)
    else:
        d2 = np.full(D.shape[0], np.inf)
    return d1, d2, n1


def pam(D, k):
    """Run PAM over a symmetric distance matrix; returns medoid row indices.

    BUILD greedily seeds the medoids, SWAP then applies strictly improving
    single exchanges until a 1-swap local optimum is reached.  Equal-gain
    candidates resolve to the lowest row index.
    """
    D = np.ascontiguousarray(D, dtype=np.float64)
    n = D.shape[0]

    # BUILD
    medoids = [int(np.argmin(D.sum(axis=1)))]
    d1 = D[medoids[0]].copy()
    while len(medoids) < k:
        gains = np.maximum(d1[None, :] - D, 0.0).sum(axis=1)
        gains[medoids] = -1.0
        best = int(np.argmax(gains))
        medoids.append(best)
        d1 = np.minimum(d1, D[best])

    if k == n:
        return np.array(medoids, dtype=np.int64)

    # SWAP
    is_medoid = np.zeros(n, dtype=bool)
    is_medoid[medoids] = True
    while True:
        d1, d2, n1 = _nearest(D, medoids)
        cost = d1.sum()
        tol = REL_TOL * max(1.0, cost)
        candidates = np.flatnonzero(~is_medoid)
        deltas = np.empty((candidates.size, k))
        for row, h in enumerate(candidates):
            col = D[:, h]
            base = np.minimum(col, d1) - d1
            diff = np.minimum(col, d2) - d1 - base
            deltas[row] = base.sum() + np.bincount(n1, weights=diff, minlength=k)
        flat = int(np.argmin(deltas))
        if deltas.ravel()[flat] >= -tol:
            break
        h = int(candidates[flat // k])
        m = flat % k
        is_medoid[medoids[m]] = False
        is_medoid[h] = True
        medoids[m] = h
    return np.array(medoids, dtype=np.int64)
