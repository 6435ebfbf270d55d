"""Brute-force basis enumeration for small LPs (test oracle)."""

import itertools

import numpy as np


def random_lp(rng, max_vars=8, max_rows=12):
    """``min c x`` s.t. ``A x <= b``, ``x >= 0``; the last row caps ``sum(x)``.

    Roughly one instance in five is infeasible.
    """
    n = int(rng.integers(1, max_vars + 1))
    m = int(rng.integers(1, max_rows + 1))
    A = rng.normal(size=(m - 1, n))
    b = rng.normal(size=m - 1) + rng.uniform(0.0, 2.0)
    A = np.vstack([A, np.ones(n)])
    b = np.append(b, rng.uniform(1.0, 10.0))
    c = rng.normal(size=n)
    return c, A, b


def enumerate_bases(c, A, b, tol=1e-9):
    """Optimal value over all basic solutions of ``A x <= b, x >= 0``; ``None`` if infeasible."""
    m, n = A.shape
    H = np.vstack([A, -np.eye(n)])
    h = np.concatenate([b, np.zeros(n)])
    best = None
    idx = np.array(list(itertools.combinations(range(m + n), n)))
    M = H[idx]
    ok = np.abs(np.linalg.det(M)) > 1e-12
    x = np.linalg.solve(M[ok], h[idx[ok]][..., None])[..., 0]
    feas = np.all(x @ H.T <= h + tol * (1 + np.abs(h).max()), axis=1)
    if feas.any():
        best = float((x[feas] @ c).min())
    return best
