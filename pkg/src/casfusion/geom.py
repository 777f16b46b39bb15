"""Point-set geometry: sampling, neighborhoods, Chamfer, visibility.

Distances are exact per-coordinate sums of squares and all nearest-neighbor
style ties resolve toward the lowest index, so every result is a pure function
of the coordinates.  Large neighbor queries take candidates from a k-d tree and
rerank them exactly; rows the candidates cannot certify get a wider candidate
set and finally brute force, so the answer always equals the brute-force one.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

_CHUNK = 256
# below this many query x reference pairs brute force beats building a tree
_TREE_MIN_PAIRS = 1 << 16
_TREE_MAX_DIM = 16
_TREE_SLACK = 4
_TREE_MAX_CAND = 256


def _as_points(p) -> np.ndarray:
    p = np.asarray(getattr(p, "data", p), dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"expected an m x dim array, got shape {p.shape}")
    return p


def sq_dists(a, b) -> np.ndarray:
    """Exact pairwise squared distances, accumulated one coordinate at a time."""
    a, b = _as_points(a), _as_points(b)
    out = np.empty((len(a), len(b)))
    tmp = np.empty((min(_CHUNK, len(a)), len(b)))
    for s in range(0, len(a), _CHUNK):
        e = min(s + _CHUNK, len(a))
        o, t = out[s:e], tmp[:e - s]
        np.subtract.outer(a[s:e, 0], b[:, 0], out=o)
        o *= o
        for k in range(1, a.shape[1]):
            np.subtract.outer(a[s:e, k], b[:, k], out=t)
            t *= t
            o += t
    return out


def farthest_point_sample(p, m: int, seed: int = 0) -> np.ndarray:
    """Greedy farthest point sampling starting from index ``seed % len(p)``."""
    p = _as_points(p)
    n = len(p)
    if not 1 <= m <= n:
        raise ValueError(f"cannot sample {m} points from {n}")
    cols = [np.ascontiguousarray(p[:, k]) for k in range(p.shape[1])]
    idx = np.empty(m, dtype=np.intp)
    best = np.full(n, np.inf)
    d = np.empty(n)
    t = np.empty(n)
    cur = seed % n
    for i in range(m):
        idx[i] = cur
        np.subtract(cols[0], cols[0][cur], out=d)
        d *= d
        for c in cols[1:]:
            np.subtract(c, c[cur], out=t)
            t *= t
            d += t
        np.minimum(best, d, out=best)
        cur = int(np.argmax(best))
    return idx


def _smallest_k(d: np.ndarray, n: int) -> np.ndarray:
    """Indices of the ``n`` smallest entries per row, ordered by (value, index)."""
    if n == d.shape[1]:
        return np.argsort(d, axis=1, kind="stable")
    part = np.argpartition(d, n - 1, axis=1)[:, :n]
    vals = np.take_along_axis(d, part, axis=1)
    kth = vals.max(axis=1)
    ties = np.flatnonzero(np.count_nonzero(d <= kth[:, None], axis=1) > n)
    if len(ties):
        # rows where the boundary value repeats: keep the lowest indices among equals
        sub, bound = d[ties], kth[ties, None]
        less = sub < bound
        eq = sub == bound
        need = n - less.sum(axis=1, keepdims=True)
        keep = less | (eq & (np.cumsum(eq, axis=1) <= need))
        part[ties] = np.nonzero(keep)[1].reshape(len(ties), n)
        vals[ties] = np.take_along_axis(sub, part[ties], axis=1)
    order = np.lexsort((part, vals), axis=1)
    return np.take_along_axis(part, order, axis=1)


def _knn_brute(query: np.ndarray, reference: np.ndarray, n: int) -> np.ndarray:
    out = np.empty((len(query), n), dtype=np.intp)
    for s in range(0, len(query), _CHUNK):
        out[s:s + _CHUNK] = _smallest_k(sq_dists(query[s:s + _CHUNK], reference), n)
    return out


def _exact_rows(query: np.ndarray, reference: np.ndarray, cand: np.ndarray) -> np.ndarray:
    """Squared distances from each query row to its candidate rows, same
    summation order as :func:`sq_dists`."""
    diff = query[:, None, 0] - reference[cand, 0]
    d = diff * diff
    for k in range(1, query.shape[1]):
        np.subtract(query[:, None, k], reference[cand, k], out=diff)
        diff *= diff
        d += diff
    return d


def _knn_tree(query: np.ndarray, reference: np.ndarray, n: int) -> np.ndarray:
    tree = cKDTree(reference)
    out = np.empty((len(query), n), dtype=np.intp)
    rows = np.arange(len(query))
    c = n + _TREE_SLACK
    while len(rows):
        if c >= len(reference) or c > _TREE_MAX_CAND:
            out[rows] = _knn_brute(query[rows], reference, n)
            break
        _, cand = tree.query(query[rows], k=c)
        cand = cand.astype(np.intp, copy=False)
        d = _exact_rows(query[rows], reference, cand)
        order = np.lexsort((cand, d), axis=1)
        cand = np.take_along_axis(cand, order, axis=1)
        d = np.take_along_axis(d, order, axis=1)
        # every reference outside the candidates lies at least as far as the last
        # candidate; a clear gap after the n-th distance certifies the row
        tol = 1e-9 * (1.0 + d[:, -1])
        ok = d[:, n - 1] + tol < d[:, -1]
        out[rows[ok]] = cand[ok, :n]
        # duplicated points tie at the boundary; widen the candidate set for those
        rows = rows[~ok]
        c *= 4
    return out


def knn(query, reference, n: int) -> np.ndarray:
    """For each query row, the ``n`` nearest reference indices (nondecreasing distance)."""
    query, reference = _as_points(query), _as_points(reference)
    if not 1 <= n <= len(reference):
        raise ValueError(f"knn needs 1 <= n <= {len(reference)}, got n={n}")
    if (len(query) * len(reference) < _TREE_MIN_PAIRS or query.shape[1] > _TREE_MAX_DIM
            or n + _TREE_SLACK > len(reference)):
        return _knn_brute(query, reference, n)
    return _knn_tree(query, reference, n)


def group_local(p, center_indices, n: int) -> np.ndarray:
    """Neighborhoods of the given centers expressed relative to each center (k x n x 3)."""
    p = _as_points(p)
    centers = p[np.asarray(center_indices, dtype=np.intp)]
    nbr = knn(centers, p, n)
    return p[nbr] - centers[:, None, :]


@dataclass(frozen=True)
class Correspondence:
    a_to_b: np.ndarray
    b_to_a: np.ndarray


def nearest(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Nearest index in ``b`` for every row of ``a`` and the squared distance to it."""
    idx, dist, _, _ = nearest_both(a, b)
    return idx, dist


def nearest_both(a, b) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Nearest maps in both directions.

    Returns (a_to_b, squared distances of a, b_to_a, squared distances of b).
    """
    a, b = _as_points(a), _as_points(b)
    if len(a) * len(b) < _TREE_MIN_PAIRS or a.shape[1] > _TREE_MAX_DIM:
        d = sq_dists(a, b)
        ab = np.argmin(d, axis=1)
        db = d.min(axis=0)
        ba = np.argmax(d == db, axis=0)
        return ab, d[np.arange(len(a)), ab], ba, db
    ab = knn(a, b, 1)[:, 0]
    ba = knn(b, a, 1)[:, 0]
    return ab, _exact_rows(a, b, ab[:, None])[:, 0], ba, _exact_rows(b, a, ba[:, None])[:, 0]


def correspondence(a, b) -> Correspondence:
    ab, _, ba, _ = nearest_both(a, b)
    return Correspondence(ab, ba)


def chamfer(a, b, mode: str = "L1") -> tuple[float, Correspondence]:
    """Chamfer distance: sum of the two directed mean nearest distances.

    ``L1`` averages Euclidean distances, ``L2`` averages squared distances.
    """
    a, b = _as_points(a), _as_points(b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer needs two nonempty point sets")
    ab, dab, ba, dba = nearest_both(a, b)
    if mode == "L1":
        value = np.sqrt(dab).mean() + np.sqrt(dba).mean()
    elif mode == "L2":
        value = dab.mean() + dba.mean()
    else:
        raise ValueError(f"unknown chamfer mode {mode!r}")
    return float(value), Correspondence(ab, ba)


@dataclass(frozen=True)
class Visibility:
    indices: np.ndarray
    degenerate: bool = False


def hpr_visible(p, viewpoint, radius_factor: float = 1000.0) -> Visibility:
    """Hidden point removal by spherical flipping and a convex hull.

    Points whose flipped image is a hull vertex of (flipped points + viewpoint)
    are reported visible.  Degenerate inputs return every point with
    ``degenerate=True``.
    """
    p = _as_points(p)
    n = len(p)
    if n < 4:
        return Visibility(np.arange(n), degenerate=n > 1)
    q = p - np.asarray(viewpoint, dtype=np.float64)
    r = np.linalg.norm(q, axis=1)
    if np.any(r == 0):
        raise ValueError("viewpoint coincides with a point")
    radius = radius_factor * r.max()
    flipped = q + 2.0 * (radius - r)[:, None] * q / r[:, None]
    try:
        hull = ConvexHull(np.vstack([flipped, np.zeros(3)]), qhull_options="Qt")
    except QhullError:
        warnings.warn("degenerate point set for visibility; treating all points as visible")
        return Visibility(np.arange(n), degenerate=True)
    verts = hull.vertices
    return Visibility(np.sort(verts[verts < n]))


def uniform_downsample(p, labels, m: int, seed: int, replace_excess: bool = False):
    """Seeded uniform sample of ``m`` rows without replacement, labels kept aligned.

    With ``replace_excess`` a request larger than the set takes every row once
    and draws the excess with replacement.
    """
    p = _as_points(p)
    labels = np.asarray(labels)
    n = len(p)
    rng = np.random.default_rng(seed)
    if m <= n:
        idx = rng.permutation(n)[:m]
    elif replace_excess:
        idx = np.concatenate([rng.permutation(n), rng.integers(0, n, size=m - n)])
    else:
        raise ValueError(f"cannot downsample {n} points to {m}")
    return p[idx], labels[idx]
