"""Poisson-disk sampling: parametric samples in the unit square and patch centers on a cloud.

Both samplers run the same greedy dart throw over a fixed candidate order:
a candidate is accepted iff no accepted point lies strictly closer than the
radius. Accepted sets are therefore separated (pairwise distance >= radius)
and maximal over the candidates (every rejected candidate has an accepted
point closer than the radius).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud


@dataclass
class ParamSample:
    points: np.ndarray  # (n, 2), strictly inside (0, 1)^2
    radius: float
    candidates: np.ndarray  # the dart pool, in throw order

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class CenterSet:
    indices: np.ndarray
    radius: float


def patch_seed(seed: int, patch_id: int, stream: int = 0) -> int:
    """Independent, reproducible seed for one patch (``stream`` separates uses within a patch)."""
    return int(np.random.SeedSequence([int(seed), int(patch_id), int(stream)]).generate_state(1)[0])


class _DartBoard:
    """Candidates in throw order plus their neighbour lists up to ``max_radius``."""

    def __init__(self, candidates: np.ndarray, max_radius: float):
        self.candidates = candidates
        self.max_radius = max_radius
        tree = cKDTree(candidates)
        dm = tree.sparse_distance_matrix(tree, max_radius, output_type="coo_matrix").tocsr()
        dm.sort_indices()
        self._indptr = dm.indptr
        self._indices = dm.indices
        # zero distances (self pairs, duplicates) are kept as explicit entries
        self._data = dm.data

    def throw(self, radius: float) -> np.ndarray:
        if radius > self.max_radius:
            raise ValueError("radius exceeds the precomputed neighbourhood")
        n = len(self.candidates)
        blocked = np.zeros(n, dtype=bool)
        accepted = []
        indptr, indices, data = self._indptr, self._indices, self._data
        for i in range(n):
            if blocked[i]:
                continue
            accepted.append(i)
            lo, hi = indptr[i], indptr[i + 1]
            nb = indices[lo:hi]
            blocked[nb[data[lo:hi] < radius]] = True
        return np.asarray(accepted, dtype=np.int64)


def greedy_disk(points: np.ndarray, radius: float) -> np.ndarray:
    """Indices (in ``points`` order) accepted by one greedy pass at ``radius``."""
    return _DartBoard(np.asarray(points, dtype=np.float64), radius).throw(radius)


def poisson_disk_square(n_target: int, seed: int, pool_factor: int = 20, max_tries: int = 8) -> ParamSample:
    """Exactly ``n_target`` Poisson-disk points in the open unit square.

    A seeded pool of uniform candidates is thrown greedily. The radius starts
    at ``sqrt(1 / (2 n))`` and relaxes by 0.98 per round that yields too few
    points (or grows by the same factor while it yields too many), then is
    bisected between the bracketing radii until a pass yields exactly ``n``.
    The result is maximal over its pool. If no radius hits ``n`` exactly the
    pool is redrawn.
    """
    if n_target < 1:
        raise ValueError("n_target must be at least 1")
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        m = max(64, pool_factor * n_target)
        pool = rng.uniform(0.0, 1.0, size=(m, 2))
        pool = pool[(pool > 0.0).all(axis=1) & (pool < 1.0).all(axis=1)]
        if n_target == 1:
            # any radius beyond the square's diagonal leaves a single point
            return ParamSample(pool[:1].copy(), float(np.sqrt(2.0)) + 1e-9, pool[:1].copy())
        boards = [_DartBoard(pool, 1.5 * np.sqrt(1.0 / (2.0 * n_target)))]

        def count(rad):
            if rad > boards[0].max_radius:
                boards[0] = _DartBoard(pool, 1.5 * rad)
            return len(boards[0].throw(rad))

        r = np.sqrt(1.0 / (2.0 * n_target))
        c = count(r)
        if c == n_target:
            return ParamSample(pool[boards[0].throw(r)], float(r), pool)
        if c < n_target:
            while c < n_target and r > 1e-9:
                hi = r
                r *= 0.98
                c = count(r)
            lo = r
        else:
            while c > n_target:
                lo = r
                r /= 0.98
                c = count(r)
            hi = r
        if c == n_target:
            return ParamSample(pool[boards[0].throw(r)], float(r), pool)
        if count(lo) < n_target:
            pool_factor *= 2
            continue
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            c = count(mid)
            if c == n_target:
                return ParamSample(pool[boards[0].throw(mid)], float(mid), pool)
            if c > n_target:
                lo = mid
            else:
                hi = mid
    raise RuntimeError(f"could not draw exactly {n_target} Poisson-disk samples")


def poisson_disk_cloud(cloud: PointCloud | np.ndarray, r: float, seed: int) -> CenterSet:
    """Greedy Poisson-disk subsample of a cloud over a seeded random permutation."""
    if not r > 0:
        raise ValueError(f"r must be positive, got {r}")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    order = np.random.default_rng(seed).permutation(len(pts))
    picked = greedy_disk(pts[order], r)
    return CenterSet(order[picked], r)


def check_separation(points: np.ndarray, radius: float) -> bool:
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        return True
    d, _ = cKDTree(points).query(points, k=2)
    return bool(np.all(d[:, 1] >= radius))


def check_maximality(candidates: np.ndarray, selected: np.ndarray, radius: float) -> bool:
    """Every candidate is selected or strictly closer than ``radius`` to a selected point."""
    d, _ = cKDTree(selected).query(candidates, k=1)
    return bool(np.all(d < radius))
