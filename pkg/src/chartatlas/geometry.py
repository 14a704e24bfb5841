"""Point clouds, bounding boxes, normalization, spatial queries and normals."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import breadth_first_order, connected_components, minimum_spanning_tree
from scipy.spatial import cKDTree


class GeometryError(ValueError):
    pass


@dataclass
class PointCloud:
    """Positions (N, 3) with optional unit normals (N, 3), stored as float64."""

    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise GeometryError(f"points must have shape (N, 3), got {self.points.shape}")
        if len(self.points) == 0:
            raise GeometryError("point cloud is empty")
        if not np.all(np.isfinite(self.points)):
            raise GeometryError("point cloud contains non-finite coordinates")
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float64)
            if self.normals.shape != self.points.shape:
                raise GeometryError(
                    f"normals shape {self.normals.shape} does not match points {self.points.shape}"
                )
            norms = np.linalg.norm(self.normals, axis=1)
            if not np.all(np.abs(norms - 1.0) <= 1e-6):
                raise GeometryError("normals must be unit length")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.max - self.min))

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.all((points >= self.min) & (points <= self.max), axis=1)


@dataclass(frozen=True)
class NormalizationTransform:
    """Maps world coordinates ``x`` to ``(x - center) / scale``."""

    center: np.ndarray
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise GeometryError(f"normalization scale must be positive, got {self.scale}")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) / self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + self.center

    @classmethod
    def identity(cls) -> "NormalizationTransform":
        return cls(center=np.zeros(3), scale=1.0)


def bounding_box(cloud: PointCloud | np.ndarray) -> Aabb:
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(points) == 0:
        raise GeometryError("cannot bound an empty cloud")
    return Aabb(min=points.min(axis=0), max=points.max(axis=0))


def normalize(cloud: PointCloud) -> tuple[PointCloud, NormalizationTransform]:
    """Center on the centroid and scale the bounding-box diagonal to 1."""
    diag = bounding_box(cloud).diagonal
    if diag <= 0:
        raise GeometryError("cannot normalize a degenerate cloud (zero bounding-box diagonal)")
    transform = NormalizationTransform(center=cloud.points.mean(axis=0), scale=diag)
    out = PointCloud(transform.apply(cloud.points), None if cloud.normals is None else cloud.normals.copy())
    return out, transform


def denormalize(cloud: PointCloud, transform: NormalizationTransform) -> PointCloud:
    normals = None if cloud.normals is None else cloud.normals.copy()
    return PointCloud(transform.invert(cloud.points), normals)


class SpatialIndex:
    """Immutable k-d tree over a point set.

    Ball queries are post-filtered with the same distance expression a linear
    scan would use, so results are identical to brute force, ties included.
    """

    def __init__(self, points: PointCloud | np.ndarray):
        pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
        self.points = np.array(pts, dtype=np.float64)
        self.points.setflags(write=False)
        self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def radius_query(self, center, radius: float) -> np.ndarray:
        if radius < 0:
            raise GeometryError("radius must be non-negative")
        center = np.asarray(center, dtype=np.float64)
        slack = radius * 1e-9 + 1e-12
        cand = np.asarray(self._tree.query_ball_point(center, radius + slack), dtype=np.int64)
        if len(cand) == 0:
            return cand
        d = np.linalg.norm(self.points[cand] - center, axis=1)
        return np.sort(cand[d <= radius])

    def nearest(self, queries: np.ndarray, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        dist, idx = self._tree.query(queries, k=k)
        return dist, idx


def radius_query(index: SpatialIndex, center, radius: float) -> np.ndarray:
    return index.radius_query(center, radius)


def _orient_seed(normal: np.ndarray, outward: np.ndarray) -> np.ndarray:
    d = float(normal @ outward)
    if abs(d) > 1e-9 * max(np.linalg.norm(outward), 1e-300):
        return normal if d > 0 else -normal
    return normal if normal[np.argmax(np.abs(normal))] > 0 else -normal


def estimate_normals(cloud: PointCloud, k: int = 16) -> PointCloud:
    """PCA normals over k nearest neighbours, signs propagated along an MST.

    Each connected component of the neighbour graph is seeded at the point
    farthest from the cloud centroid, oriented away from it.
    """
    if k < 3:
        raise GeometryError(f"k must be at least 3, got {k}")
    n = len(cloud)
    if n < k:
        raise GeometryError(f"need at least k={k} points, cloud has {n}")
    pts = cloud.points
    index = SpatialIndex(pts)
    _, nbrs = index.nearest(pts, k=k)
    nbrs = np.asarray(nbrs).reshape(n, k)

    local = pts[nbrs] - pts[nbrs].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0].copy()
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    rows = np.repeat(np.arange(n), k)
    cols = nbrs.ravel()
    keep = rows != cols
    rows, cols = rows[keep], cols[keep]
    # small positive floor keeps zero-weight edges in the sparse graph
    w = 1.0 - np.abs(np.einsum("ij,ij->i", normals[rows], normals[cols])) + 1e-9
    graph = coo_matrix((w, (rows, cols)), shape=(n, n)).tocsr()
    graph = graph.maximum(graph.T)
    mst = minimum_spanning_tree(graph)
    mst = mst + mst.T

    ncomp, labels = connected_components(mst, directed=False)
    centroid = pts.mean(axis=0)
    radial = np.linalg.norm(pts - centroid, axis=1)
    for comp in range(ncomp):
        members = np.flatnonzero(labels == comp)
        seed = members[np.argmax(radial[members])]
        normals[seed] = _orient_seed(normals[seed], pts[seed] - centroid)
        order, preds = breadth_first_order(mst, seed, directed=False, return_predecessors=True)
        for node in order[1:]:
            parent = preds[node]
            if normals[node] @ normals[parent] < 0:
                normals[node] = -normals[node]
    return PointCloud(pts.copy(), normals)
