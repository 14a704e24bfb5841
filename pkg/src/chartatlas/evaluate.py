"""One-sided point-set distances, cumulative error histograms and statistics tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud

INP_TO_REC = "inp->rec"
REC_TO_GT = "rec->GT"
HISTOGRAM_HEADER = ("threshold", "fraction")
STATS_HEADER = ("model", "method", "direction", "min", "avg", "std", "max")


class EvalError(ValueError):
    pass


@dataclass
class OneSidedDistances:
    values: np.ndarray
    direction: str = ""

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class CumulativeHistogram:
    thresholds: np.ndarray
    fractions: np.ndarray


@dataclass
class StatsRow:
    min: float
    avg: float
    std: float
    max: float


def _points(cloud) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise EvalError(f"expected a non-empty (n, 3) cloud, got shape {pts.shape}")
    return pts


def one_sided(source, target, direction: str = "") -> OneSidedDistances:
    """Distance from every source point to its nearest target point."""
    src, tgt = _points(source), _points(target)
    d, _ = cKDTree(tgt).query(src, k=1)
    return OneSidedDistances(np.asarray(d, dtype=np.float64), direction)


def _values(d) -> np.ndarray:
    v = d.values if isinstance(d, OneSidedDistances) else np.asarray(d, dtype=np.float64)
    if len(v) == 0:
        raise EvalError("no distances")
    return v


def cumulative_histogram(d, n_bins: int = 100) -> CumulativeHistogram:
    """Fraction of distances at or below each of ``n_bins`` thresholds spanning ``[0, max(d)]``."""
    if n_bins < 1:
        raise EvalError("n_bins must be at least 1")
    v = np.sort(_values(d))
    thresholds = np.linspace(0.0, v[-1], n_bins) if n_bins > 1 else np.array([v[-1]])
    counts = np.searchsorted(v, thresholds, side="right")
    return CumulativeHistogram(thresholds, counts / len(v))


def stats(d) -> StatsRow:
    v = _values(d)
    return StatsRow(float(v.min()), float(v.mean()), float(v.std(ddof=0)), float(v.max()))


def sample_mesh(vertices: np.ndarray, triangles: np.ndarray, n: int = 1_000_000, seed: int = 0) -> np.ndarray:
    """Area-uniform random points on a triangle mesh."""
    tri = np.asarray(vertices, dtype=np.float64)[np.asarray(triangles, dtype=np.int64)]
    if len(tri) == 0:
        raise EvalError("mesh has no triangles")
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    total = area.sum()
    if not total > 0:
        raise EvalError("mesh has zero area")
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(tri), size=n, p=area / total)
    u, v = rng.uniform(size=(2, n))
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    t = tri[pick]
    return t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0])


def write_histogram(hist: CumulativeHistogram, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTOGRAM_HEADER)
        for t, f in zip(hist.thresholds, hist.fractions):
            w.writerow([repr(float(t)), repr(float(f))])


def write_stats(rows: Iterable[tuple[str, str, str, StatsRow]], path) -> None:
    """Rows of ``(model, method, direction, StatsRow)``."""
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STATS_HEADER)
        for model, method, direction, s in rows:
            w.writerow([model, method, direction, repr(s.min), repr(s.avg), repr(s.std), repr(s.max)])
