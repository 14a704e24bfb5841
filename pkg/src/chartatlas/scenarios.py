"""Synthetic fixtures shared by the acceptance suite and the experiment scripts."""

from __future__ import annotations

import numpy as np

from .geometry import PointCloud
from .sampling import poisson_disk_square


def sine_sheet(n: int = 500, seed: int = 0, amplitude: float = 0.1) -> PointCloud:
    """``n`` Poisson-disk samples of ``z = a sin(2 pi x) sin(2 pi y)`` over the unit square."""
    uv = poisson_disk_square(n, seed).points
    z = amplitude * np.sin(2 * np.pi * uv[:, 0]) * np.sin(2 * np.pi * uv[:, 1])
    return PointCloud(np.column_stack([uv, z]))


def noisy_plane(m: int = 20, sigma: float = 0.01, seed: int = 0) -> tuple[PointCloud, float]:
    """Jittered ``m x m`` grid on ``z = 0`` spanning a unit bounding-box diagonal.

    Points get Gaussian displacement ``sigma`` along all three axes. Returns the
    cloud and the in-plane extent, so that the noise level is already in
    normalized units.
    """
    rng = np.random.default_rng(seed)
    side = 1.0 / np.sqrt(2.0)
    g = (np.arange(m) + 0.5) / m * side
    u, v = np.meshgrid(g, g, indexing="ij")
    pts = np.column_stack([u.ravel(), v.ravel(), np.zeros(m * m)])
    return PointCloud(pts + sigma * rng.normal(size=pts.shape)), side


def fibonacci_sphere(n: int) -> np.ndarray:
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    phi = np.pi * (1.0 + np.sqrt(5.0)) * k
    rho = np.sqrt(1.0 - z * z)
    return np.column_stack([rho * np.cos(phi), rho * np.sin(phi), z])


def hemisphere_cap(n_sphere: int = 2000, z_min: float = 0.5) -> PointCloud:
    """Near-uniform points of the unit sphere above ``z_min``."""
    pts = fibonacci_sphere(n_sphere)
    return PointCloud(pts[pts[:, 2] > z_min])


def overlapping_halves(points: np.ndarray, half_width: float) -> tuple[np.ndarray, np.ndarray]:
    """Index sets ``x <= w`` and ``x >= -w``; they share the band ``|x| <= w``."""
    x = np.asarray(points)[:, 0]
    return np.flatnonzero(x <= half_width), np.flatnonzero(x >= -half_width)


def fit_two_charts(points: np.ndarray, sets, config) -> list:
    """Fit one chart per index set (core = fit = the set), centred on its first point."""
    from . import atlas as A

    patches = []
    for k, idx in enumerate(sets):
        idx = np.asarray(idx, dtype=np.int64)
        p = A.Patch(k, int(idx[0]), np.asarray(points)[idx[0]].copy(), None, idx, idx)
        A.prepare_patch(p, config)
        A.fit_chart(p, points, config)
        patches.append(p)
    return patches
