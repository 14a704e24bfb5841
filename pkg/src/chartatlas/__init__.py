"""Surface reconstruction with an atlas of overfitted ReLU charts."""

from .atlas import Atlas, AtlasConfig, DenseSample, Patch, reconstruct
from .geometry import PointCloud, estimate_normals, normalize
from .transport import exact_assignment, project_to_permutation, sinkhorn

__version__ = "0.1.0"

__all__ = [
    "Atlas",
    "AtlasConfig",
    "DenseSample",
    "Patch",
    "PointCloud",
    "estimate_normals",
    "exact_assignment",
    "normalize",
    "project_to_permutation",
    "reconstruct",
    "sinkhorn",
]
