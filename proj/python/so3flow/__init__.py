"""Normalizing flows on SO(3)."""

from ._core import (
    Flow,
    Target,
    __version__,
    geodesic_distance,
    grid,
    hopf_decompose,
    matrix_to_quat,
    quat_to_matrix,
    sample_uniform,
    train,
)

__all__ = [
    "Flow",
    "Target",
    "__version__",
    "geodesic_distance",
    "grid",
    "hopf_decompose",
    "matrix_to_quat",
    "quat_to_matrix",
    "sample_uniform",
    "train",
]
