"""Bayesian diffeomorphic registration and data augmentation.

Volumes are numpy arrays indexed ``arr[x, y]`` (2D) or ``arr[x, y, z]`` (3D);
displacement fields carry a trailing component axis of length ``ndim`` and are
expressed in physical units (mm). Every operation is deterministic for a fixed
seed.
"""

from ._core import (
    DataError,
    IoError,
    NumericalError,
    bspline_field,
    estimate_template,
    field_checksum,
    jacobian_determinant,
    min_jacobian,
    read_image,
    read_labels,
    sample_deformations,
    warp_image,
    warp_labels,
    write_image,
    write_labels,
)

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "IoError",
    "NumericalError",
    "bspline_field",
    "estimate_template",
    "field_checksum",
    "jacobian_determinant",
    "min_jacobian",
    "read_image",
    "read_labels",
    "sample_deformations",
    "warp_image",
    "warp_labels",
    "write_image",
    "write_labels",
]
