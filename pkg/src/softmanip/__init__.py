"""Planar inextensible soft-manipulator dynamics and optimal control.

Forward dynamics of the controlled fourth-order rod system, static and
dynamic optimal reachability via adjoint-based descent, and static optimal
grasping against geometric targets.
"""

from .core import (
    ControlField,
    DiscretizedCurve,
    Grid,
    GridSizeError,
    Mask,
    ModelParams,
    cross2,
    perp,
    signed_curvature,
)

__version__ = "0.1.0"

__all__ = [
    "ControlField",
    "DiscretizedCurve",
    "Grid",
    "GridSizeError",
    "Mask",
    "ModelParams",
    "cross2",
    "perp",
    "signed_curvature",
    "__version__",
]
