"""The 10-class axis-aligned rotation group used by the rotation task.

Twelve operators ({x, y, z} x {0, 90, 180, 270} degrees) collapse to 10
distinct classes because the three 0-degree operators are all the identity.
In 2D only the in-plane rotations survive, a 4-way label space.

Handedness is the right-hand rule about each positive axis, with array axes
0, 1, 2 read as x, y, z. A 90-degree rotation about x carries +y onto +z;
the cyclic planes are x:(y,z), y:(z,x), z:(x,y). Everything is a pure index
permutation (transpose + flip), so rotations are exact and invertible.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .volume import Volume

_PLANES = {"x": (0, 1, 2), "y": (1, 2, 0), "z": (2, 0, 1)}
_AXES = ("x", "y", "z")
_ANGLES = (90, 180, 270)


@dataclass(frozen=True)
class RotationClass:
    class_id: int
    axis: str | None   # None for the identity
    angle: int         # degrees, 0 for the identity

    def __post_init__(self):
        if self.axis is None:
            if self.angle != 0:
                raise ValueError("identity class must have angle 0")
        elif self.axis not in _AXES or self.angle not in _ANGLES:
            raise ValueError(f"bad rotation ({self.axis}, {self.angle})")


def enumerate_rotations() -> list[RotationClass]:
    """All 10 classes: identity, then x90..x270, y90..y270, z90..z270."""
    out = [RotationClass(0, None, 0)]
    cid = 1
    for axis in _AXES:
        for angle in _ANGLES:
            out.append(RotationClass(cid, axis, angle))
            cid += 1
    return out


def enumerate_rotations_2d() -> list[RotationClass]:
    """The 4 in-plane classes usable on 2D inputs (identity + z rotations)."""
    full = enumerate_rotations()
    return [full[0]] + [r for r in full if r.axis == "z"]


def rotate_array(arr: np.ndarray, r: RotationClass) -> np.ndarray:
    """Rotate the leading spatial axes of ``arr``; trailing axes ride along."""
    if r.axis is None:
        return arr.copy()
    _, a, b = _PLANES[r.axis]
    return np.ascontiguousarray(np.rot90(arr, k=r.angle // 90, axes=(a, b)))


def _rotate_2d(arr: np.ndarray, r: RotationClass) -> np.ndarray:
    if r.axis is None:
        return arr.copy()
    if r.axis != "z":
        raise DimensionMismatch(f"axis {r.axis!r} leaves the plane of a 2D image")
    return np.ascontiguousarray(np.rot90(arr, k=r.angle // 90, axes=(0, 1)))


def apply_rotation(v: Volume, r: RotationClass) -> Volume:
    """Rotate a volume exactly; intensity multiset is preserved."""
    if v.spatial_rank == 2:
        data = _rotate_2d(v.data, r)
    else:
        data = rotate_array(v.data, r)
    return Volume(data, v.spacing, v.id)


def inverse_rotation(r: RotationClass) -> RotationClass:
    """The class undoing r (same axis, angle negated mod 360)."""
    if r.axis is None:
        return r
    inv_angle = (360 - r.angle) % 360
    for cand in enumerate_rotations():
        if cand.axis == r.axis and cand.angle == inv_angle:
            return cand
    raise AssertionError("unreachable")
