"""Constant-curvature deployment kinematics of the steerable drilling robot.

Base frame: origin at the distal opening of the straight outer tube, ``z`` along
the insertion axis, bending plane ``x-z`` at zero rotation. Angles are degrees
at every public interface and radians internally.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class KinematicsError(ValueError):
    """Raised for invalid guides, tools or configurations."""


@dataclass(frozen=True)
class SteeringGuide:
    curve_radius_mm: float
    deployable_length_mm: float
    name: str = "guide"

    def __post_init__(self):
        if not (self.curve_radius_mm > 0 and math.isfinite(self.curve_radius_mm)):
            raise KinematicsError(f"curve_radius_mm must be positive, got {self.curve_radius_mm}")
        if not (self.deployable_length_mm > 0 and math.isfinite(self.deployable_length_mm)):
            raise KinematicsError(
                f"deployable_length_mm must be positive, got {self.deployable_length_mm}"
            )
        if self.deployable_length_mm / self.curve_radius_mm > 2 * math.pi + 1e-12:
            raise KinematicsError("deployed arc would overlap itself (length/radius > 2*pi)")

    @property
    def max_bend_deg(self) -> float:
        return math.degrees(self.deployable_length_mm / self.curve_radius_mm)


@dataclass(frozen=True)
class DrillTool:
    """Ball-nose cutter carried at the guide tip.

    Only the cutter (``cutter_diameter_mm`` x ``cutter_length_mm``) removes
    material; shank, torque coil and spindle speed are carried as metadata.
    """

    cutter_diameter_mm: float = 6.75
    cutter_length_mm: float = 10.0
    shank_length_mm: float = 8.0
    shank_diameter_mm: float = 1.75
    torque_coil_length_mm: float = 115.0
    spindle_rpm: float = 8250.0

    def __post_init__(self):
        if not self.cutter_diameter_mm > 0:
            raise KinematicsError("cutter_diameter_mm must be positive")
        if not self.cutter_length_mm >= self.cutter_diameter_mm / 2:
            raise KinematicsError("cutter_length_mm must be at least the cutter radius")
        if self.spindle_rpm < 0:
            raise KinematicsError("spindle_rpm must be nonnegative")

    @property
    def radius_mm(self) -> float:
        return self.cutter_diameter_mm / 2

    @property
    def analytic_volume_mm3(self) -> float:
        r = self.radius_mm
        return math.pi * r * r * (self.cutter_length_mm - r) + 2.0 / 3.0 * math.pi * r**3


@dataclass(frozen=True)
class Config:
    s_mm: float
    phi_deg: float = 0.0


@dataclass(frozen=True)
class Pose:
    position_mm: np.ndarray
    tangent: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position_mm", np.asarray(self.position_mm, dtype=float))
        object.__setattr__(self, "tangent", np.asarray(self.tangent, dtype=float))


def _check_config(guide: SteeringGuide, q: Config) -> None:
    if not math.isfinite(q.s_mm) or not math.isfinite(q.phi_deg):
        raise KinematicsError(f"non-finite configuration {q}")
    if q.s_mm < 0 or q.s_mm > guide.deployable_length_mm:
        raise KinematicsError(
            f"insertion {q.s_mm} mm outside [0, {guide.deployable_length_mm}] for {guide.name}"
        )


def arc_points(radius_mm, s_mm, phi_deg):
    """Vectorised guide-tip position and tangent for arrays of ``s`` and ``phi``.

    Returns ``(positions, tangents)`` each of shape ``(n, 3)``. No range checks.
    """
    s = np.atleast_1d(np.asarray(s_mm, dtype=float))
    phi = np.radians(np.atleast_1d(np.asarray(phi_deg, dtype=float)))
    s, phi = np.broadcast_arrays(s, phi)
    theta = s / radius_mm
    # 1 - cos(theta) written as 2 sin^2(theta/2) keeps the small-angle limit exact
    rho = 2.0 * radius_mm * np.sin(0.5 * theta) ** 2
    z = radius_mm * np.sin(theta)
    c, sn = np.cos(phi), np.sin(phi)
    st = np.sin(theta)
    pos = np.stack([c * rho, sn * rho, z], axis=-1)
    tan = np.stack([c * st, sn * st, np.cos(theta)], axis=-1)
    return pos, tan


def guide_tip_pose(guide: SteeringGuide, q: Config) -> Pose:
    _check_config(guide, q)
    pos, tan = arc_points(guide.curve_radius_mm, q.s_mm, q.phi_deg)
    return Pose(pos[0], tan[0])


def cutter_pose(guide: SteeringGuide, tool: DrillTool, q: Config) -> Pose:
    """Distal point of the cutter: the guide tip pushed ``cutter_length_mm`` along its tangent."""
    tip = guide_tip_pose(guide, q)
    return Pose(tip.position_mm + tool.cutter_length_mm * tip.tangent, tip.tangent)


def lateral_reach(pose: Pose) -> float:
    x, y = pose.position_mm[0], pose.position_mm[1]
    return float(math.hypot(x, y))


def angle_between_deg(t0, t1) -> float:
    # atan2 form stays accurate near 0 and 180 degrees where acos loses digits
    t0 = np.asarray(t0, dtype=float)
    t1 = np.asarray(t1, dtype=float)
    cross = np.linalg.norm(np.cross(t0, t1))
    dot = float(np.dot(t0, t1))
    return math.degrees(math.atan2(cross, dot))


def tip_angle_change(q0: Config, q1: Config, guide: SteeringGuide) -> float:
    t0 = guide_tip_pose(guide, q0).tangent
    t1 = guide_tip_pose(guide, q1).tangent
    return angle_between_deg(t0, t1)


def rot_z(phi_deg: float) -> np.ndarray:
    p = math.radians(phi_deg)
    c, s = math.cos(p), math.sin(p)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
