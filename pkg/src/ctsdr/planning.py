"""Motion plans as timed piecewise-constant (insertion, rotation) rate segments."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kinematics import Config, DrillTool, SteeringGuide, arc_points

# boundary insertions within this distance of the guide limits are snapped, not flagged
S_SNAP_MM = 1e-9

DEFAULT_INSERTION_MM_PER_S = 1.6
DEFAULT_ROTATION_DEG_PER_S = 9.6
DEFAULT_SPIRAL_INSERTION_MM_PER_S = 0.96
DEFAULT_SPIRAL_ROTATION_DEG_PER_S = 4.7

PLAN_TYPES = ("j_shape", "u_shape", "branches", "stepped_rotation", "spiral")


class PlanError(ValueError):
    """Raised for invalid plans or plan-generator parameters."""


class ClampError(PlanError):
    """Raised by strict integration when the insertion leaves the guide range."""


@dataclass(frozen=True)
class MotionSegment:
    duration_s: float
    v_ins_mm_per_s: float = 0.0
    w_deg_per_s: float = 0.0
    label: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.duration_s) and self.duration_s > 0):
            raise PlanError(f"segment duration must be positive, got {self.duration_s}")
        if not (math.isfinite(self.v_ins_mm_per_s) and math.isfinite(self.w_deg_per_s)):
            raise PlanError("segment rates must be finite")

    @property
    def delta_s_mm(self) -> float:
        return self.v_ins_mm_per_s * self.duration_s

    @property
    def delta_phi_deg(self) -> float:
        return self.w_deg_per_s * self.duration_s

    def reversed(self) -> "MotionSegment":
        return MotionSegment(self.duration_s, -self.v_ins_mm_per_s, -self.w_deg_per_s,
                             f"reverse {self.label}".strip())


@dataclass(frozen=True)
class MotionPlan:
    segments: tuple
    guide: SteeringGuide
    tool: DrillTool = field(default_factory=DrillTool)
    label: str = ""
    initial: Config = Config(0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if not self.segments:
            raise PlanError("motion plan has no segments")
        s = self.initial.s_mm
        limit = self.guide.deployable_length_mm
        for i, seg in enumerate(self.segments):
            s += seg.delta_s_mm
            if s < -S_SNAP_MM or s > limit + S_SNAP_MM:
                raise PlanError(
                    f"segment {i} ({seg.label or 'unlabelled'}) ends at s={s:.6g} mm, "
                    f"outside [0, {limit}] for guide {self.guide.name}"
                )

    @property
    def duration_s(self) -> float:
        return math.fsum(seg.duration_s for seg in self.segments)

    def boundary_times(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum([seg.duration_s for seg in self.segments])])

    def boundary_configs(self) -> list[Config]:
        out = [self.initial]
        s, phi = self.initial.s_mm, self.initial.phi_deg
        for seg in self.segments:
            s += seg.delta_s_mm
            phi += seg.delta_phi_deg
            out.append(Config(_snap(s, self.guide.deployable_length_mm), phi))
        return out

    def reversed(self, initial: Config | None = None) -> "MotionPlan":
        """Time-reversed, rate-negated plan starting from this plan's final config."""
        start = initial if initial is not None else self.boundary_configs()[-1]
        segs = tuple(seg.reversed() for seg in reversed(self.segments))
        return MotionPlan(segs, self.guide, self.tool, f"reverse {self.label}".strip(), start)

    def then(self, other: "MotionPlan") -> "MotionPlan":
        return MotionPlan(self.segments + other.segments, self.guide, self.tool,
                          self.label, self.initial)


def _snap(s: float, limit: float) -> float:
    if abs(s) <= S_SNAP_MM:
        return 0.0
    if abs(s - limit) <= S_SNAP_MM:
        return limit
    return s


@dataclass(frozen=True)
class ConfigTimeline:
    """Uniformly sampled configurations of an integrated plan.

    Samples sit on ``k * dt_s``; a shortened final step lands on the plan end.
    ``segment`` holds the index of the segment each sample belongs to.
    """

    dt_s: float
    t: np.ndarray
    s_mm: np.ndarray
    phi_deg: np.ndarray
    segment: np.ndarray
    labels: tuple
    guide: SteeringGuide
    tool: DrillTool
    clamp_events: tuple = ()
    plan_label: str = ""

    def __len__(self):
        return len(self.t)

    def config(self, i: int) -> Config:
        return Config(float(self.s_mm[i]), float(self.phi_deg[i]))

    @property
    def initial(self) -> Config:
        return self.config(0)

    @property
    def final(self) -> Config:
        return self.config(len(self.t) - 1)

    def label_of(self, i: int) -> str:
        return self.labels[int(self.segment[i])]

    def tip_poses(self):
        return arc_points(self.guide.curve_radius_mm, self.s_mm, self.phi_deg)

    def cutter_points(self):
        """Guide-tip points, tangents and cutter distal points, each ``(n, 3)``."""
        tips, tangents = self.tip_poses()
        return tips, tangents, tips + self.tool.cutter_length_mm * tangents

    def select(self, mask) -> "ConfigTimeline":
        mask = np.asarray(mask)
        return ConfigTimeline(self.dt_s, self.t[mask], self.s_mm[mask], self.phi_deg[mask],
                              self.segment[mask], self.labels, self.guide, self.tool,
                              self.clamp_events, self.plan_label)


def integrate_plan(plan: MotionPlan, dt_s: float = 1e-3, initial: Config | None = None,
                   strict: bool = False) -> ConfigTimeline:
    """Closed-form integration of piecewise-constant rates onto a uniform time grid."""
    if not (math.isfinite(dt_s) and dt_s > 0):
        raise PlanError(f"dt_s must be positive, got {dt_s}")
    if not plan.segments:
        raise PlanError("motion plan has no segments")
    q0 = initial if initial is not None else plan.initial
    limit = plan.guide.deployable_length_mm

    bounds = plan.boundary_times()
    total = float(bounds[-1])
    n = int(math.floor(total / dt_s + 1e-9))
    t = np.arange(n + 1, dtype=float) * dt_s
    if total - t[-1] > 1e-9 * max(1.0, total):
        t = np.append(t, total)
    else:
        t[-1] = total

    seg_idx = np.searchsorted(bounds, t, side="right") - 1
    seg_idx = np.clip(seg_idx, 0, len(plan.segments) - 1)

    v = np.array([seg.v_ins_mm_per_s for seg in plan.segments])
    w = np.array([seg.w_deg_per_s for seg in plan.segments])
    s_start = np.empty(len(plan.segments))
    phi_start = np.empty(len(plan.segments))
    s, phi = q0.s_mm, q0.phi_deg
    for i, seg in enumerate(plan.segments):
        s_start[i], phi_start[i] = s, phi
        s += seg.delta_s_mm
        phi += seg.delta_phi_deg

    local = t - bounds[seg_idx]
    s_arr = s_start[seg_idx] + v[seg_idx] * local
    phi_arr = phi_start[seg_idx] + w[seg_idx] * local

    events = []
    low = s_arr < -S_SNAP_MM
    high = s_arr > limit + S_SNAP_MM
    if low.any() or high.any():
        first = int(np.flatnonzero(low | high)[0])
        msg = (f"insertion clamped to [0, {limit}] mm from t={t[first]:.6g} s "
               f"({int(low.sum() + high.sum())} samples)")
        if strict:
            raise ClampError(msg)
        events.append(msg)
    s_arr = np.clip(s_arr, 0.0, limit)
    s_arr[np.abs(s_arr) <= S_SNAP_MM] = 0.0
    s_arr[np.abs(s_arr - limit) <= S_SNAP_MM] = limit

    labels = tuple(seg.label for seg in plan.segments)
    return ConfigTimeline(dt_s, t, s_arr, phi_arr, seg_idx.astype(np.int32), labels,
                          plan.guide, plan.tool, tuple(events), plan.label)


# -- plan generators ---------------------------------------------------------

def _check_depth(guide: SteeringGuide, depth_mm: float) -> None:
    if not (math.isfinite(depth_mm) and depth_mm > 0):
        raise PlanError(f"depth_mm must be positive, got {depth_mm}")
    if depth_mm > guide.deployable_length_mm + S_SNAP_MM:
        raise PlanError(
            f"depth {depth_mm} mm exceeds deployable length {guide.deployable_length_mm} mm"
        )


def _check_rate(name: str, value: float) -> None:
    if not (math.isfinite(value) and value > 0):
        raise PlanError(f"{name} must be positive, got {value}")


def plan_j_or_u_shape(guide: SteeringGuide, tool: DrillTool, depth_mm: float | None = None,
                      v_ins: float = DEFAULT_INSERTION_MM_PER_S, phi_deg: float = 0.0,
                      label: str = "j_shape") -> MotionPlan:
    """Single insertion at constant speed; ``depth_mm=None`` deploys the full guide (U-shape)."""
    depth = guide.deployable_length_mm if depth_mm is None else depth_mm
    _check_depth(guide, depth)
    _check_rate("v_ins", v_ins)
    seg = MotionSegment(depth / v_ins, v_ins, 0.0, "insert")
    return MotionPlan((seg,), guide, tool, label, Config(0.0, phi_deg))


def plan_branches(guide: SteeringGuide, tool: DrillTool, depth_mm: float, n_branches: int = 3,
                  delta_phi_deg: float = 120.0, v_ins: float = DEFAULT_INSERTION_MM_PER_S,
                  v_retract: float = DEFAULT_INSERTION_MM_PER_S,
                  w_reorient: float = DEFAULT_ROTATION_DEG_PER_S,
                  phi0_deg: float = 0.0) -> MotionPlan:
    """Insert, retract fully, reorient at the entry; repeat for each branch."""
    if int(n_branches) != n_branches or n_branches < 1:
        raise PlanError(f"n_branches must be a positive integer, got {n_branches}")
    if not math.isfinite(delta_phi_deg) or (n_branches > 1 and delta_phi_deg == 0):
        raise PlanError(f"delta_phi_deg must be finite and nonzero, got {delta_phi_deg}")
    _check_depth(guide, depth_mm)
    for name, value in (("v_ins", v_ins), ("v_retract", v_retract), ("w_reorient", w_reorient)):
        _check_rate(name, value)

    sign = 1.0 if delta_phi_deg > 0 else -1.0
    segs = []
    for b in range(int(n_branches)):
        segs.append(MotionSegment(depth_mm / v_ins, v_ins, 0.0, f"insert branch {b + 1}"))
        segs.append(MotionSegment(depth_mm / v_retract, -v_retract, 0.0, f"retract branch {b + 1}"))
        if b < n_branches - 1:
            segs.append(MotionSegment(abs(delta_phi_deg) / w_reorient, 0.0, sign * w_reorient,
                                      f"reorient to branch {b + 2}"))
    return MotionPlan(tuple(segs), guide, tool, "branches", Config(0.0, phi0_deg))


def plan_stepped_rotation(guide: SteeringGuide, tool: DrillTool, step_mm: float = 10.0,
                          n_steps: int = 1, sweep_deg: float = 360.0,
                          v_ins: float = DEFAULT_INSERTION_MM_PER_S,
                          w: float = DEFAULT_ROTATION_DEG_PER_S,
                          sweep_mode: str = "alternate") -> MotionPlan:
    """Alternate insertion steps with in-place rotational sweeps.

    Partial sweeps (< 360 deg) rock back and forth when ``sweep_mode`` is
    ``"alternate"``; ``"same"`` keeps turning in one direction.
    """
    if int(n_steps) != n_steps or n_steps < 1:
        raise PlanError(f"n_steps must be a positive integer, got {n_steps}")
    if not (math.isfinite(step_mm) and step_mm > 0):
        raise PlanError(f"step_mm must be positive, got {step_mm}")
    if not (math.isfinite(sweep_deg) and 0 < sweep_deg <= 360):
        raise PlanError(f"sweep_deg must be in (0, 360], got {sweep_deg}")
    if sweep_mode not in ("alternate", "same"):
        raise PlanError(f"sweep_mode must be 'alternate' or 'same', got {sweep_mode!r}")
    _check_rate("v_ins", v_ins)
    _check_rate("w", w)
    if n_steps * step_mm > guide.deployable_length_mm + S_SNAP_MM:
        raise PlanError(
            f"{n_steps} steps of {step_mm} mm exceed deployable length {guide.deployable_length_mm} mm"
        )

    alternate = sweep_mode == "alternate" and sweep_deg < 360
    segs = []
    for k in range(int(n_steps)):
        sign = -1.0 if (alternate and k % 2) else 1.0
        segs.append(MotionSegment(step_mm / v_ins, v_ins, 0.0, f"insert step {k + 1}"))
        segs.append(MotionSegment(sweep_deg / w, 0.0, sign * w, f"sweep step {k + 1}"))
    return MotionPlan(tuple(segs), guide, tool, "stepped_rotation")


def plan_spiral(guide: SteeringGuide, tool: DrillTool, depth_mm: float,
                v_ins: float = DEFAULT_SPIRAL_INSERTION_MM_PER_S,
                w: float = DEFAULT_SPIRAL_ROTATION_DEG_PER_S) -> MotionPlan:
    _check_depth(guide, depth_mm)
    _check_rate("v_ins", v_ins)
    if not math.isfinite(w) or w == 0:
        raise PlanError(f"spiral rotation rate must be nonzero, got {w}")
    seg = MotionSegment(depth_mm / v_ins, v_ins, w, "spiral")
    return MotionPlan((seg,), guide, tool, "spiral")


@dataclass(frozen=True)
class PitchCheck:
    pitch_mm: float
    satisfied: bool

    def as_dict(self):
        return {"pitch_mm": self.pitch_mm, "satisfied": self.satisfied}


def check_spiral_pitch(v_ins: float, w: float, tool: DrillTool) -> PitchCheck:
    """Axial advance per revolution against the cutter length.

    Each revolution must finish before the tool advances one cutter length,
    otherwise the helix leaves uncut material between turns.
    """
    if not math.isfinite(w) or w == 0:
        raise PlanError("rotation rate is zero: pitch is infinite")
    pitch = abs(v_ins) * 360.0 / abs(w)
    return PitchCheck(pitch, bool(pitch <= tool.cutter_length_mm))
