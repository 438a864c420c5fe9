"""Simulator of a two-DoF concentric-tube steerable drilling robot.

Constant-curvature deployment kinematics, motion plans for curved and
cavity drilling, voxel material removal by a ball-nose cutter, and cavity
and force metrology.
"""
from .analysis import (CavityReport, build_cavity_report, channel_centerline, fit_circle,
                       spiral_radii)
from .forces import ForceSeries, max_force_magnitude, smooth_forces
from .kinematics import (Config, DrillTool, Pose, SteeringGuide, cutter_pose, guide_tip_pose,
                         lateral_reach, tip_angle_change)
from .planning import (ConfigTimeline, MotionPlan, MotionSegment, check_spiral_pitch,
                       integrate_plan, plan_branches, plan_j_or_u_shape, plan_spiral,
                       plan_stepped_rotation)
from .scenario import Scenario, parse_scenario, run_scenario, serialize_scenario
from .voxel import (BoneBlock, VoxelGrid, carve, entry_hole_diameter, export_cavity_mesh,
                    slice_diameter)

__version__ = "0.1.0"
