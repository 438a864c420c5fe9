"""Shared fixtures builders for the test modules."""
import math

import numpy as np

from ctsdr.kinematics import Config, DrillTool, SteeringGuide
from ctsdr.planning import MotionPlan, MotionSegment, integrate_plan
from ctsdr.voxel import BoneBlock, VoxelGrid

TOOL = DrillTool()
STRAIGHT = SteeringGuide(1e6, 60.0, name="straight")


def analytic_push_volume(depth_mm, tool=TOOL):
    r = tool.radius_mm
    return math.pi * r * r * depth_mm + 2.0 / 3.0 * math.pi * r ** 3


def straight_push(depth_mm=20.0, h_mm=0.25, dt_s=0.01, v=1.6):
    """Pseudo-straight push whose block face sits at the cutter's starting ball centre.

    Before any motion the hemisphere lies wholly outside the block, so the
    removed solid is a cylinder of length ``depth_mm`` plus the distal cap.
    """
    entry = TOOL.cutter_length_mm - TOOL.radius_mm
    block = BoneBlock.centered((20.0, 20.0, 40.0), entry_z_mm=entry)
    plan = MotionPlan([MotionSegment(depth_mm / v, v, 0.0, "push")], STRAIGHT, TOOL)
    return VoxelGrid(block, h_mm), integrate_plan(plan, dt_s)


def inside_solid(points, tip, tangent, tool=TOOL):
    """Exact cutter membership of ``points`` for one pose (oracle, no kernel code)."""
    r = tool.radius_mm
    cyl = tool.cutter_length_mm - r
    d = points - tip
    along = d @ tangent
    perp2 = np.einsum("ij,ij->i", d, d) - along ** 2
    ball = points - (tip + cyl * tangent)
    in_cyl = (along >= 0) & (along <= cyl) & (perp2 <= r * r)
    in_ball = (along >= 0) & (np.einsum("ij,ij->i", ball, ball) <= r * r)
    return in_cyl | in_ball


def initial(s=0.0, phi=0.0):
    return Config(s, phi)
