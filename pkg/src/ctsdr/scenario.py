"""Declarative scenario files and the plan -> integrate -> carve -> report pipeline.

A scenario is a YAML mapping with the sections ``guide``, ``tool``, ``block``,
``plan``, ``sim`` and ``output`` (plus optional ``name`` and ``reference``).
Units are part of every key name. Unknown keys are rejected.
"""
from __future__ import annotations

import json
import logging
import math
import shutil
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import planning
from .analysis import build_cavity_report, helix_pitch, spiral_radii
from .kinematics import DrillTool, SteeringGuide
from .planning import PLAN_TYPES, check_spiral_pitch, integrate_plan
from .voxel import BoneBlock, VoxelGrid, carve, write_mask, export_cavity_mesh

log = logging.getLogger("ctsdr")

ARTIFACTS = ("trajectory.csv", "cavity.ply", "mask.bin", "report.json", "run.log")


class ScenarioError(ValueError):
    """Invalid scenario document; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


_REQUIRED = object()

# (key, kind, default); kinds: float, int, str, bool, vec3, label
GUIDE_KEYS = (("curve_radius_mm", "float", _REQUIRED),
              ("deployable_length_mm", "float", _REQUIRED),
              ("name", "str", "guide"))
TOOL_KEYS = tuple((name, "float", getattr(DrillTool(), name)) for name in (
    "cutter_diameter_mm", "cutter_length_mm", "shank_length_mm", "shank_diameter_mm",
    "torque_coil_length_mm", "spindle_rpm"))
BLOCK_KEYS = (("size_mm", "vec3", (60.0, 60.0, 90.0)),
              ("origin_mm", "vec3", None),
              ("density_pcf", "label", 10),
              ("entry_face_normal", "str", "-z"))
SIM_KEYS = (("dt_s", "float", 1e-3), ("h_mm", "float", 0.25), ("seed", "int", 0),
            ("strict", "bool", False))
OUTPUT_KEYS = (("directory", "str", _REQUIRED), ("mesh_format", "str", "ply"),
               ("mesh_binary", "bool", True))
REFERENCE_KEYS = (("lateral_reach_mm", "float", None), ("tip_angle_deg", "float", None),
                  ("radius_mm", "float", None), ("entry_diameter_mm", "float", None),
                  ("ring_diameter_1_mm", "float", None), ("ring_diameter_2_mm", "float", None),
                  ("ring_diameter_3_mm", "float", None), ("spiral_initial_radius_mm", "float", None),
                  ("spiral_final_radius_mm", "float", None))

_V = planning.DEFAULT_INSERTION_MM_PER_S
_W = planning.DEFAULT_ROTATION_DEG_PER_S
PLAN_KEYS = {
    "j_shape": (("depth_mm", "float", _REQUIRED), ("v_ins_mm_per_s", "float", _V),
                ("phi_deg", "float", 0.0)),
    "u_shape": (("depth_mm", "float", None), ("v_ins_mm_per_s", "float", _V),
                ("phi_deg", "float", 0.0)),
    "branches": (("depth_mm", "float", _REQUIRED), ("n_branches", "int", 3),
                 ("delta_phi_deg", "float", 120.0), ("v_ins_mm_per_s", "float", _V),
                 ("v_retract_mm_per_s", "float", _V), ("w_reorient_deg_per_s", "float", _W)),
    "stepped_rotation": (("n_steps", "int", _REQUIRED), ("step_mm", "float", 10.0),
                         ("sweep_deg", "float", 360.0), ("v_ins_mm_per_s", "float", _V),
                         ("w_deg_per_s", "float", _W), ("sweep_mode", "str", "alternate")),
    "spiral": (("depth_mm", "float", _REQUIRED),
               ("v_ins_mm_per_s", "float", planning.DEFAULT_SPIRAL_INSERTION_MM_PER_S),
               ("w_deg_per_s", "float", planning.DEFAULT_SPIRAL_ROTATION_DEG_PER_S)),
}
SECTIONS = ("name", "guide", "tool", "block", "plan", "sim", "output", "reference")


@dataclass(frozen=True)
class Scenario:
    guide: SteeringGuide
    tool: DrillTool
    block: BoneBlock
    plan_type: str
    plan_params: dict
    output_dir: str
    dt_s: float = 1e-3
    h_mm: float = 0.25
    seed: int = 0
    strict: bool = False
    mesh_format: str = "ply"
    mesh_binary: bool = True
    name: str = "scenario"
    reference: dict = field(default_factory=dict)
    defaulted: tuple = field(default=(), compare=False)

    def build_plan(self) -> planning.MotionPlan:
        p = self.plan_params
        g, t = self.guide, self.tool
        if self.plan_type in ("j_shape", "u_shape"):
            return planning.plan_j_or_u_shape(g, t, p["depth_mm"], p["v_ins_mm_per_s"],
                                              p["phi_deg"], label=self.plan_type)
        if self.plan_type == "branches":
            return planning.plan_branches(g, t, p["depth_mm"], p["n_branches"], p["delta_phi_deg"],
                                          p["v_ins_mm_per_s"], p["v_retract_mm_per_s"],
                                          p["w_reorient_deg_per_s"])
        if self.plan_type == "stepped_rotation":
            return planning.plan_stepped_rotation(g, t, p["step_mm"], p["n_steps"], p["sweep_deg"],
                                                  p["v_ins_mm_per_s"], p["w_deg_per_s"],
                                                  p["sweep_mode"])
        return planning.plan_spiral(g, t, p["depth_mm"], p["v_ins_mm_per_s"], p["w_deg_per_s"])


# -- parsing ---------------------------------------------------------------------

def _line(node) -> int:
    return node.start_mark.line + 1


def _mapping(node, where: str) -> dict:
    if not isinstance(node, yaml.MappingNode):
        raise ScenarioError(f"{where} must be a mapping", _line(node))
    out = {}
    for key_node, value_node in node.value:
        key = key_node.value
        if key in out:
            raise ScenarioError(f"duplicate key {where}.{key}", _line(key_node))
        out[key] = (key_node, value_node)
    return out


def _number(node, where: str, integer: bool = False):
    if not isinstance(node, yaml.ScalarNode):
        raise ScenarioError(f"{where} must be a number", _line(node))
    text = node.value.strip()
    try:
        value = int(text) if integer else float(text)
    except ValueError:
        kind = "integer" if integer else "number"
        raise ScenarioError(f"malformed {kind} for {where}: {text!r}", _line(node)) from None
    if not integer and not math.isfinite(value):
        raise ScenarioError(f"{where} must be finite", _line(node))
    return value


def _convert(node, kind: str, where: str):
    if kind == "float":
        return _number(node, where)
    if kind == "int":
        return _number(node, where, integer=True)
    if kind == "bool":
        if not (isinstance(node, yaml.ScalarNode) and node.value.lower() in ("true", "false")):
            raise ScenarioError(f"{where} must be true or false", _line(node))
        return node.value.lower() == "true"
    if kind == "vec3":
        if not (isinstance(node, yaml.SequenceNode) and len(node.value) == 3):
            raise ScenarioError(f"{where} must be a list of 3 numbers", _line(node))
        return tuple(_number(n, where) for n in node.value)
    if kind == "label":
        value = node.value if isinstance(node, yaml.ScalarNode) else None
        if value is not None and value.isdigit():
            return int(value)
        if value == "custom":
            return value
        raise ScenarioError(f"{where} must be 5, 10 or custom", _line(node))
    if not isinstance(node, yaml.ScalarNode):
        raise ScenarioError(f"{where} must be text", _line(node))
    return node.value


def _section(doc: dict, section: str, keys, defaulted: list, required: bool = False) -> dict:
    if section not in doc:
        if required or any(d is _REQUIRED for _, _, d in keys):
            missing = next((k for k, _, d in keys if d is _REQUIRED), None)
            raise ScenarioError(f"{section}.{missing} required" if missing else f"{section} required")
        items = {}
        line = None
    else:
        key_node, value_node = doc[section]
        line = _line(key_node)
        items = _mapping(value_node, section) if not (
            isinstance(value_node, yaml.ScalarNode) and value_node.value == "") else {}
    known = {k for k, _, _ in keys}
    for key, (key_node, _) in items.items():
        if key not in known:
            raise ScenarioError(f"unknown key {section}.{key} (valid: {', '.join(sorted(known))})",
                                _line(key_node))
    out = {}
    for key, kind, default in keys:
        if key in items:
            out[key] = _convert(items[key][1], kind, f"{section}.{key}")
        elif default is _REQUIRED:
            raise ScenarioError(f"{section}.{key} required", line)
        else:
            out[key] = default
            defaulted.append(f"{section}.{key}={default!r}")
    return out


def parse_scenario(text: str) -> Scenario:
    """Parse and validate scenario text, applying defaults."""
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ScenarioError(f"malformed document: {getattr(exc, 'problem', exc)}",
                            mark.line + 1 if mark else None) from None
    if root is None:
        raise ScenarioError("empty scenario")
    doc = _mapping(root, "scenario")
    for key, (key_node, _) in doc.items():
        if key not in SECTIONS:
            raise ScenarioError(f"unknown section {key!r} (valid: {', '.join(SECTIONS)})",
                                _line(key_node))
    defaulted: list = []
    name = _convert(doc["name"][1], "str", "name") if "name" in doc else "scenario"

    g = _section(doc, "guide", GUIDE_KEYS, defaulted, required=True)
    t = _section(doc, "tool", TOOL_KEYS, defaulted)
    b = _section(doc, "block", BLOCK_KEYS, defaulted)
    s = _section(doc, "sim", SIM_KEYS, defaulted)
    o = _section(doc, "output", OUTPUT_KEYS, defaulted, required=True)
    ref = {k: v for k, v in _section(doc, "reference", REFERENCE_KEYS, []).items() if v is not None}

    if "plan" not in doc:
        raise ScenarioError("plan.type required")
    plan_key, plan_node = doc["plan"]
    plan_items = _mapping(plan_node, "plan")
    if "type" not in plan_items:
        raise ScenarioError("plan.type required", _line(plan_key))
    ptype = _convert(plan_items["type"][1], "str", "plan.type")
    if ptype not in PLAN_TYPES:
        raise ScenarioError(f"unknown plan type {ptype!r}; valid types: {', '.join(PLAN_TYPES)}",
                            _line(plan_items["type"][1]))
    params_doc = {"plan": (plan_key, plan_node)}
    keys = (("type", "str", _REQUIRED),) + PLAN_KEYS[ptype]
    params = _section(params_doc, "plan", keys, defaulted)
    params.pop("type")

    try:
        guide = SteeringGuide(g["curve_radius_mm"], g["deployable_length_mm"], g["name"])
        tool = DrillTool(**t)
        origin = b["origin_mm"]
        if origin is None:
            origin = (-b["size_mm"][0] / 2, -b["size_mm"][1] / 2, 0.0)
        block = BoneBlock(b["size_mm"], origin, b["density_pcf"], b["entry_face_normal"])
        if ptype == "u_shape" and params["depth_mm"] is None:
            params["depth_mm"] = guide.deployable_length_mm
        resolved = {"block.origin_mm": tuple(block.origin_mm), "plan.depth_mm": params.get("depth_mm")}
        defaulted = [f"{k}={resolved[k]!r} (resolved)" if k in resolved else item
                     for item in defaulted for k in [item.split("=", 1)[0]]]
        if not s["dt_s"] > 0:
            raise ValueError("sim.dt_s must be positive")
        if not s["h_mm"] > 0:
            raise ValueError("sim.h_mm must be positive")
        if o["mesh_format"] not in ("ply", "stl"):
            raise ValueError("output.mesh_format must be ply or stl")
        sc = Scenario(guide, tool, block, ptype, params, o["directory"], s["dt_s"], s["h_mm"],
                      s["seed"], s["strict"], o["mesh_format"], o["mesh_binary"], name, ref,
                      tuple(defaulted))
        sc.build_plan()
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(str(exc)) from None
    return sc


def load_scenario(path) -> Scenario:
    return parse_scenario(Path(path).read_text(encoding="utf-8"))


def scenario_to_dict(sc: Scenario) -> dict:
    block = sc.block
    return {
        "name": sc.name,
        "guide": {"curve_radius_mm": sc.guide.curve_radius_mm,
                  "deployable_length_mm": sc.guide.deployable_length_mm,
                  "name": sc.guide.name},
        "tool": {k: getattr(sc.tool, k) for k, _, _ in TOOL_KEYS},
        "block": {"size_mm": list(block.size_mm), "origin_mm": list(block.origin_mm),
                  "density_pcf": block.density_pcf, "entry_face_normal": block.entry_face_normal},
        "plan": {"type": sc.plan_type, **sc.plan_params},
        "sim": {"dt_s": sc.dt_s, "h_mm": sc.h_mm, "seed": sc.seed, "strict": sc.strict},
        "output": {"directory": sc.output_dir, "mesh_format": sc.mesh_format,
                   "mesh_binary": sc.mesh_binary},
        **({"reference": dict(sc.reference)} if sc.reference else {}),
    }


def serialize_scenario(sc: Scenario) -> str:
    return yaml.safe_dump(scenario_to_dict(sc), sort_keys=False, default_flow_style=None)


# -- running ----------------------------------------------------------------------

def _write_trajectory(path: Path, timeline) -> None:
    tips, tangents = timeline.tip_poses()
    data = np.column_stack([timeline.t, timeline.s_mm, timeline.phi_deg, tips, tangents])
    header = "t_s,s_mm,phi_deg,tip_x_mm,tip_y_mm,tip_z_mm,tangent_x,tangent_y,tangent_z"
    np.savetxt(path, data, fmt="%.12g", delimiter=",", header=header, comments="")


def run_pipeline(sc: Scenario, workers: int | None = None):
    """Plan, integrate, carve and measure without touching the filesystem."""
    plan = sc.build_plan()
    timeline = integrate_plan(plan, sc.dt_s, strict=sc.strict)
    timeline = replace(timeline, plan_label=sc.plan_type)
    grid = VoxelGrid(sc.block, sc.h_mm)
    carved = carve(grid, timeline, workers=workers)
    ref = {k: v for k, v in sc.reference.items() if not k.startswith("spiral_")}
    report = build_cavity_report(grid, timeline, reference=ref)
    return plan, timeline, grid, carved, report


def build_report_json(sc: Scenario, plan, timeline, grid, carved, report) -> dict:
    out = {
        "scenario": sc.name,
        "plan": {
            "type": sc.plan_type,
            "parameters": sc.plan_params,
            "duration_s": plan.duration_s,
            "segments": [
                {"label": seg.label, "duration_s": seg.duration_s,
                 "v_ins_mm_per_s": seg.v_ins_mm_per_s, "w_deg_per_s": seg.w_deg_per_s}
                for seg in plan.segments
            ],
        },
        "cavity": report.as_dict(),
        "metrics": dict(report.extras),
        "carve": {"removed_count": carved.removed_count, "clamped": carved.clamped,
                  "boundary_warning": carved.boundary_warning, "samples": len(timeline),
                  "clamp_events": list(timeline.clamp_events)},
        "notes": list(report.notes),
    }
    if sc.plan_type == "spiral":
        p = sc.plan_params
        check = check_spiral_pitch(p["v_ins_mm_per_s"], p["w_deg_per_s"], sc.tool)
        out["pitch_check"] = check.as_dict()
        if not check.satisfied:
            out["notes"].append(
                f"helix pitch {check.pitch_mm:.2f} mm exceeds the cutter length "
                f"{sc.tool.cutter_length_mm} mm: turns do not overlap")
        radii = spiral_radii(timeline, grid)
        out["spiral_radii"] = radii
        try:
            out["metrics"]["helix_pitch_mm"] = helix_pitch(timeline)
        except ValueError as exc:
            out["notes"].append(f"helix pitch not measurable: {exc}")
        for key, name in (("spiral_initial_radius_mm", "initial_radius_mm"),
                          ("spiral_final_radius_mm", "final_radius_mm")):
            if key in sc.reference:
                measured = sc.reference[key]
                pct = 100.0 * (radii[name] - measured) / measured
                out["notes"].append(f"{key}: simulated {radii[name]:.4g} vs measured reference "
                                    f"{measured:.4g} ({pct:+.1f}%); depends on the chosen depth")
    if timeline.clamp_events:
        out["notes"].extend(timeline.clamp_events)
    if carved.boundary_warning:
        out["notes"].append("cutter starts across a block face other than the entry face")
    return out


def run_scenario(sc: Scenario, out_dir=None, workers: int | None = None) -> dict:
    """Run one scenario and write its artifacts; returns ``{artifact: path}``.

    On any failure the artifacts written so far are removed before re-raising.
    """
    out = Path(out_dir if out_dir is not None else sc.output_dir)
    created_dir = not out.exists()
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in ARTIFACTS}
    if sc.mesh_format != "ply":
        del paths["cavity.ply"]
        paths[f"cavity.{sc.mesh_format}"] = out / f"cavity.{sc.mesh_format}"
    mesh_path = paths.get("cavity.ply", out / f"cavity.{sc.mesh_format}")
    handler = logging.FileHandler(paths["run.log"], mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    try:
        log.info("scenario %s", sc.name)
        log.info("resolved scenario:\n%s", serialize_scenario(sc).rstrip())
        for item in sc.defaulted:
            log.info("default applied: %s", item)
        started = time.perf_counter()
        plan, timeline, grid, carved, report = run_pipeline(sc, workers)
        log.info("plan %s: %d segments, %.6g s", sc.plan_type, len(plan.segments), plan.duration_s)
        log.info("timeline: %d samples at dt=%g s", len(timeline), sc.dt_s)
        log.info("carve: %d voxels removed on a %s grid (%s backend, %.2f s elapsed)",
                 carved.removed_count, "x".join(map(str, grid.dims)), carved.backend,
                 time.perf_counter() - started)
        _write_trajectory(paths["trajectory.csv"], timeline)
        write_mask(paths["mask.bin"], grid)
        export_cavity_mesh(grid, mesh_path, sc.mesh_format, sc.mesh_binary)
        payload = build_report_json(sc, plan, timeline, grid, carved, report)
        paths["report.json"].write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        for note in payload["notes"]:
            log.info("note: %s", note)
        log.info("done")
    except BaseException:
        log.removeHandler(handler)
        handler.close()
        for p in paths.values():
            p.unlink(missing_ok=True)
        if created_dir:
            shutil.rmtree(out, ignore_errors=True)
        raise
    log.removeHandler(handler)
    handler.close()
    return paths
