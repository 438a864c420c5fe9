import json
import textwrap

import numpy as np
import pytest
import yaml

from ctsdr.cli import main
from ctsdr.scenario import (ScenarioError, load_scenario, parse_scenario, run_scenario,
                            serialize_scenario)
from ctsdr.voxel import read_mask, read_ply

from conftest import BUNDLED, scenario_path

MINIMAL_U = """\
guide:
  curve_radius_mm: 39.9
  deployable_length_mm: 120
plan:
  type: u_shape
output:
  directory: out/u
"""

SMALL_J = """\
name: small_j
guide:
  curve_radius_mm: 71.1
  deployable_length_mm: 60
block:
  size_mm: [30, 30, 30]
plan:
  type: j_shape
  depth_mm: 12
sim:
  dt_s: 0.01
  h_mm: 0.5
output:
  directory: {out}
"""


def small_j(tmp_path):
    text = SMALL_J.format(out=tmp_path / "run")
    return parse_scenario(text)


def test_minimal_u_shape_defaults():
    sc = parse_scenario(MINIMAL_U)
    assert sc.tool.cutter_diameter_mm == 6.75
    assert sc.tool.cutter_length_mm == 10
    assert sc.tool.spindle_rpm == 8250
    assert sc.plan_params["depth_mm"] == 120
    assert sc.build_plan().duration_s == pytest.approx(75.0)
    assert any(d.startswith("plan.depth_mm=120.0") for d in sc.defaulted)


def test_missing_guide_radius():
    text = MINIMAL_U.replace("  curve_radius_mm: 39.9\n", "")
    with pytest.raises(ScenarioError, match=r"guide\.curve_radius_mm required"):
        parse_scenario(text)


def test_unknown_plan_type_lists_valid_types():
    with pytest.raises(ScenarioError) as info:
        parse_scenario(MINIMAL_U.replace("u_shape", "zigzag"))
    msg = str(info.value)
    for t in ("j_shape", "u_shape", "branches", "stepped_rotation", "spiral"):
        assert t in msg


def test_malformed_number_reports_line():
    with pytest.raises(ScenarioError) as info:
        parse_scenario(MINIMAL_U.replace("120", "12O"))
    assert info.value.line == 3


@pytest.mark.parametrize("text,match", [
    (MINIMAL_U + "extra: 1\n", "unknown section"),
    (MINIMAL_U.replace("  type: u_shape\n", "  type: u_shape\n  speed: 3\n"), "speed"),
    (MINIMAL_U.replace("plan:\n  type: u_shape\n", ""), "plan.type required"),
    (MINIMAL_U + "sim:\n  dt_s: 0\n", "dt_s"),
    (MINIMAL_U + "block:\n  density_pcf: 7\n", "density"),
    ("", "empty"),
    ("guide: [1, 2\n", "malformed"),
])
def test_parse_errors(text, match):
    with pytest.raises(ScenarioError, match=match):
        parse_scenario(text)


def test_negative_radius_is_validation_error():
    with pytest.raises(ScenarioError):
        parse_scenario(MINIMAL_U.replace("39.9", "-39.9"))


@pytest.mark.parametrize("name", BUNDLED)
def test_round_trip(name):
    sc = load_scenario(scenario_path(name))
    again = parse_scenario(serialize_scenario(sc))
    assert again == sc
    assert serialize_scenario(again) == serialize_scenario(sc)


def test_bundled_corpus_complete():
    assert {"u_shape", "j_shape", "branches", "stepped_rotation", "stepped_rotation_partial",
            "spiral"} <= set(BUNDLED)


@pytest.mark.parametrize("name", BUNDLED)
def test_cli_check_bundled(name, capsys):
    assert main(["check", str(scenario_path(name))]) == 0
    assert "ok" in capsys.readouterr().out


def test_run_writes_artifacts(tmp_path):
    sc = small_j(tmp_path)
    paths = run_scenario(sc)
    assert sorted(p.name for p in paths.values()) == sorted(
        ["trajectory.csv", "cavity.ply", "mask.bin", "report.json", "run.log"])
    report = json.loads(paths["report.json"].read_text())
    assert set(report) >= {"scenario", "plan", "cavity", "metrics", "carve", "notes"}
    assert report["cavity"]["plan_label"] == "j_shape"
    traj = np.loadtxt(paths["trajectory.csv"], delimiter=",", skiprows=1)
    assert traj.shape[1] == 9 and traj[-1, 1] == pytest.approx(12.0)
    grid = read_mask(paths["mask.bin"])
    assert grid.count == report["carve"]["removed_count"]
    verts, tris = read_ply(paths["cavity.ply"])
    assert len(tris) > 0
    log = paths["run.log"].read_text()
    assert "default applied: tool.cutter_diameter_mm=6.75" in log
    assert "resolved scenario" in log


def test_resolved_log_reconstructs_scenario(tmp_path):
    sc = small_j(tmp_path)
    log = run_scenario(sc)["run.log"].read_text()
    body = log.split("resolved scenario:\n", 1)[1].split("\nINFO ", 1)[0]
    assert parse_scenario(body) == sc


def test_rerun_byte_identical_across_workers(tmp_path):
    sc = small_j(tmp_path)
    a = run_scenario(sc, tmp_path / "a", workers=1)
    b = run_scenario(sc, tmp_path / "b", workers=4)
    for name in ("trajectory.csv", "mask.bin", "report.json", "cavity.ply"):
        assert a[name].read_bytes() == b[name].read_bytes(), name


def test_stl_output(tmp_path):
    text = SMALL_J.format(out=tmp_path / "stl") + "  mesh_format: stl\n  mesh_binary: false\n"
    paths = run_scenario(parse_scenario(text))
    assert "cavity.stl" in paths and not (tmp_path / "stl" / "cavity.ply").exists()
    assert paths["cavity.stl"].read_text().startswith("solid")


def test_failed_run_leaves_no_artifacts(tmp_path):
    # the cutter advances 8 mm per 5 s step, so carving rejects the sweep
    text = SMALL_J.format(out=tmp_path / "bad").replace("dt_s: 0.01", "dt_s: 5.0")
    assert main(["run", str(_write(tmp_path, text))]) == 3
    assert not (tmp_path / "bad").exists()


def _write(tmp_path, text, name="sc.yaml"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_cli_empty_plan_exit_two_no_artifacts(tmp_path, capsys):
    text = textwrap.dedent(f"""\
        guide:
          curve_radius_mm: 71.1
          deployable_length_mm: 60
        plan:
          type: stepped_rotation
          n_steps: 0
        output:
          directory: {tmp_path / 'empty'}
        """)
    assert main(["run", str(_write(tmp_path, text))]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["exit_code"] == 2 and "n_steps" in err["message"]
    assert not (tmp_path / "empty").exists()


def test_cli_validation_error_has_line(tmp_path, capsys):
    p = _write(tmp_path, MINIMAL_U.replace("120", "abc"))
    assert main(["check", str(p)]) == 2
    assert json.loads(capsys.readouterr().err)["line"] == 3


def test_cli_missing_file(tmp_path):
    assert main(["check", str(tmp_path / "nope.yaml")]) == 2


def test_cli_run_and_mesh(tmp_path, capsys):
    p = _write(tmp_path, SMALL_J.format(out=tmp_path / "cli"))
    assert main(["run", str(p), "--workers", "2"]) == 0
    assert "voxels removed" in capsys.readouterr().out
    mask = tmp_path / "cli" / "mask.bin"
    assert main(["mesh", str(mask), "-o", str(tmp_path / "m.stl"), "--format", "stl"]) == 0
    assert (tmp_path / "m.stl").stat().st_size > 84
    assert main(["mesh", str(mask), "-o", str(tmp_path / "m.ply")]) == 0
    assert (tmp_path / "m.ply").read_bytes() == (tmp_path / "cli" / "cavity.ply").read_bytes()


def test_cli_run_out_override(tmp_path):
    p = _write(tmp_path, SMALL_J.format(out=tmp_path / "ignored"))
    assert main(["run", str(p), "--out", str(tmp_path / "over")]) == 0
    assert (tmp_path / "over" / "report.json").exists()
    assert not (tmp_path / "ignored").exists()


def test_spiral_report_has_pitch_check(tmp_path):
    text = textwrap.dedent(f"""\
        guide: {{curve_radius_mm: 39.9, deployable_length_mm: 120}}
        block: {{size_mm: [60, 60, 40]}}
        plan: {{type: spiral, depth_mm: 10}}
        sim: {{dt_s: 0.01, h_mm: 0.5}}
        output: {{directory: {tmp_path / 'sp'}}}
        """)
    report = json.loads(run_scenario(parse_scenario(text))["report.json"].read_text())
    assert report["pitch_check"]["satisfied"] is False
    assert report["pitch_check"]["pitch_mm"] == pytest.approx(73.53, abs=0.005)
    assert set(report["spiral_radii"]) == {"initial_radius_mm", "final_radius_mm"}
    assert any("pitch" in n for n in report["notes"])


@pytest.mark.slow
@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_scenarios_run(name, bundled_runs):
    paths = bundled_runs(name)
    report = json.loads(paths["report.json"].read_text())
    assert report["carve"]["removed_count"] > 0
    assert report["cavity"]["plan_label"] == load_scenario(scenario_path(name)).plan_type
