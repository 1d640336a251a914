"""Command line verbs, exit codes, and output formats."""

import subprocess
import sys

import numpy as np
import pytest

from gpfield.cli import main
from gpfield.pipeline import Pipeline
from gpfield.ply import read_ply

SPHERE_SCENE = "sphere 0 0 0 1\n"

RUN_ARGS = ["--frames", "4", "--orbit-radius", "2.5",
            "--sensor", "pinhole", "--width", "24", "--height", "18",
            "--focal", "25", "--max-range", "8", "--quiet"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One integrated sphere map shared by the read-only verbs."""
    root = tmp_path_factory.mktemp("cli")
    scene = root / "sphere.scene"
    scene.write_text(SPHERE_SCENE)
    snap = root / "map.snap"
    code = main(["run", "--scene", str(scene), "--snapshot", str(snap),
                 *RUN_ARGS])
    assert code == 0
    return root


def test_run_writes_all_outputs(tmp_path, capsys):
    scene = tmp_path / "s.scene"
    scene.write_text(SPHERE_SCENE)
    snap, mesh, stats = (tmp_path / n for n in ("m.snap", "m.ply", "m.csv"))
    code = main(["run", "--scene", str(scene), "--snapshot", str(snap),
                 "--mesh", str(mesh), "--stats", str(stats),
                 *RUN_ARGS[:-1]])
    out = capsys.readouterr().out
    assert code == 0
    assert "frame 0:" in out and "done frames=4" in out
    assert snap.exists() and mesh.exists()
    assert stats.read_text().splitlines()[0] == "frame,stage,ms,points,voxels,leaves"
    pipe = Pipeline.load_snapshot(snap)
    assert pipe.frame_index == 4
    assert read_ply(mesh)["vertices"].shape[0] > 0


def test_run_without_outputs_fails(tmp_path, capsys):
    scene = tmp_path / "s.scene"
    scene.write_text(SPHERE_SCENE)
    code = main(["run", "--scene", str(scene), *RUN_ARGS])
    assert code == 1
    assert capsys.readouterr().err.startswith("error:")


def test_run_missing_scene_file_fails(tmp_path, capsys):
    code = main(["run", "--scene", str(tmp_path / "nope.scene"),
                 "--snapshot", str(tmp_path / "m.snap"), *RUN_ARGS])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_run_set_overrides_config(tmp_path):
    scene = tmp_path / "s.scene"
    scene.write_text(SPHERE_SCENE)
    snap = tmp_path / "m.snap"
    code = main(["run", "--scene", str(scene), "--snapshot", str(snap),
                 "--set", "voxel_size=0.08", "--set", "band_width=2",
                 *RUN_ARGS])
    assert code == 0
    cfg = Pipeline.load_snapshot(snap).config
    assert cfg.voxel_size == 0.08
    assert cfg.band_width == 2


def test_run_config_file_plus_set_precedence(tmp_path):
    scene = tmp_path / "s.scene"
    scene.write_text(SPHERE_SCENE)
    cfgfile = tmp_path / "map.cfg"
    cfgfile.write_text("voxel_size = 0.1\nband_width = 2\n")
    snap = tmp_path / "m.snap"
    code = main(["run", "--scene", str(scene), "--snapshot", str(snap),
                 "--config", str(cfgfile), "--set", "voxel_size=0.08",
                 *RUN_ARGS])
    assert code == 0
    cfg = Pipeline.load_snapshot(snap).config
    assert cfg.voxel_size == 0.08      # --set wins over the file
    assert cfg.band_width == 2         # file key survives


def test_bad_set_values_fail(tmp_path, capsys):
    scene = tmp_path / "s.scene"
    scene.write_text(SPHERE_SCENE)
    base = ["run", "--scene", str(scene),
            "--snapshot", str(tmp_path / "m.snap"), *RUN_ARGS]
    assert main(base + ["--set", "voxel_size"]) == 1
    assert main(base + ["--set", "no_such_key=1"]) == 1
    err = capsys.readouterr().err
    assert err.count("error:") == 2


def test_mesh_verb_exports_ply(workdir, capsys):
    out = workdir / "sphere.ply"
    code = main(["mesh", str(workdir / "map.snap"), "--out", str(out)])
    stdout = capsys.readouterr().out
    assert code == 0
    assert stdout.startswith("vertices=")
    data = read_ply(out)
    radii = np.linalg.norm(data["vertices"], axis=1)
    assert np.median(np.abs(radii - 1.0)) < 0.1


def test_slice_verb_writes_csv(workdir, capsys):
    out = workdir / "slice.csv"
    code = main(["slice", str(workdir / "map.snap"),
                 "--bounds=-1.2,1.2,-1.2,1.2", "--resolution", "0.4",
                 "--out", str(out)])
    stdout = capsys.readouterr().out
    assert code == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "x,y,distance,gradient_x,gradient_y"
    assert stdout.strip() == f"rows={len(lines) - 1}"
    assert len(lines) == 1 + 7 * 7


def test_slice_verb_error_column_with_scene(workdir):
    out = workdir / "slice_err.csv"
    code = main(["slice", str(workdir / "map.snap"),
                 "--bounds=-1,1,-1,1", "--resolution", "0.5",
                 "--out", str(out), "--scene", str(workdir / "sphere.scene")])
    assert code == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0].endswith(",error")
    errs = [abs(float(ln.split(",")[5])) for ln in lines[1:]]
    assert np.median(errs) < 0.2


def test_query_verb_prints_rows(workdir, capsys):
    code = main(["query", str(workdir / "map.snap"), "1.5,0,0", "0,0,2.0"])
    out = capsys.readouterr().out.strip().splitlines()
    assert code == 0
    assert out[0] == ("x,y,z,distance,variance,gradient_x,gradient_y,"
                      "gradient_z,free_space")
    assert len(out) == 3
    row = dict(zip(out[0].split(","), out[1].split(",")))
    assert float(row["distance"]) == pytest.approx(0.5, abs=0.1)
    assert row["free_space"] in ("0", "1")


def test_query_verb_reads_points_file(workdir, capsys):
    pts = workdir / "pts.txt"
    pts.write_text("1.5 0 0\n0 1.5 0\n")
    code = main(["query", str(workdir / "map.snap"),
                 "--points-file", str(pts)])
    out = capsys.readouterr().out.strip().splitlines()
    assert code == 0
    assert len(out) == 3


def test_query_verb_input_errors(workdir, capsys):
    assert main(["query", str(workdir / "map.snap")]) == 1
    assert main(["query", str(workdir / "map.snap"), "1,2"]) == 1
    err = capsys.readouterr().err
    assert err.count("error:") == 2


def test_eval_verb_reports_metrics(workdir, capsys):
    code = main(["eval", str(workdir / "map.snap"),
                 "--scene", str(workdir / "sphere.scene"),
                 "--bounds=-1.3,1.3,-1.3,1.3,-1.3,1.3",
                 "--resolution", "0.25", "--band", "0.05,0.4",
                 "--chamfer", "--surface-resolution", "0.05"])
    out = capsys.readouterr().out
    assert code == 0
    metrics = dict(ln.split("=", 1) for ln in out.strip().splitlines())
    assert set(metrics) == {"rmse", "rmse_points", "chamfer", "completeness"}
    assert 0.0 < float(metrics["rmse"]) < 0.2
    assert int(metrics["rmse_points"]) > 100
    # Four coarse frames leave gaps, so only sanity-bound the mesh metrics.
    assert 0.0 < float(metrics["chamfer"]) < 0.5
    assert 0.2 < float(metrics["completeness"]) <= 1.0


def test_bench_verb_emits_timings(tmp_path, capsys):
    scene = tmp_path / "s.scene"
    scene.write_text(SPHERE_SCENE)
    code = main(["bench", "--scene", str(scene), *RUN_ARGS[:-1],
                 "--stats", str(tmp_path / "bench.csv")])
    captured = capsys.readouterr()
    assert code == 0
    assert "trained=" in captured.err
    rows = (tmp_path / "bench.csv").read_text().strip().splitlines()
    assert rows[0] == "frame,stage,ms,points,voxels,leaves"
    stages = {ln.split(",")[1] for ln in rows[1:]}
    assert "global_train" in stages and "total" in stages


def test_bench_verb_defaults_to_stdout(tmp_path, capsys):
    scene = tmp_path / "s.scene"
    scene.write_text(SPHERE_SCENE)
    code = main(["bench", "--scene", str(scene), *RUN_ARGS[:-1]])
    captured = capsys.readouterr()
    assert code == 0
    assert captured.out.startswith("frame,stage,ms,points,voxels,leaves")


def test_usage_errors_exit_two(workdir):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["slice", str(workdir / "map.snap")])    # --bounds missing
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_console_script_roundtrip(tmp_path):
    scene = tmp_path / "s.scene"
    scene.write_text(SPHERE_SCENE)
    snap = tmp_path / "m.snap"
    run = subprocess.run(
        [sys.executable, "-m", "gpfield.cli", "run", "--scene", str(scene),
         "--snapshot", str(snap), *RUN_ARGS],
        capture_output=True, text=True)
    assert run.returncode == 0, run.stderr
    query = subprocess.run(
        [sys.executable, "-m", "gpfield.cli", "query", str(snap), "1.5,0,0"],
        capture_output=True, text=True)
    assert query.returncode == 0, query.stderr
    assert query.stdout.splitlines()[0].startswith("x,y,z,distance")
    bad = subprocess.run(
        [sys.executable, "-m", "gpfield.cli", "mesh", str(tmp_path / "no.snap"),
         "--out", str(tmp_path / "no.ply")],
        capture_output=True, text=True)
    assert bad.returncode == 1
    assert bad.stderr.startswith("error:")
