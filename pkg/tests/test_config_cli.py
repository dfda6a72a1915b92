import json
import subprocess
import sys
from importlib import resources

import numpy as np
import pytest

from ndmag import cli, config
from ndmag.errors import ConfigError
from ndmag.stack_io import load_stack, read_table

SMALL_SCENE = {
    "seed": 11,
    "camera": {"width": 96, "height": 96, "frames_averaged": 8},
    "sweep": {"start_hz": 2.76e9, "stop_hz": 2.98e9, "n_frames": 221},
    "bias_field_t": [0.0016, -0.002, 0.002],
    "wire": {"current_a": 0.6},
    "random_spots": {"n": 5, "min_separation_px": 16, "margin_px": 12, "peak_counts": [2000, 3000],
                     "contrast": [0.03, 0.06]},
}


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def analyzed(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    scene = write_json(root / "scene.json", SMALL_SCENE)
    assert cli.main(["simulate", "--scene", str(scene), "--out", str(root / "stack")]) == 0
    assert cli.main(["analyze", "--stack", str(root / "stack"), "--out", str(root / "out")]) == 0
    return root


def test_defaults():
    cfg = config.build_config(environ={})
    assert cfg["track.max_drift_px"] == 3.0
    assert cfg["extract.baseline_fraction"] == 0.1
    assert cfg["fit.max_iter"] == 500


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match="detect.nope"):
        config.build_config(overrides=["detect.nope=1"], environ={})
    f = write_json(tmp_path / "c.json", {"fit": {"bogus": 1}})
    with pytest.raises(ConfigError, match="fit.bogus"):
        config.build_config([f], environ={})


def test_precedence_file_env_cli(tmp_path):
    f = write_json(tmp_path / "c.json", {"runtime": {"threads": 2}, "detect": {"threshold_sigma": 4}})
    cfg = config.build_config([f], environ={})
    assert cfg["runtime.threads"] == 2 and cfg["detect.threshold_sigma"] == 4.0
    cfg = config.build_config([f], environ={config.THREADS_ENV: "3"})
    assert cfg["runtime.threads"] == 3
    cfg = config.build_config([f], ["runtime.threads=4"], environ={config.THREADS_ENV: "3"})
    assert cfg["runtime.threads"] == 4


def test_dotted_keys_in_file(tmp_path):
    f = write_json(tmp_path / "c.json", {"geometry.wire_point_um": [0, -50]})
    assert config.build_config([f], environ={})["geometry.wire_point_um"] == (0.0, -50.0)


@pytest.mark.parametrize("assignment", ["fit.max_iter=1.5", "track.enabled=maybe", "runtime.threads=0",
                                        "fit.expected_pairs=5", "extract.radius=-1", "nokey"])
def test_invalid_values(assignment):
    with pytest.raises(ConfigError):
        config.build_config(overrides=[assignment], environ={})


def test_config_json_round_trip(tmp_path):
    cfg = config.build_config(overrides=["extract.radius=2.5", "geometry.antenna_point_um=[1,2]"], environ={})
    f = tmp_path / "cfg.json"
    f.write_text(config.to_json(cfg))
    assert config.build_config([f], environ={}) == cfg


def test_example_scene_is_valid():
    from ndmag import simulate

    with resources.as_file(resources.files("ndmag") / "data" / "example_scene.json") as path:
        scene = simulate.load_scene(path)
    assert len(scene.spots) == 50


def test_simulate_writes_loadable_stack(analyzed):
    stack = load_stack(analyzed / "stack")
    assert stack.manifest.n_frames == 221
    truth = json.loads((analyzed / "stack" / "ground_truth.json").read_text())
    assert len(truth["spots"]) == 5


def test_simulate_is_deterministic(analyzed, tmp_path):
    assert cli.main(["simulate", "--scene", str(analyzed / "scene.json"), "--out", str(tmp_path / "again")]) == 0
    for f in sorted((analyzed / "stack").iterdir()):
        assert (tmp_path / "again" / f.name).read_bytes() == f.read_bytes()


def test_malformed_scene_json(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"seed": 1,\n  "camera": }')
    assert cli.main(["simulate", "--scene", str(bad), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "line 2" in err


def test_scene_error_names_key(tmp_path, capsys):
    doc = dict(SMALL_SCENE, camera={"width": 96, "height": 96, "bogus_key": 1})
    assert cli.main(["simulate", "--scene", str(write_json(tmp_path / "s.json", doc)), "--out", str(tmp_path / "o")]) == 2
    assert "camera.bogus_key" in capsys.readouterr().err


def test_missing_scene_file(tmp_path):
    assert cli.main(["simulate", "--scene", str(tmp_path / "none.json"), "--out", str(tmp_path / "o")]) == 2


def test_analyze_outputs(analyzed):
    out = analyzed / "out"
    for name in ("spots.csv", "spectra.csv", "fits.csv", "fields.csv", "stats.csv", "config.json", "run.json"):
        assert (out / name).is_file()
    fields = read_table(out / "fields.csv", "fields")
    assert len(fields) >= 4
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["track"]["max_drift_px"] == 3.0


def test_analyze_rerun_byte_identical(analyzed, tmp_path):
    assert cli.main(["analyze", "--stack", str(analyzed / "stack"), "--out", str(tmp_path / "o")]) == 0
    for f in sorted((analyzed / "out").iterdir()):
        assert (tmp_path / "o" / f.name).read_bytes() == f.read_bytes()


def test_analyze_threads_match_serial(analyzed, tmp_path):
    assert cli.main(["analyze", "--stack", str(analyzed / "stack"), "--out", str(tmp_path / "o"),
                     "--set", "runtime.threads=3"]) == 0
    for name in ("fields.csv", "fits.csv", "spectra.csv"):
        assert (tmp_path / "o" / name).read_bytes() == (analyzed / "out" / name).read_bytes()


def test_analyze_empty_stack_exit_3(tmp_path):
    doc = {k: v for k, v in SMALL_SCENE.items() if k != "random_spots"}
    scene = write_json(tmp_path / "s.json", doc)
    assert cli.main(["simulate", "--scene", str(scene), "--out", str(tmp_path / "stack")]) == 0
    assert cli.main(["analyze", "--stack", str(tmp_path / "stack"), "--out", str(tmp_path / "o")]) == 3
    assert read_table(tmp_path / "o" / "fields.csv", "fields") == []


def test_analyze_unreadable_stack_exit_2(tmp_path):
    assert cli.main(["analyze", "--stack", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "empty").mkdir()
    assert cli.main(["analyze", "--stack", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == 2


def test_analyze_bad_config_exit_2(analyzed, tmp_path):
    assert cli.main(["analyze", "--stack", str(analyzed / "stack"), "--out", str(tmp_path / "o"),
                     "--set", "fit.unknown=1"]) == 2


def test_report_outputs_and_determinism(analyzed, tmp_path):
    assert cli.main(["report", "--in", str(analyzed / "out"), "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["report", "--in", str(analyzed / "out"), "--out", str(tmp_path / "b")]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    for name in ("summary.csv", "kde_contrast.csv", "kde_fwhm.csv", "sensitivity.csv", "map.csv", "gradient.csv"):
        assert name in names
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    grad = read_table(tmp_path / "a" / "gradient.csv", "gradient")
    assert len(grad) == 1 and np.isfinite(grad[0]["slope_t_per_um"])


def test_report_missing_inputs_exit_2(tmp_path):
    assert cli.main(["report", "--in", str(tmp_path), "--out", str(tmp_path / "o")]) == 2


def test_report_single_spot_summary_only(analyzed, tmp_path, capsys):
    src = tmp_path / "one"
    src.mkdir()
    for name in ("fields.csv", "stats.csv"):
        lines = (analyzed / "out" / name).read_text().splitlines(keepends=True)
        (src / name).write_text("".join(lines[:2]))
    (src / "run.json").write_text((analyzed / "out" / "run.json").read_text())
    assert cli.main(["report", "--in", str(src), "--out", str(tmp_path / "o")]) == 0
    assert sorted(p.name for p in (tmp_path / "o").iterdir()) == ["summary.csv"]
    assert "report_reduced" in capsys.readouterr().err


def test_log_lines_are_json(analyzed, tmp_path, capsys):
    cli.main(["-v", "analyze", "--stack", str(analyzed / "stack"), "--out", str(tmp_path / "o")])
    lines = [ln for ln in capsys.readouterr().err.splitlines() if ln.strip()]
    assert lines
    for ln in lines:
        doc = json.loads(ln)
        assert "event" in doc and "level" in doc


def test_usage_errors_exit_2():
    assert cli.main([]) == 2
    assert cli.main(["analyze", "--stack"]) == 2


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "ndmag.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    assert "simulate" in out.stdout and "analyze" in out.stdout and "report" in out.stdout
