import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from disagg.cli import main
from disagg.data import SPLITS, descriptive_stats, read_frame_csv
from disagg.geo import load_hierarchy
from disagg.synth import SynthConfig, default_config

TINY = {"rows": 8, "cols": 8, "cell_size": 10.0, "subdivision": [1, 2, 2],
        "level_names": ["A", "B", "C"], "background": 0.1, "hours": 96,
        "hotspots": [{"center": [30, 40], "scale": 20, "amplitude": 2.0}]}
EXPLICIT_SPLITS = {"train": ["2016-01-01T00:00:00", "2016-01-03T00:00:00"],
                   "val": ["2016-01-03T00:00:00", "2016-01-04T00:00:00"],
                   "test": ["2016-01-04T00:00:00", "2016-01-05T00:00:00"]}


def _write(path, obj):
    path.write_text(json.dumps(obj), encoding="utf-8")
    return str(path)


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _digest(d: Path):
    return {p.relative_to(d).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture
def tiny(tmp_path):
    cfg = _write(tmp_path / "synth.json", TINY)
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "s")]) == 0
    return tmp_path


def _matrix(tmp_path, **kw):
    m = {"synth": "synth.json", "splits": {"val_hours": 24, "test_hours": 24},
         "tasks": [["A", "C"]], "models": ["CW"], "seeds": [0],
         "train": {"max_epochs": 2, "lr": 1e-3}, "model": {"hidden": [8], "lstm_hidden": 4,
                                                           "window": 3}}
    m.update(kw)
    return _write(tmp_path / "matrix.json", m)


def test_bundled_synth_config_is_the_default():
    root = Path(__file__).resolve().parents[1]
    cfg = json.loads((root / "configs" / "synth_default.json").read_text())
    assert SynthConfig.from_dict(cfg) == default_config()


def test_synth_writes_files_and_stats(tmp_path, capsys):
    out = tmp_path / "s"
    assert main(["synth", "--config", _write(tmp_path / "c.json", TINY), "--out", str(out)]) == 0
    assert {"records.csv", "hierarchy.json", "stats.csv", "synth_config.json"} <= {
        p.name for p in out.iterdir()}
    h = load_hierarchy(out / "hierarchy.json")
    printed = capsys.readouterr().out
    for row in _rows(out / "stats.csv"):
        frame = read_frame_csv(out / "frames" / f"{row['level']}.csv", h)
        mean, std = descriptive_stats(frame)
        assert float(row["mean"]) == pytest.approx(mean, abs=1e-6)
        assert float(row["std"]) == pytest.approx(std, abs=1e-6)
        assert row["level"] in printed


def test_synth_rerun_identical(tmp_path):
    cfg = _write(tmp_path / "c.json", {**TINY, "hours": 48})
    for name in ("a", "b"):
        assert main(["synth", "--config", cfg, "--seed", "7", "--out", str(tmp_path / name)]) == 0
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_synth_zero_hotspots_gives_zero_stats(tmp_path):
    cfg = _write(tmp_path / "c.json", {**TINY, "hotspots": [], "background": 0.0, "hours": 24})
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "z")]) == 0
    for row in _rows(tmp_path / "z" / "stats.csv"):
        assert float(row["mean"]) == 0.0 and float(row["std"]) == 0.0


def test_synth_invalid_config_exit_1(tmp_path, capsys):
    cfg = _write(tmp_path / "c.json", {**TINY, "daily_amplitude": 3})
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "x")]) == 1
    assert "daily_amplitude" in capsys.readouterr().err


def test_ingest_reproduces_synth_frames(tiny, capsys):
    s = tiny / "s"
    splits = _write(tiny / "splits.json", EXPLICIT_SPLITS)
    assert main(["ingest", "--points", str(s / "records.csv"), "--hierarchy",
                 str(s / "hierarchy.json"), "--splits", splits, "--out", str(tiny / "i")]) == 0
    summary = _rows(tiny / "i" / "split_summary.csv")
    assert [int(r["hours"]) for r in summary] == [48, 24, 24]
    assert "dropped out of bounds: 0" in capsys.readouterr().out
    h = load_hierarchy(s / "hierarchy.json")
    for lv in h.names:
        truth = read_frame_csv(s / "frames" / f"{lv}.csv", h)
        parts = [read_frame_csv(tiny / "i" / name / f"{lv}.csv", h) for name in SPLITS]
        np.testing.assert_array_equal(np.vstack([p.counts for p in parts]), truth.counts)
        np.testing.assert_array_equal(np.concatenate([p.hours for p in parts]), truth.hours)


def test_ingest_empty_points_warns_and_succeeds(tiny, capsys):
    pts = tiny / "empty.csv"
    pts.write_text("timestamp,x,y\n")
    splits = _write(tiny / "splits.json", EXPLICIT_SPLITS)
    code = main(["ingest", "--points", str(pts), "--hierarchy", str(tiny / "s" / "hierarchy.json"),
                 "--splits", splits, "--out", str(tiny / "e")])
    assert code == 0
    assert "no point records" in capsys.readouterr().err
    h = load_hierarchy(tiny / "s" / "hierarchy.json")
    assert not read_frame_csv(tiny / "e" / "test" / "C.csv", h).counts.any()


def test_ingest_malformed_points_exit_2(tiny, capsys):
    pts = tiny / "bad.csv"
    pts.write_text("timestamp,x,y\n1,2,3\n1,oops,3\n")
    splits = _write(tiny / "splits.json", EXPLICIT_SPLITS)
    code = main(["ingest", "--points", str(pts), "--hierarchy", str(tiny / "s" / "hierarchy.json"),
                 "--splits", splits, "--out", str(tiny / "e")])
    assert code == 2 and "line 3" in capsys.readouterr().err


def test_run_baselines_only(tiny):
    m = _matrix(tiny, models=["CW", "AW"])
    assert main(["run", "--config", m, "--out", str(tiny / "r")]) == 0
    rows = _rows(tiny / "r" / "metrics.csv")
    assert [r["model"] for r in rows] == ["CW", "AW"]
    assert all(r["epochs_run"] == "0" for r in rows)
    assert not list((tiny / "r" / "history").iterdir())
    manifest = json.loads((tiny / "r" / "manifest.json").read_text())
    assert {"config_hash", "hierarchy_hash", "seeds", "version", "started"} <= set(manifest)


def test_run_scheme_expansion_and_history(tiny):
    m = _matrix(tiny, models=["FNN"], schemes=["plain", "cot"])
    assert main(["run", "--config", m, "--out", str(tiny / "r")]) == 0
    rows = _rows(tiny / "r" / "metrics.csv")
    assert [r["scheme"] for r in rows] == ["plain", "cot"]
    hist = sorted((tiny / "r" / "history").iterdir())
    assert len(hist) == 2
    assert _rows(hist[0])[0].keys() == {"epoch", "train_loss", "val_loss"}


def test_run_parallel_matches_sequential(tiny):
    m = _matrix(tiny, models=["HR", "FNN"], schemes=["plain", "cot+rec-bridge"], seeds=[0, 1])
    assert main(["run", "--config", m, "--out", str(tiny / "a")]) == 0
    assert main(["run", "--config", m, "--out", str(tiny / "b"), "--jobs", "2"]) == 0
    for name in ("metrics.csv", "metrics_median.csv"):
        assert (tiny / "a" / name).read_bytes() == (tiny / "b" / name).read_bytes()


def test_run_seed_flag_shifts_seeds(tiny):
    m = _matrix(tiny, models=["CW"], seeds=[0, 1])
    assert main(["run", "--config", m, "--out", str(tiny / "r"), "--seed", "10"]) == 0
    assert [r["seed"] for r in _rows(tiny / "r" / "metrics.csv")] == ["10", "11"]


@pytest.mark.parametrize("override", [
    {"models": [{"name": "CW", "schemes": ["cot+rec-full"]}]},
    {"models": ["GBM"]},
    {"schemes": ["rec-full"], "models": ["FNN"]},
    {"tasks": [["A", "Z"]]},
    {"tasks": [["C", "A"]]},
    {"train": {"batch_size": 0}},
])
def test_run_invalid_matrix_exit_1(tiny, override):
    m = _matrix(tiny, **override)
    assert main(["run", "--config", m, "--out", str(tiny / "r")]) == 1
    assert not (tiny / "r" / "metrics.csv").exists()


def test_run_missing_level_frames_exit_2(tiny):
    splits = _write(tiny / "splits.json", EXPLICIT_SPLITS)
    s = tiny / "s"
    assert main(["ingest", "--points", str(s / "records.csv"), "--hierarchy",
                 str(s / "hierarchy.json"), "--splits", splits, "--out", str(tiny / "i")]) == 0
    for name in SPLITS:
        (tiny / "i" / name / "B.csv").unlink()
    m = _write(tiny / "m.json", {"data": "i", "tasks": [["A", "C"]], "models": ["CW"],
                                 "seeds": [0]})
    assert main(["run", "--config", m, "--out", str(tiny / "r")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_run_nan_exit_3(tiny, capsys):
    m = _matrix(tiny, models=["FNN"], train={"max_epochs": 5, "lr": 1e308})
    assert main(["run", "--config", m, "--out", str(tiny / "r")]) == 3
    assert "epoch" in capsys.readouterr().err


def test_report_tables(tmp_path, capsys):
    metrics = tmp_path / "m.csv"
    metrics.write_text(
        "task,model,scheme,weighted,seed,mae_raw,mae_per_area,best_epoch,epochs_run\n"
        "A->C,CW,-,-,0,3.0,0.3,0,0\n"
        "A->C,FNN,plain,true,0,1.0,0.1,4,9\n"
        "A->C,FNN,plain,true,1,2.0,0.2,4,9\n"
        "A->C,FNN,plain,true,2,9.0,0.9,4,9\n"
        "A->B,CW,-,-,0,0.5,0.05,0,0\n"
        "A->B,FNN,cot,false,0,0.7,0.07,4,9\n")
    assert main(["report", str(metrics), "--out", str(tmp_path / "rep")]) == 0
    pivot = _rows(tmp_path / "rep" / "pivot_mae_raw.csv")
    assert [r["task"] for r in pivot] == ["A->C", "A->B"]
    assert pivot[0]["FNN"] == "2.0" and pivot[0]["best"] == "FNN"
    assert pivot[1]["best"] == "CW" and pivot[1]["FNN"] == ""
    assert pivot[1]["FNN+cot(unweighted)"] == "0.7"
    long = _rows(tmp_path / "rep" / "long.csv")
    for metric in ("mae_raw", "mae_per_area"):
        assert sum(int(r["n"]) for r in long if r["metric"] == metric) == 6
    assert "best" in capsys.readouterr().out


def test_report_single_row(tmp_path):
    metrics = tmp_path / "m.csv"
    metrics.write_text("task,model,scheme,mae_raw,mae_per_area\nA->C,CW,-,1.5,0.1\n")
    assert main(["report", str(metrics), "--out", str(tmp_path / "rep")]) == 0
    pivot = _rows(tmp_path / "rep" / "pivot_mae_raw.csv")
    assert pivot == [{"task": "A->C", "CW": "1.5", "best": "CW"}]


def test_report_malformed_exit_2(tmp_path):
    metrics = tmp_path / "m.csv"
    metrics.write_text("task,model\nA,B\n")
    assert main(["report", str(metrics), "--out", str(tmp_path / "rep")]) == 2
    metrics.write_text("task,model,scheme,mae_raw,mae_per_area\nA->C,CW,-,abc,0.1\n")
    assert main(["report", str(metrics), "--out", str(tmp_path / "rep")]) == 2


def test_usage_errors_exit_1():
    with pytest.raises(SystemExit) as exc:
        main(["run", "--out", "x"])
    assert exc.value.code == 1
    assert main(["run", "--config", "/nonexistent.json", "--out", "x"]) == 1
