from __future__ import annotations

import json
from pathlib import Path

import pandas as pd
import pytest
import yaml

from linkvolume.calibrate import TABLE_COLUMNS
from linkvolume.cli import EXIT_INPUT, EXIT_INVARIANT, EXIT_OK, main, read_routes
from linkvolume.config import ConfigError, PipelineConfig, build_config

SMALL = {
    "folds": 3,
    "rf_trees": [20],
    "rf_depths": [4, None],
    "rf_min_leaf": [1],
    "partitions": 4,
    "sim": {"rows": 6, "cols": 6, "edge_length": 300.0, "n_devices": 60, "trips_per_device": 2, "drive_share": 0.8, "seed": 3},
}
ARTIFACTS = ("routes.csv", "observed.csv", "link_volume.csv", "weights.csv", "link_volume_calibrated.csv", "eval_link_type.csv")


def write_config(tmp_path: Path, **extra) -> Path:
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump({**SMALL, **extra}))
    return path


def run(cfg: Path, out: Path, *stages: str, extra=()) -> list[int]:
    return [main([stage, "-c", str(cfg), "-o", str(out), *extra]) for stage in stages]


STAGES = ("simulate", "match", "weight", "calibrate", "evaluate")


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = write_config(base)
    out = base / "out"
    codes = run(cfg, out, *STAGES)
    return cfg, out, codes


def test_end_to_end_stages(pipeline_run, capsys):
    _, out, codes = pipeline_run
    assert codes == [EXIT_OK] * 5
    for name in ARTIFACTS + ("model.joblib", "eval_urban.csv", "eval_scatter.csv", "match_summary.json"):
        assert (out / name).exists(), name
    for stage in STAGES:
        manifest = json.loads((out / f"manifest_{stage}.json").read_text())
        assert manifest["stage"] == stage and len(manifest["manifest_hash"]) == 64


def test_one_route_row_per_vehicle_trip(pipeline_run):
    _, out, _ = pipeline_run
    routes = read_routes(out / "routes.csv")
    summary = json.loads((out / "match_summary.json").read_text())
    assert len(routes) == summary["vehicle_trips"]
    assert len({r.trip_id for r in routes}) == len(routes)
    assert summary["spacing_share_within"] == 1.0
    assert summary["oracle"]["recall"] >= 0.9


def test_evaluate_tables(pipeline_run):
    _, out, _ = pipeline_run
    by_type = pd.read_csv(out / "eval_link_type.csv")
    by_area = pd.read_csv(out / "eval_urban.csv")
    assert list(by_type.columns) == list(TABLE_COLUMNS)
    assert by_type["group"].iloc[0] == "All"
    assert list(by_area["group"]) == ["All", "Rural", "Urban"]
    scatter = pd.read_csv(out / "eval_scatter.csv")
    assert set(scatter["set"]) == {"train", "test"}


def test_weight_prints_identity(pipeline_run, capsys):
    cfg, out, _ = pipeline_run
    assert run(cfg, out, "weight") == [EXIT_OK]
    lines = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("weight:")]
    assert lines and all(ln.endswith("PASS") for ln in lines)


def test_workers_give_identical_outputs(pipeline_run, tmp_path):
    cfg, out, _ = pipeline_run
    reference = {name: (out / name).read_bytes() for name in ("routes.csv", "observed.csv")}
    hashes = set()
    for workers in (1, 4):
        assert run(cfg, out, "match", extra=("--workers", str(workers))) == [EXIT_OK]
        for name, data in reference.items():
            assert (out / name).read_bytes() == data
        manifest = json.loads((out / "manifest_match.json").read_text())
        assert manifest["execution"]["workers"] == workers
        hashes.add(manifest["manifest_hash"])
    assert len(hashes) == 1


def test_empty_sightings(tmp_path, pipeline_run):
    _, out, _ = pipeline_run
    (tmp_path / "empty.csv").write_text("device_id,timestamp,lat,lon\n")
    code = main(["match", "-o", str(tmp_path), "--nodes", str(out / "node.csv"), "--links", str(out / "link.csv"),
                 "--sightings", str(tmp_path / "empty.csv")])
    assert code == EXIT_OK
    assert read_routes(tmp_path / "routes.csv") == []


def test_missing_artifact(tmp_path, capsys):
    assert main(["calibrate", "-o", str(tmp_path)]) == EXIT_INPUT
    assert "run `linkvolume weight` first" in capsys.readouterr().err


def test_missing_input_and_bad_config(tmp_path):
    assert main(["match", "-o", str(tmp_path)]) == EXIT_INPUT
    bad = tmp_path / "bad.yaml"
    bad.write_text("mystery_key: 1\n")
    assert main(["match", "-c", str(bad), "-o", str(tmp_path)]) == EXIT_INPUT
    assert main(["match", "-o", str(tmp_path), "--weighting-basis", "trips"]) == EXIT_INPUT


def test_identity_failure_exit_code(pipeline_run, monkeypatch, capsys):
    cfg, out, _ = pipeline_run
    import linkvolume.cli as cli

    real = cli.apply_weights

    def skewed(*args, **kwargs):
        vols = real(*args, **kwargs)
        for lv in vols:
            lv.weighted *= 1.001
        return vols

    monkeypatch.setattr(cli, "apply_weights", skewed)
    assert run(cfg, out, "weight") == [EXIT_INVARIANT]
    assert "FAIL" in capsys.readouterr().out
    monkeypatch.undo()
    assert run(cfg, out, "weight") == [EXIT_OK]


def test_invalid_avmt_is_input_error(pipeline_run, tmp_path):
    _, out, _ = pipeline_run
    avmt = pd.read_csv(out / "avmt.csv")
    avmt.loc[0, "avmt"] = float("inf")
    avmt.to_csv(tmp_path / "avmt.csv", index=False)
    (tmp_path / "observed.csv").write_bytes((out / "observed.csv").read_bytes())
    code = main(["weight", "-o", str(tmp_path), "--nodes", str(out / "node.csv"), "--links", str(out / "link.csv"),
                 "--avmt", str(tmp_path / "avmt.csv")])
    assert code == EXIT_INPUT


def test_config_precedence(tmp_path):
    cfg_file = write_config(tmp_path, workers=2, seed=5)
    cfg = build_config(cfg_file, env={})
    assert (cfg.workers, cfg.seed, cfg.sim.rows, cfg.rf_depths) == (2, 5, 6, (4, None))
    assert build_config(cfg_file, env={"LINKVOLUME_WORKERS": "3"}).workers == 3
    assert build_config(cfg_file, {"workers": "8"}, env={"LINKVOLUME_WORKERS": "3"}).workers == 8
    assert build_config(cfg_file, sim_overrides={"rows": "9"}, env={}).sim.rows == 9
    assert build_config(env={}) == PipelineConfig()


def test_config_hash_ignores_workers():
    a = build_config(overrides={"workers": 1}, env={})
    b = build_config(overrides={"workers": 8}, env={})
    c = build_config(overrides={"seed": 1}, env={})
    assert a.config_hash() == b.config_hash() != c.config_hash()


def test_config_validation():
    with pytest.raises(ConfigError):
        build_config(overrides={"workers": 0}, env={})
    with pytest.raises(ConfigError):
        build_config(overrides={"distance_mode": "nearest"}, env={})
    with pytest.raises(ConfigError):
        build_config(sim_overrides={"drive_share": 2}, env={})


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "linkvolume" in capsys.readouterr().out
