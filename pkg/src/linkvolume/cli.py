"""Command-line entry point: one subcommand per pipeline stage.

Stages hand off through files in the output directory::

    simulate -> node.csv, link.csv, sightings.csv.gz, avmt.csv, aadt.csv, truth_*.csv
    match    -> routes.csv, observed.csv, spacing.csv, match_summary.json
    weight   -> link_volume.csv, weights.csv
    calibrate-> model.joblib, calibration_split.csv, link_volume_calibrated.csv
    evaluate -> eval_link_type.csv, eval_urban.csv, eval_scatter.csv

Each stage also writes ``manifest_<stage>.json``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .calibrate import (
    CalibrationModel,
    build_features,
    build_samples,
    comparison_table,
    evaluate,
    link_type_group,
    read_aadt,
    read_sld,
    split_train_test,
    train_calibrator,
)
from .config import ConfigError, PipelineConfig, build_config
from .matcher import MatchOptions, debug_rows
from .netmodel import NetworkLoadError, impute_missing_attributes, load_network, write_network
from .pipeline import InvariantViolation, MatchContext, TripOptions, prepare_network, run_partitions
from .router import Route, RouterOptions
from .simgen import (
    SimConfig,
    generate_network,
    generate_trips,
    read_ground_truth,
    score_pipeline,
    synthetic_aadt,
    synthetic_avmt,
    write_ground_truth,
)
from .spatial_index import consecutive_spacings, node_spacing_stats
from .trips import identify_trips, read_sightings, write_sightings
from .volume import (
    MissingStrataError,
    apply_weights,
    compute_weights,
    read_avmt,
    read_volumes,
    stratum_identity,
    stratum_totals,
    volumes_frame,
    write_avmt,
)

log = logging.getLogger("linkvolume")

EXIT_OK, EXIT_INPUT, EXIT_INVARIANT = 0, 1, 2
IDENTITY_TOL = 1e-9


class InputError(Exception):
    pass


class MissingArtifactError(InputError):
    def __init__(self, path: Path, stage: str):
        super().__init__(f"{path} not found; run `linkvolume {stage}` first")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(path, stage)
    return path


def _input(path: Path) -> Path:
    if not path.exists():
        raise InputError(f"input file {path} does not exist")
    return path


def write_manifest(cfg: PipelineConfig, stage: str, inputs: dict[str, Path], outputs: dict[str, Path], summary: dict) -> Path:
    import scipy
    import sklearn

    manifest: dict[str, Any] = {
        "stage": stage,
        "config": {k: v for k, v in cfg.to_dict().items() if k != "workers"},
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "inputs": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in sorted(inputs.items())},
        "outputs": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in sorted(outputs.items())},
        "summary": summary,
        "versions": {
            "linkvolume": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "pandas": pd.__version__,
            "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__,
        },
    }
    body = json.dumps(manifest, sort_keys=True, separators=(",", ":"), default=str)
    manifest["manifest_hash"] = hashlib.sha256(body.encode()).hexdigest()
    manifest["execution"] = {"workers": cfg.workers}
    path = Path(cfg.output_dir) / f"manifest_{stage}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _out(cfg: PipelineConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- stages -----------------------------------------------------------------------------


def run_simulate(cfg: PipelineConfig) -> dict:
    out = _out(cfg)
    sim = cfg.sim
    net = generate_network(sim)
    sightings, truth = generate_trips(net, sim)
    files = {
        "nodes": out / "node.csv",
        "links": out / "link.csv",
        "sightings": out / "sightings.csv.gz",
        "truth_trips": out / "truth_trips.csv",
        "truth_counts": out / "truth_counts.csv",
        "avmt": out / "avmt.csv",
        "aadt": out / "aadt.csv",
    }
    write_network(net, files["nodes"], files["links"])
    write_sightings(sightings, files["sightings"])
    write_ground_truth(truth, files["truth_trips"], files["truth_counts"])
    write_avmt(synthetic_avmt(net, truth, sim), files["avmt"])
    synthetic_aadt(net, truth, sim).to_csv(files["aadt"], index=False)
    summary = {"nodes": len(net.nodes), "links": len(net.links), "sightings": len(sightings), "trips": len(truth.trips)}
    write_manifest(cfg, "simulate", {}, files, summary)
    print(f"simulate: {summary['nodes']} nodes, {summary['links']} links, {summary['trips']} trips, {summary['sightings']} sightings")
    return summary


def _match_context(cfg: PipelineConfig) -> MatchContext:
    nodes, links = _input(cfg.path("nodes", "node.csv")), _input(cfg.path("links", "link.csv"))
    net, idx = prepare_network(nodes, links, cfg.densify_spacing)
    return MatchContext(
        net,
        idx,
        TripOptions(cfg.dwell_radius, cfg.dwell_time, cfg.min_trip_span),
        MatchOptions(cfg.search_radius, cfg.heading_gate, cfg.distance_mode),
        RouterOptions(cfg.distance_excess, cfg.max_speed, cfg.search_cap),
    )


def routes_frame(routes) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "trip_id": r.trip_id,
                "device_id": r.device_id,
                "depart_t": repr(float(r.depart_t)),
                "arrive_t": repr(float(r.arrive_t)),
                "valid": int(r.valid),
                "removed_sightings": r.removed_sightings,
                "routed_length": repr(float(r.routed_length)),
                "links": ";".join(map(str, r.links)),
            }
            for r in routes
        ],
        columns=["trip_id", "device_id", "depart_t", "arrive_t", "valid", "removed_sightings", "routed_length", "links"],
    )


def read_routes(path: Path) -> list[Route]:
    df = pd.read_csv(path, dtype={"trip_id": str, "device_id": str, "links": str}, keep_default_na=False, float_precision="round_trip")
    return [
        Route(
            trip_id=rec["trip_id"],
            links=tuple(int(v) for v in str(rec["links"]).split(";") if v),
            routed_length=float(rec["routed_length"]),
            valid=bool(int(rec["valid"])),
            removed_sightings=int(rec["removed_sightings"]),
            device_id=rec["device_id"],
            depart_t=float(rec["depart_t"]),
            arrive_t=float(rec["arrive_t"]),
        )
        for rec in df.to_dict("records")
    ]


def run_match(cfg: PipelineConfig) -> dict:
    out = _out(cfg)
    ctx = _match_context(cfg)
    sightings_path = _input(cfg.path("sightings", "sightings.csv.gz"))
    streams = read_sightings(sightings_path)
    result = run_partitions(streams, ctx, workers=cfg.workers, n_partitions=cfg.partitions)

    files = {"routes": out / "routes.csv", "observed": out / "observed.csv", "spacing": out / "spacing.csv"}
    routes_frame(result.routes).to_csv(files["routes"], index=False)
    pd.DataFrame(sorted(result.observed.items()), columns=["link_id", "observed"]).to_csv(files["observed"], index=False)
    spacings = consecutive_spacings(ctx.net)
    edges = np.arange(0.0, max(200.0, float(spacings.max()) + 10.0 if len(spacings) else 200.0) + 10.0, 10.0)
    hist, _ = np.histogram(spacings, bins=edges)
    pd.DataFrame({"bin_start_m": edges[:-1], "bin_end_m": edges[1:], "count": hist}).to_csv(files["spacing"], index=False)

    if cfg.debug_dump:
        files["debug"] = out / "match_debug.csv"
        rows = []
        for dev in sorted(streams):
            for trip in identify_trips(streams[dev], cfg.dwell_radius, cfg.dwell_time, cfg.min_trip_span):
                rows.extend(debug_rows(trip, ctx.index, ctx.net, ctx.match_opts))
        pd.DataFrame(rows).to_csv(files["debug"], index=False)

    summary = result.stats.summary()
    stats = node_spacing_stats(ctx.net, cfg.densify_spacing)
    summary["spacing_share_within"] = stats.share_within
    truth_path = Path(cfg.truth) if cfg.truth else out / "truth_trips.csv"
    if truth_path.exists():
        score = score_pipeline(read_ground_truth(truth_path), result.routes)
        summary["oracle"] = {"recall": score.recall, "precision": score.precision, "count_mae": score.count_mae}
    summary_path = out / "match_summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    files["summary"] = summary_path
    write_manifest(cfg, "match", {"sightings": sightings_path}, files, summary)
    print(
        "match: {trips} trips ({vehicle_trips} vehicle), matched share {matched_share:.3f}, "
        "{removed_sightings} removals, {invalid_routes} invalid routes".format(**summary)
    )
    if "oracle" in summary:
        print("match: oracle recall {recall:.4f} precision {precision:.4f}".format(**summary["oracle"]))
    return summary


def _load_plain_network(cfg: PipelineConfig):
    return impute_missing_attributes(load_network(_input(cfg.path("nodes", "node.csv")), _input(cfg.path("links", "link.csv"))))


def run_weight(cfg: PipelineConfig) -> dict:
    out = _out(cfg)
    observed_path = _require(out / "observed.csv", "match")
    avmt_path = _input(cfg.path("avmt", "avmt.csv"))
    net = _load_plain_network(cfg)
    df = pd.read_csv(observed_path, float_precision="round_trip")
    observed = dict(zip(df["link_id"].astype(int).tolist(), df["observed"].astype(int).tolist()))
    avmt = read_avmt(avmt_path)
    weights = compute_weights(observed, net, avmt, cfg.weighting_basis)
    volumes = apply_weights(observed, weights, net)

    totals = stratum_totals(observed, net, cfg.weighting_basis)
    files = {"volumes": out / "link_volume.csv", "weights": out / "weights.csv"}
    volumes_frame(volumes).to_csv(files["volumes"], index=False)
    pd.DataFrame(
        [
            {
                "county": s.county,
                "urban": int(s.urban),
                "functional_class": s.functional_class.value,
                "weight": w,
                "observed_total": totals[s],
                "avmt": avmt[s],
            }
            for s, w in weights.items()
        ],
        columns=["county", "urban", "functional_class", "weight", "observed_total", "avmt"],
    ).to_csv(files["weights"], index=False)

    identity = stratum_identity(volumes, net, avmt, cfg.weighting_basis)
    failures = []
    for s, (total, target, rel) in identity.items():
        status = "PASS" if rel <= IDENTITY_TOL else "FAIL"
        print(f"weight: {s.label():<32} sum={total:.6f} avmt={target:.6f} rel_err={rel:.2e} {status}")
        if status == "FAIL":
            failures.append(s.label())
    summary = {"strata_weighted": len(weights), "basis": cfg.weighting_basis, "identity_failures": failures}
    write_manifest(cfg, "weight", {"observed": observed_path, "avmt": avmt_path}, files, summary)
    if failures:
        raise InvariantViolation(f"weighting identity failed for {failures}")
    return summary


def _samples(cfg: PipelineConfig, volumes_path: Path):
    net = _load_plain_network(cfg)
    volumes = read_volumes(volumes_path)
    stations = read_aadt(_input(cfg.path("aadt", "aadt.csv")))
    sld = read_sld(_input(Path(cfg.sld))) if cfg.sld else None
    return net, volumes, build_samples(volumes, stations, net, sld), sld


def run_calibrate(cfg: PipelineConfig) -> dict:
    out = _out(cfg)
    volumes_path = _require(out / "link_volume.csv", "weight")
    net, volumes, samples, sld = _samples(cfg, volumes_path)
    test = split_train_test(len(samples), cfg.test_share, cfg.seed)
    train = [s for s, held in zip(samples, test) if not held]
    model = train_calibrator(train, folds=cfg.folds, seed=cfg.seed, grid=cfg.grid)

    files = {"model": out / "model.joblib", "split": out / "calibration_split.csv", "calibrated": out / "link_volume_calibrated.csv"}
    model.save(files["model"])
    pd.DataFrame(
        {"link_id": [f.link_id for f, _ in samples], "set": np.where(test, "test", "train")}
    ).to_csv(files["split"], index=False)

    feats = [build_features(lv, net, sld) for lv in volumes]
    preds = model.predict(feats)
    calibrated = [replace(lv, calibrated=float(p)) for lv, p in zip(volumes, preds)]
    volumes_frame(calibrated).to_csv(files["calibrated"], index=False)
    summary = {"train": len(train), "test": int(test.sum()), **{k: v for k, v in model.metadata.items() if k != "grid"}}
    manifest_files = {k: v for k, v in files.items() if k != "model"}
    write_manifest(cfg, "calibrate", {"volumes": volumes_path}, manifest_files, summary)
    print(f"calibrate: trained on {len(train)} stations, best {model.metadata['best_params']}, cv rmse {model.metadata['cv_rmse']:.3f}")
    return summary


def run_evaluate(cfg: PipelineConfig) -> dict:
    out = _out(cfg)
    model_path = _require(out / "model.joblib", "calibrate")
    split_path = _require(out / "calibration_split.csv", "calibrate")
    volumes_path = _require(out / "link_volume.csv", "weight")
    model = CalibrationModel.load(model_path)
    net, volumes, samples, _ = _samples(cfg, volumes_path)
    split = pd.read_csv(split_path, float_precision="round_trip")
    held = dict(zip(split["link_id"].astype(int).tolist(), (split["set"] == "test").tolist()))
    train = [s for s in samples if not held.get(s[0].link_id, False)]
    test = [s for s in samples if held.get(s[0].link_id, False)]
    train_report, test_report = evaluate(model, train), evaluate(model, test)

    files = {
        "by_link_type": out / "eval_link_type.csv",
        "by_urban": out / "eval_urban.csv",
        "scatter": out / "eval_scatter.csv",
    }
    comparison_table(train_report, test_report, "link_type").to_csv(files["by_link_type"], index=False)
    comparison_table(train_report, test_report, "urban").to_csv(files["by_urban"], index=False)
    rows = []
    for name, subset in (("train", train), ("test", test)):
        preds = model.predict([f for f, _ in subset]) if subset else []
        for (f, aadt), p in zip(subset, preds):
            rows.append(
                {
                    "link_id": f.link_id,
                    "set": name,
                    "aadt": aadt,
                    "weighted": f.weighted_volume,
                    "calibrated": float(p),
                    "link_type_group": link_type_group(f.link_type),
                    "urban": int(f.urban),
                }
            )
    pd.DataFrame(rows, columns=["link_id", "set", "aadt", "weighted", "calibrated", "link_type_group", "urban"]).to_csv(
        files["scatter"], index=False
    )
    o_tr, o_te = train_report.overall, test_report.overall
    summary = {
        "train": {"corr_before": o_tr.corr_before, "corr_after": o_tr.corr_after, "rmse_before": o_tr.rmse_before, "rmse_after": o_tr.rmse_after},
        "test": {"corr_before": o_te.corr_before, "corr_after": o_te.corr_after, "rmse_before": o_te.rmse_before, "rmse_after": o_te.rmse_after},
    }
    write_manifest(cfg, "evaluate", {"split": split_path, "volumes": volumes_path}, files, summary)
    for name, o in (("train", o_tr), ("test", o_te)):
        print(f"evaluate: {name} corr {o.corr_before:.3f} -> {o.corr_after:.3f}, rmse {o.rmse_before:.1f} -> {o.rmse_after:.1f}")
    return summary


STAGES = {
    "simulate": run_simulate,
    "match": run_match,
    "weight": run_weight,
    "calibrate": run_calibrate,
    "evaluate": run_evaluate,
}


# --- argument parsing -------------------------------------------------------------------


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="YAML config file")
    common.add_argument("--verbose", "-v", action="store_true")
    for f in fields(PipelineConfig):
        if f.name == "sim":
            continue
        common.add_argument(_flag(f.name), dest=f.name, default=None, metavar=f.name.upper())
    common.add_argument("-o", dest="output_dir", default=None, metavar="DIR", help="alias for --output-dir")

    parser = argparse.ArgumentParser(prog="linkvolume", description="Per-link vehicle volume from device location sightings.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="stage", required=True)
    for name in STAGES:
        p = sub.add_parser(name, parents=[common])
        if name == "simulate":
            for f in fields(SimConfig):
                p.add_argument(_flag("sim_" + f.name), dest="sim_" + f.name, default=None, metavar=f.name.upper())
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = vars(build_parser().parse_args(argv))
    stage = args.pop("stage")
    config_file = args.pop("config")
    logging.basicConfig(level=logging.INFO if args.pop("verbose") else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sim_overrides = {k[4:]: v for k, v in args.items() if k.startswith("sim_")}
    overrides = {k: v for k, v in args.items() if not k.startswith("sim_")}
    try:
        cfg = build_config(config_file, overrides, sim_overrides)
        STAGES[stage](cfg)
    except (InputError, ConfigError, NetworkLoadError, MissingStrataError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"linkvolume {stage}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except InvariantViolation as exc:
        print(f"linkvolume {stage}: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
