"""Command-line entry point.

Subcommands: gen-data, train, calibrate, detect, evaluate. Every command
resolves its configuration from defaults, an optional flat key=value config
file, and CLI flags (in that precedence order), then echoes the fully
resolved configuration into the output directory before doing any work so a
run can be reproduced from its artifacts alone.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import detect as dtc
from . import explain, metrics, synth
from .experiment import default_grid, run_experiment
from .model import (DTModel, ModelConfig, TrainConfig, load_checkpoint,
                    save_checkpoint, train)
from .rng import derive_seed
from .timeseries import (FeatureSchema, fit_normalizer, load_csv, make_windows,
                         split_chrono)

# Table-driven model profiles; "custom" takes every dimension from flags.
PROFILES = {
    "vessel": {"dropout": 0.1, "sample_rate_hz": 1.0},
    "robot": {"dropout": 0.2, "sample_rate_hz": 10.0},
}


def _read_config_file(path: Path) -> dict:
    """Flat `key = value` lines; '#' starts a comment."""
    cfg = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        cfg[key] = value
    return cfg


def _resolve(args, defaults: dict) -> dict:
    cfg = dict(defaults)
    if getattr(args, "config", None):
        file_cfg = _read_config_file(Path(args.config))
        for key, value in file_cfg.items():
            if key not in cfg:
                raise ValueError(f"unknown config key {key!r}")
            cfg[key] = type(defaults[key])(value) if defaults[key] is not None else value
    for key in cfg:
        flag = key.replace("-", "_")
        if getattr(args, flag, None) is not None:
            cfg[key] = getattr(args, flag)
    return cfg


def _echo_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.resolved.txt", "w", encoding="utf-8") as f:
        for key in sorted(cfg):
            f.write(f"{key} = {cfg[key]}\n")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", required=True, help="output directory")


def cmd_gen_data(args) -> int:
    defaults = {
        "seed": 0, "scenario": "vessel", "maneuver": "Zigzag", "variant": "15",
        "case": "None", "duration": 1200.0, "noise_sigma": 0.3,
    }
    cfg = _resolve(args, defaults)
    out = Path(args.out)
    _echo_config(cfg, out)
    if cfg["scenario"] == "vessel":
        variant = cfg["variant"]
        if cfg["maneuver"] in ("Zigzag", "Turning"):
            variant = int(variant)
        scenario = synth.VesselScenario(
            maneuver=cfg["maneuver"], variant=variant,
            disturbance_case=cfg["case"], duration_s=float(cfg["duration"]),
            seed=int(cfg["seed"]))
        trace = synth.gen_vessel(scenario)
    elif cfg["scenario"] == "robot":
        sig = float(cfg["noise_sigma"])
        scenario = synth.RobotScenario(
            waypoints=((0.0, 0.0), (6.0, 1.0), (8.0, 6.0), (3.0, 8.0), (-2.0, 4.0)),
            noise_sigma=(sig, sig, sig * 0.6),
            seed=int(cfg["seed"]))
        trace = synth.gen_robot(scenario)
    else:
        raise ValueError(f"unknown scenario kind {cfg['scenario']!r}")
    synth.export_trace(trace, out / "trace.csv")
    print(f"wrote {out / 'trace.csv'} ({trace.series.length} rows)")
    return 0


def _model_defaults() -> dict:
    return {
        "seed": 0, "profile": "vessel", "w": 60, "h": 60, "stride": 1,
        "d_model": 64, "n_heads": 4, "d_ff": 128, "dropout": -1.0,
        "encoder_layers": 2, "decoder_layers": 2,
        "batch_size": 16, "learning_rate": 1e-4, "epochs": 200,
        "plateau_patience": 0, "train_frac": 0.7, "val_frac": 0.2,
    }


def cmd_train(args) -> int:
    cfg = _resolve(args, _model_defaults())
    out = Path(args.out)
    _echo_config(cfg, out)
    profile = PROFILES.get(cfg["profile"], {"dropout": 0.1, "sample_rate_hz": 1.0})
    dropout = cfg["dropout"] if cfg["dropout"] >= 0 else profile["dropout"]

    with open(args.data, encoding="utf-8") as f:
        header = f.readline().strip().split(",")
    schema = FeatureSchema(names=tuple(header))
    series = load_csv(args.data, schema, profile["sample_rate_hz"])
    raw_windows = make_windows(series, int(cfg["w"]), int(cfg["h"]),
                               stride=int(cfg["stride"]))
    train_raw, val_raw, _ = split_chrono(raw_windows, float(cfg["train_frac"]),
                                         float(cfg["val_frac"]))
    train_rows = series.values[: train_raw[-1].end_step + 1]
    normalizer = fit_normalizer(series.__class__(
        schema=schema, sample_rate_hz=series.sample_rate_hz, values=train_rows))
    norm_series = normalizer.normalize_series(series)
    windows = make_windows(norm_series, int(cfg["w"]), int(cfg["h"]),
                           stride=int(cfg["stride"]))
    train_w, val_w, _ = split_chrono(windows, float(cfg["train_frac"]),
                                     float(cfg["val_frac"]))

    model_cfg = ModelConfig(
        d_features=schema.dim, w=int(cfg["w"]), h=int(cfg["h"]),
        d_model=int(cfg["d_model"]), n_heads=int(cfg["n_heads"]),
        d_ff=int(cfg["d_ff"]), dropout=float(dropout),
        n_encoder_layers=int(cfg["encoder_layers"]),
        n_decoder_layers=int(cfg["decoder_layers"]))
    train_cfg = TrainConfig(
        batch_size=int(cfg["batch_size"]),
        learning_rate=float(cfg["learning_rate"]),
        epochs=int(cfg["epochs"]), seed=int(cfg["seed"]),
        plateau_patience=int(cfg["plateau_patience"]) or None)

    model = DTModel(model_cfg, init_seed=train_cfg.seed)
    model, history = train(model, train_w, val_w, train_cfg)
    save_checkpoint(model, model_cfg, normalizer, out / "checkpoint.ckpt")
    with open(out / "history.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "train_forecast", "train_recon", "train_total",
                         "val_forecast", "val_recon", "val_total"])
        for row in history:
            tr, va = row["train"], row["val"]
            writer.writerow([row["epoch"], repr(tr.forecast), repr(tr.recon),
                             repr(tr.total), repr(va.forecast), repr(va.recon),
                             repr(va.total)])
    print(f"trained {len(history)} epochs; "
          f"final val total loss {history[-1]['val'].total:.6f}")
    return 0


def cmd_calibrate(args) -> int:
    defaults = {"seed": 0, "k": 3.0, "passes": 30, "w": 60, "h": 60, "stride": 30,
                "max_windows": 200}
    cfg = _resolve(args, defaults)
    out = Path(args.out)
    _echo_config(cfg, out)
    model, model_cfg, normalizer = load_checkpoint(args.checkpoint)
    with open(args.data, encoding="utf-8") as f:
        header = f.readline().strip().split(",")
    schema = FeatureSchema(names=tuple(header))
    series = load_csv(args.data, schema, 1.0)
    norm_series = normalizer.normalize_series(series)
    windows = make_windows(norm_series, model_cfg.w, model_cfg.h,
                           stride=int(cfg["stride"]))[: int(cfg["max_windows"])]
    thresholds = dtc.calibrate(model, windows, k=float(cfg["k"]),
                               n_passes=int(cfg["passes"]), seed=int(cfg["seed"]))
    thresholds.save(out / "thresholds.json")
    print(f"tau_recon={thresholds.tau_recon!r} tau_var={thresholds.tau_var!r}")
    return 0


def cmd_detect(args) -> int:
    defaults = {"seed": 0, "passes": 30, "attribute_all": 0}
    cfg = _resolve(args, defaults)
    out = Path(args.out)
    _echo_config(cfg, out)
    model, model_cfg, normalizer = load_checkpoint(args.checkpoint)
    thresholds = dtc.Thresholds.load(args.thresholds)
    with open(args.data, encoding="utf-8") as f:
        header = f.readline().strip().split(",")
    schema = FeatureSchema(names=tuple(header))
    series = load_csv(args.data, schema, 1.0)
    verdicts, ensembles = dtc.detect_series(
        model, thresholds, series, model_cfg.w, model_cfg.h,
        n_passes=int(cfg["passes"]), seed=int(cfg["seed"]),
        normalizer=normalizer, collect_ensembles=True)
    records = []
    for verdict, ens in zip(verdicts, ensembles):
        attr = None
        if verdict.recon_exceeds or int(cfg["attribute_all"]):
            attr = explain.attribute(ens.deterministic_forecast,
                                     ens.deterministic_recon, schema)
        records.append(explain.to_record(verdict, attr))
    explain.emit_json(records, out / "records.json")
    dtc.verdicts_to_csv(verdicts, out / "scores.csv")
    n_ood = sum(v.is_ood for v in verdicts)
    print(f"{len(verdicts)} windows, {n_ood} flagged OOD")
    return 0


def cmd_evaluate(args) -> int:
    defaults = {"seed": 0, "grid": "desk"}
    cfg = _resolve(args, defaults)
    out = Path(args.out)
    _echo_config(cfg, out)
    grid = default_grid(seed=int(cfg["seed"]), profile=cfg["grid"])
    results = run_experiment(grid, out)
    for res in results:
        print(f"{res.cell}: twin auroc={res.twin.auroc:.4f} "
              f"f1_ood={res.twin.f1_ood:.4f} | "
              f"rmse auroc={res.baseline.auroc:.4f} "
              f"f1_ood={res.baseline.f1_ood:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twindetect",
        description="Digital-twin forecasting with confidence-aware OOD detection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic labelled trace")
    _add_common(p)
    p.add_argument("--scenario", choices=["vessel", "robot"])
    p.add_argument("--maneuver", choices=["Zigzag", "Turning", "Random"])
    p.add_argument("--variant")
    p.add_argument("--case", choices=["None", "Case1", "Case2", "Case3"])
    p.add_argument("--duration", type=float)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a digital twin model on a CSV trace")
    _add_common(p)
    p.add_argument("--data", required=True, help="training CSV trace")
    p.add_argument("--profile", choices=["vessel", "robot", "custom"])
    p.add_argument("--window", dest="w", type=int)
    p.add_argument("--horizon", dest="h", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--n-heads", dest="n_heads", type=int)
    p.add_argument("--d-ff", dest="d_ff", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--plateau-patience", dest="plateau_patience", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="fit detection thresholds on IND data")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="in-distribution validation CSV")
    p.add_argument("--k", type=float)
    p.add_argument("--passes", type=int)
    p.add_argument("--stride", type=int)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("detect", help="score a trace and emit detection records")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--thresholds", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--passes", type=int)
    p.add_argument("--attribute-all", dest="attribute_all", type=int,
                   help="1 = attribute every window, not only flagged ones")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="run the experiment grid")
    _add_common(p)
    p.add_argument("--grid", choices=["desk", "smoke"])
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
