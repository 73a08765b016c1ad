"""Experiment runner: train / calibrate / score / report over a scenario grid.

Each grid cell pairs a training setup (clean scenarios for one maneuver
family) with one evaluation scenario (a disturbance case or a noisy robot
run). For every cell the runner reports AUROC, TNR@TPR95 and per-class F1
for both the twin detector (reconstruction-error score, calibrated
threshold) and a forecasting-error-only RMSE baseline sharing the same
windows, labels and calibration recipe.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import detect, metrics, synth
from .model import DTModel, ModelConfig, TrainConfig, train
from .rng import derive_seed
from .timeseries import (MultivariateSeries, Normalizer, WindowPair,
                         fit_normalizer, make_windows, split_chrono)

__all__ = [
    "ExperimentCell",
    "ExperimentGrid",
    "CellResult",
    "baseline_rmse_scores",
    "run_experiment",
    "default_grid",
    "fit_cell_model",
]


@dataclass(frozen=True)
class ExperimentCell:
    name: str
    train_key: str                      # cells sharing a key share the model
    train_scenarios: tuple
    eval_scenarios: tuple
    model: ModelConfig
    training: TrainConfig
    train_stride: int = 1
    k: float = 3.0
    n_passes: int = 30
    max_cal_windows: int = 120
    # windows dropped from the head of every eval trace: the simulators start
    # from rest, and the spin-up transient matches neither calibration nor the
    # labeled event
    skip_initial: int = 1


@dataclass(frozen=True)
class ExperimentGrid:
    cells: tuple[ExperimentCell, ...]
    seed: int = 0


@dataclass(frozen=True)
class CellResult:
    cell: str
    twin: metrics.MetricsReport
    baseline: metrics.MetricsReport
    twin_scores: tuple
    baseline_scores: tuple


def baseline_rmse_scores(
    model: DTModel,
    labeled_trace: synth.LabeledTrace,
    w: int,
    h: int,
    normalizer: Optional[Normalizer] = None,
    stride: Optional[int] = None,
) -> list[metrics.LabeledScore]:
    """Forecasting-error-only scores: RMSE of the deterministic forecast
    against the true future, per window, on the same windows the twin uses."""
    series = labeled_trace.series
    if normalizer is not None:
        series = normalizer.normalize_series(series)
    windows = make_windows(series, w, h, stride=stride or h)
    labels = metrics.label_windows(
        [(wp.forecast_start, wp.end_step) for wp in windows],
        labeled_trace.ood_interval)
    scores = []
    with torch.no_grad():
        for wp, is_ood in zip(windows, labels):
            pred, _ = model(torch.as_tensor(wp.input, dtype=torch.float32),
                            mode="eval")
            rmse = float(np.sqrt(((pred.numpy() - wp.target) ** 2).mean()))
            scores.append(metrics.LabeledScore(
                score=rmse, is_ood_truth=is_ood,
                start_step=wp.forecast_start, end_step=wp.end_step))
    return scores


def _windows_for_training(traces, normalizer, w, h, stride):
    wins = []
    for trace in traces:
        series = normalizer.normalize_series(trace.series)
        wins.extend(make_windows(series, w, h, stride=stride))
    return wins


def fit_cell_model(cell: ExperimentCell):
    """Train the cell's model on its clean scenarios; returns
    (model, normalizer, thresholds, val_windows)."""
    traces = [_generate(s) for s in cell.train_scenarios]
    all_rows = np.concatenate([t.series.values for t in traces])
    normalizer = fit_normalizer(MultivariateSeries(
        schema=traces[0].series.schema,
        sample_rate_hz=traces[0].series.sample_rate_hz,
        values=all_rows))
    windows = _windows_for_training(traces, normalizer,
                                    cell.model.w, cell.model.h, cell.train_stride)
    train_w, val_w, _ = split_chrono(windows, 0.7, 0.2)
    model = DTModel(cell.model, init_seed=cell.training.seed)
    model, _ = train(model, train_w, val_w, cell.training)
    cal = val_w[: cell.max_cal_windows]
    thresholds = detect.calibrate(
        model, cal, k=cell.k, n_passes=cell.n_passes,
        seed=derive_seed(cell.training.seed, "calibrate"))
    return model, normalizer, thresholds, cal


def _generate(scenario):
    if isinstance(scenario, synth.VesselScenario):
        return synth.gen_vessel(scenario)
    if isinstance(scenario, synth.RobotScenario):
        return synth.gen_robot(scenario)
    if isinstance(scenario, synth.LabeledTrace):
        return scenario
    raise TypeError(f"not a scenario: {scenario!r}")


def run_experiment(grid: ExperimentGrid, out_dir) -> list[CellResult]:
    """Run every cell; writes report.csv plus per-cell ROC point files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fitted: dict[str, tuple] = {}
    results = []
    for cell in grid.cells:
        if cell.train_key not in fitted:
            fitted[cell.train_key] = fit_cell_model(cell)
        model, normalizer, thresholds, cal_windows = fitted[cell.train_key]

        # baseline operating threshold: same mu + k*sigma recipe on the
        # calibration windows' forecasting RMSE
        cal_rmse = []
        with torch.no_grad():
            for wp in cal_windows:
                pred, _ = model(torch.as_tensor(wp.input, dtype=torch.float32),
                                mode="eval")
                cal_rmse.append(float(np.sqrt(((pred.numpy() - wp.target) ** 2).mean())))
        cal_rmse = np.array(cal_rmse)
        baseline_tau = float(cal_rmse.mean() + cell.k * cal_rmse.std(ddof=1))

        twin_scores: list[metrics.LabeledScore] = []
        base_scores: list[metrics.LabeledScore] = []
        for j, scenario in enumerate(cell.eval_scenarios):
            trace = _generate(scenario)
            verdicts = detect.detect_series(
                model, thresholds, trace.series, cell.model.w, cell.model.h,
                n_passes=cell.n_passes,
                seed=derive_seed(grid.seed, "detect", cell.name, j),
                normalizer=normalizer)
            labels = metrics.label_windows(verdicts, trace.ood_interval)
            skip = cell.skip_initial
            for v, is_ood in list(zip(verdicts, labels))[skip:]:
                twin_scores.append(metrics.LabeledScore(
                    score=v.recon_error, is_ood_truth=is_ood,
                    start_step=v.start_time_step, end_step=v.end_time_step))
            base_scores.extend(baseline_rmse_scores(
                model, trace, cell.model.w, cell.model.h,
                normalizer=normalizer)[skip:])

        twin_report = metrics.compute_report(twin_scores, thresholds.tau_recon)
        base_report = metrics.compute_report(base_scores, baseline_tau)
        results.append(CellResult(
            cell=cell.name, twin=twin_report, baseline=base_report,
            twin_scores=tuple(twin_scores), baseline_scores=tuple(base_scores)))

        safe = cell.name.replace("/", "_")
        with open(out_dir / f"roc_{safe}.csv", "w", encoding="utf-8",
                  newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["detector", "threshold", "fpr", "tpr"])
            for det_name, sc in (("twin", twin_scores), ("rmse", base_scores)):
                for thr, fpr, tpr in metrics.roc_points(sc):
                    writer.writerow([det_name, repr(thr), repr(fpr), repr(tpr)])

    header = ["cell"]
    for det_name in ("twin", "rmse"):
        for m in ("auroc", "tnr_at_tpr95", "f1_ind", "f1_ood"):
            header.append(f"{det_name}_{m}")
    with open(out_dir / "report.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for res in results:
            writer.writerow(
                [res.cell]
                + [repr(x) for x in (res.twin.auroc, res.twin.tnr_at_tpr95,
                                     res.twin.f1_ind, res.twin.f1_ood)]
                + [repr(x) for x in (res.baseline.auroc, res.baseline.tnr_at_tpr95,
                                     res.baseline.f1_ind, res.baseline.f1_ood)])
    with open(out_dir / "report.txt", "w", encoding="utf-8") as f:
        for res in results:
            f.write(
                f"{res.cell}: twin auroc={res.twin.auroc:.4f} "
                f"tnr@tpr95={res.twin.tnr_at_tpr95:.4f} "
                f"f1_ood={res.twin.f1_ood:.4f} | "
                f"rmse auroc={res.baseline.auroc:.4f} "
                f"f1_ood={res.baseline.f1_ood:.4f}\n")
    return results


def default_grid(seed: int = 0, profile: str = "desk") -> ExperimentGrid:
    """The in-repo synthetic grid: 3 maneuvers x 3 disturbance cases plus one
    robot waypoint scenario. `profile="smoke"` shrinks everything for quick
    determinism checks."""
    smoke = profile == "smoke"
    # smoke traces must still cover the fixed disturbance interval
    duration = 960.0 if smoke else 1200.0
    w = h = 16 if smoke else 60
    vessel_model = ModelConfig(d_features=5, w=w, h=h, d_model=32, n_heads=4,
                               d_ff=64, dropout=0.1)
    robot_model = ModelConfig(d_features=3, w=w, h=h, d_model=32, n_heads=4,
                              d_ff=64, dropout=0.2)
    training = TrainConfig(
        batch_size=16, learning_rate=1e-3,
        epochs=2 if smoke else 30, seed=seed,
        plateau_patience=None if smoke else 8)

    cells = []
    maneuvers = [("Zigzag", (10, 15, 20)), ("Turning", (10, 15, 20)),
                 ("Random", ("1", "low"))]
    cases = ["Case1"] if smoke else ["Case1", "Case2", "Case3"]
    for maneuver, variants in maneuvers[: 1 if smoke else 3]:
        if smoke:
            variants = variants[:1]
        train_scen = tuple(
            synth.VesselScenario(maneuver=maneuver, variant=v,
                                 duration_s=duration,
                                 seed=derive_seed(seed, "train", maneuver, v))
            for v in variants)
        for case in cases:
            eval_scen = tuple(
                synth.VesselScenario(maneuver=maneuver, variant=v,
                                     disturbance_case=case, duration_s=duration,
                                     seed=derive_seed(seed, "eval", maneuver, v, case))
                for v in variants[:2])
            cells.append(ExperimentCell(
                name=f"{maneuver}/{case}",
                train_key=f"vessel/{maneuver}",
                train_scenarios=train_scen,
                eval_scenarios=eval_scen,
                model=vessel_model,
                training=training,
                train_stride=2,
                n_passes=8 if smoke else 30))

    if not smoke:
        waypoint_sets = [
            ((0.0, 0.0), (6.0, 1.0), (8.0, 6.0), (3.0, 8.0), (-2.0, 4.0)),
            ((0.0, 0.0), (-5.0, 2.0), (-7.0, 7.0), (-1.0, 9.0), (4.0, 5.0)),
        ]
        train_scen = tuple(
            synth.RobotScenario(waypoints=wps, noise_sigma=(0.0, 0.0, 0.0),
                                seed=derive_seed(seed, "robot", i))
            for i, wps in enumerate(waypoint_sets))
        eval_scen = (synth.RobotScenario(
            waypoints=waypoint_sets[0],
            seed=derive_seed(seed, "robot-eval")),)
        cells.append(ExperimentCell(
            name="Waypoint/Noise",
            train_key="robot",
            train_scenarios=train_scen,
            eval_scenarios=eval_scen,
            model=robot_model,
            training=replace(training, epochs=20),
            train_stride=4,
            n_passes=30))
    return ExperimentGrid(cells=tuple(cells), seed=seed)
