"""Detection over forecast windows.

MC-dropout ensemble inference, window scoring (reconstruction error and
predictive variance), threshold calibration on in-distribution validation
windows, and the four-quadrant confidence-aware verdict.

Scores live in normalized feature space. The reconstruction error is the
mean squared residual over all h x D elements between the deterministic
forecast and its reconstruction; the variance score is the mean over all
h x D elements of the per-element ensemble variance (population formula).
The OOD decision is driven by the reconstruction error alone; the variance
only moves a verdict between Confident and Uncertain.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .model import DTModel
from .rng import derive_seed
from .timeseries import MultivariateSeries, Normalizer, WindowPair, make_windows

__all__ = [
    "CATEGORIES",
    "ForecastEnsemble",
    "Thresholds",
    "WindowVerdict",
    "mc_forecast",
    "window_scores",
    "calibrate",
    "classify",
    "detect_series",
    "combined_score",
    "verdicts_to_csv",
]

CATEGORIES = ("IND_Confident", "IND_Uncertain", "OOD_Uncertain", "OOD_Confident")


@dataclass(frozen=True)
class ForecastEnsemble:
    passes: np.ndarray                # N x h x D stochastic forecasts
    mean: np.ndarray                  # h x D
    variance: np.ndarray              # h x D, population formula (divide by N)
    deterministic_forecast: np.ndarray
    deterministic_recon: np.ndarray

    def __post_init__(self):
        if self.passes.shape[0] < 2:
            raise ValueError("variance needs at least 2 passes")
        if np.any(self.variance < 0):
            raise ValueError("variance must be non-negative")


@dataclass(frozen=True)
class Thresholds:
    mu_recon: float
    sigma_recon: float
    mu_var: float
    sigma_var: float
    k: float

    def __post_init__(self):
        if self.sigma_recon < 0 or self.sigma_var < 0:
            raise ValueError("sigmas must be non-negative")

    @property
    def tau_recon(self) -> float:
        return self.mu_recon + self.k * self.sigma_recon

    @property
    def tau_var(self) -> float:
        return self.mu_var + self.k * self.sigma_var

    def to_dict(self) -> dict:
        return {
            "mu_recon": self.mu_recon, "sigma_recon": self.sigma_recon,
            "tau_recon": self.tau_recon, "mu_var": self.mu_var,
            "sigma_var": self.sigma_var, "tau_var": self.tau_var, "k": self.k,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")
        return path

    @classmethod
    def load(cls, path) -> "Thresholds":
        with open(path, encoding="utf-8") as f:
            d = json.load(f)
        return cls(mu_recon=d["mu_recon"], sigma_recon=d["sigma_recon"],
                   mu_var=d["mu_var"], sigma_var=d["sigma_var"], k=d["k"])


@dataclass(frozen=True)
class WindowVerdict:
    sequence_index: int
    start_time_step: int
    end_time_step: int
    recon_error: float
    variance_score: float
    recon_exceeds: bool
    var_exceeds: bool
    category: str

    @property
    def is_ood(self) -> bool:
        return self.recon_exceeds


def mc_forecast(model: DTModel, x, n_passes: int, seed: int) -> ForecastEnsemble:
    """Run n_passes stochastic forward passes plus one deterministic pass.

    Pass n draws its dropout masks from a stream derived from (seed, n), so
    the ensemble is reproducible and independent of evaluation order.
    """
    if n_passes < 2:
        raise ValueError("n_passes must be >= 2")
    xt = torch.as_tensor(np.asarray(x), dtype=torch.float32)
    model.eval()
    passes = np.empty((n_passes,) + (model.cfg.h, model.cfg.d_features))
    with torch.no_grad():
        for n in range(n_passes):
            gen = torch.Generator().manual_seed(derive_seed(seed, "pass", n))
            pred, _ = model(xt, mode="mc", generator=gen)
            passes[n] = pred.numpy()
        det_pred, det_rec = model(xt, mode="eval")
    mean = passes.mean(axis=0)
    variance = ((passes - mean) ** 2).mean(axis=0)
    return ForecastEnsemble(
        passes=passes, mean=mean, variance=variance,
        deterministic_forecast=det_pred.numpy().astype(np.float64),
        deterministic_recon=det_rec.numpy().astype(np.float64))


def window_scores(ens: ForecastEnsemble) -> tuple[float, float]:
    """(recon_error, variance_score) for one window.

    recon_error: mean squared element residual between the deterministic
    reconstruction and the deterministic forecast; variance_score: mean of
    the per-element ensemble variance.
    """
    resid = ens.deterministic_recon - ens.deterministic_forecast
    return float((resid ** 2).mean()), float(ens.variance.mean())


def calibrate(
    model: DTModel,
    validation_windows: Sequence[WindowPair],
    k: float = 3.0,
    n_passes: int = 30,
    seed: int = 0,
) -> Thresholds:
    """Fit mu + k*sigma thresholds from in-distribution validation windows."""
    if k <= 0:
        raise ValueError("k must be positive")
    if len(validation_windows) < 2:
        raise ValueError("need at least 2 validation windows to estimate sigma")
    recon_scores, var_scores = [], []
    for i, win in enumerate(validation_windows):
        ens = mc_forecast(model, win.input, n_passes, derive_seed(seed, "window", i))
        r, v = window_scores(ens)
        recon_scores.append(r)
        var_scores.append(v)
    recon_scores = np.array(recon_scores)
    var_scores = np.array(var_scores)
    return Thresholds(
        mu_recon=float(recon_scores.mean()),
        sigma_recon=float(recon_scores.std(ddof=1)),
        mu_var=float(var_scores.mean()),
        sigma_var=float(var_scores.std(ddof=1)),
        k=float(k))


def classify(
    recon_error: float,
    variance_score: float,
    thresholds: Thresholds,
    sequence_index: int = 0,
    start_time_step: int = 0,
    end_time_step: int = 0,
) -> WindowVerdict:
    """Quadrant verdict; scores exceed only on strict inequality."""
    recon_exceeds = recon_error > thresholds.tau_recon
    var_exceeds = variance_score > thresholds.tau_var
    if recon_exceeds:
        category = "OOD_Uncertain" if var_exceeds else "OOD_Confident"
    else:
        category = "IND_Uncertain" if var_exceeds else "IND_Confident"
    return WindowVerdict(
        sequence_index=sequence_index,
        start_time_step=start_time_step,
        end_time_step=end_time_step,
        recon_error=float(recon_error),
        variance_score=float(variance_score),
        recon_exceeds=recon_exceeds,
        var_exceeds=var_exceeds,
        category=category)


def detect_series(
    model: DTModel,
    thresholds: Thresholds,
    series: MultivariateSeries,
    w: int,
    h: int,
    n_passes: int = 30,
    seed: int = 0,
    normalizer: Optional[Normalizer] = None,
    stride: Optional[int] = None,
    collect_ensembles: bool = False,
):
    """Score and classify non-overlapping forecast windows across a series.

    Returns a list of WindowVerdict, or (verdicts, ensembles) when
    `collect_ensembles` is set (the ensembles feed attribution downstream).
    """
    if normalizer is not None:
        series = normalizer.normalize_series(series)
    windows = make_windows(series, w, h, stride=stride or h)
    verdicts, ensembles = [], []
    for i, win in enumerate(windows):
        ens = mc_forecast(model, win.input, n_passes, derive_seed(seed, "window", i))
        r, v = window_scores(ens)
        verdicts.append(classify(
            r, v, thresholds,
            sequence_index=i,
            start_time_step=win.forecast_start,
            end_time_step=win.end_step))
        if collect_ensembles:
            ensembles.append(ens)
    if collect_ensembles:
        return verdicts, ensembles
    return verdicts


def combined_score(recon_error: float, variance_score: float,
                   thresholds: Thresholds) -> float:
    """Optional alternative ranking score: worst threshold-relative excess."""
    denom_r = thresholds.tau_recon if thresholds.tau_recon > 0 else 1.0
    denom_v = thresholds.tau_var if thresholds.tau_var > 0 else 1.0
    return max(recon_error / denom_r, variance_score / denom_v)


def verdicts_to_csv(verdicts: Sequence[WindowVerdict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["sequence_index", "start", "end",
                         "recon_error", "variance_score", "category"])
        for v in verdicts:
            writer.writerow([v.sequence_index, v.start_time_step, v.end_time_step,
                             repr(v.recon_error), repr(v.variance_score), v.category])
    return path
