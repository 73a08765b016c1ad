"""Data model for multivariate state traces.

CSV ingestion, z-score normalization, sliding-window construction and
chronological splitting. All operations are pure functions over immutable
inputs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "FeatureSchema",
    "MultivariateSeries",
    "Normalizer",
    "WindowPair",
    "load_csv",
    "fit_normalizer",
    "make_windows",
    "split_chrono",
]


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature identifiers for the columns of a state trace."""

    names: tuple[str, ...]
    units: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(names) < 1:
            raise ValueError("schema needs at least one feature")
        if any(not n for n in names):
            raise ValueError("feature names must be non-empty")
        if len(set(names)) != len(names):
            raise ValueError("feature names must be unique")
        if self.units is not None:
            units = tuple(self.units)
            object.__setattr__(self, "units", units)
            if len(units) != len(names):
                raise ValueError("units must match the number of features")

    @property
    def dim(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class MultivariateSeries:
    """Uniformly sampled T x D state matrix."""

    schema: FeatureSchema
    sample_rate_hz: float
    values: np.ndarray
    origin_timestep: int = 0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ValueError("values must be a 2-D matrix")
        if vals.shape[0] < 1:
            raise ValueError("series must contain at least one sample")
        if vals.shape[1] != self.schema.dim:
            raise ValueError(
                f"row width {vals.shape[1]} does not match schema size {self.schema.dim}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("series contains non-finite values")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        object.__setattr__(self, "values", vals)

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Normalizer:
    """Per-feature z-score parameters fitted on training data."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape or mean.ndim != 1:
            raise ValueError("mean and std must be equal-length vectors")
        if np.any(std <= 0):
            raise ValueError("std must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def normalize(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.std + self.mean

    def normalize_series(self, series: MultivariateSeries) -> MultivariateSeries:
        return MultivariateSeries(
            schema=series.schema,
            sample_rate_hz=series.sample_rate_hz,
            values=self.normalize(series.values),
            origin_timestep=series.origin_timestep,
        )


@dataclass(frozen=True)
class WindowPair:
    """One (input, target) sample sliced from a series.

    `start_step` is the series row index of the first input sample;
    `end_step` is the last forecast step, i.e. forecast start + h - 1.
    """

    input: np.ndarray    # w x D
    target: np.ndarray   # h x D
    start_step: int
    end_step: int

    def __post_init__(self):
        inp = np.asarray(self.input, dtype=np.float64)
        tgt = np.asarray(self.target, dtype=np.float64)
        if inp.ndim != 2 or tgt.ndim != 2 or inp.shape[1] != tgt.shape[1]:
            raise ValueError("input and target must be matrices with equal width")
        object.__setattr__(self, "input", inp)
        object.__setattr__(self, "target", tgt)
        w, h = inp.shape[0], tgt.shape[0]
        if self.end_step - self.forecast_start + 1 != h:
            raise ValueError("end_step inconsistent with horizon length")

    @property
    def w(self) -> int:
        return self.input.shape[0]

    @property
    def h(self) -> int:
        return self.target.shape[0]

    @property
    def forecast_start(self) -> int:
        return self.start_step + self.input.shape[0]


def load_csv(path, schema: FeatureSchema, sample_rate_hz: float) -> MultivariateSeries:
    """Parse a CSV trace into a series, matching columns to `schema` by name."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"trace file not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        header = [c.strip() for c in header]
        col_index = {}
        for name in schema.names:
            if name not in header:
                raise ValueError(f"{path}: missing column {name!r}")
            col_index[name] = header.index(name)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            vals = []
            for name in schema.names:
                idx = col_index[name]
                if idx >= len(row):
                    raise ValueError(f"{path}: row {lineno} is missing column {name!r}")
                cell = row[idx].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise ValueError(
                        f"{path}: row {lineno}, column {name!r}: non-numeric value {cell!r}"
                    ) from None
                if not np.isfinite(v):
                    raise ValueError(
                        f"{path}: row {lineno}, column {name!r}: non-finite value {cell!r}"
                    )
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return MultivariateSeries(
        schema=schema,
        sample_rate_hz=sample_rate_hz,
        values=np.array(rows, dtype=np.float64),
    )


def fit_normalizer(series: MultivariateSeries) -> Normalizer:
    """Per-column sample mean/std (ddof=1). Rejects constant features."""
    if series.length < 2:
        raise ValueError("need at least 2 samples to fit a normalizer")
    mean = series.values.mean(axis=0)
    std = series.values.std(axis=0, ddof=1)
    for i, s in enumerate(std):
        if s <= 0 or not np.isfinite(s):
            raise ValueError(
                f"feature {series.schema.names[i]!r} is constant; cannot normalize"
            )
    return Normalizer(mean=mean, std=std)


def make_windows(
    series: MultivariateSeries, w: int, h: int, stride: int = 1
) -> list[WindowPair]:
    """Slice (input, target) windows at offsets 0, stride, 2*stride, ..."""
    if w < 1 or h < 1 or stride < 1:
        raise ValueError("w, h and stride must all be >= 1")
    T = series.length
    if T < w + h:
        raise ValueError(
            f"series too short: length {T}, need at least w + h = {w + h}"
        )
    windows = []
    for s in range(0, T - w - h + 1, stride):
        windows.append(
            WindowPair(
                input=series.values[s : s + w],
                target=series.values[s + w : s + w + h],
                start_step=series.origin_timestep + s,
                end_step=series.origin_timestep + s + w + h - 1,
            )
        )
    return windows


def split_chrono(
    windows: Sequence[WindowPair], train_frac: float, val_frac: float
) -> tuple[list[WindowPair], list[WindowPair], list[WindowPair]]:
    """Chronological train/val/test split by window start; floor, rest to test."""
    if not (0 < train_frac and 0 < val_frac and train_frac + val_frac < 1):
        raise ValueError("need 0 < train_frac, 0 < val_frac, train_frac + val_frac < 1")
    ordered = sorted(windows, key=lambda p: p.start_step)
    n = len(ordered)
    n_train = int(np.floor(n * train_frac))
    n_val = int(np.floor(n * val_frac))
    train = ordered[:n_train]
    val = ordered[n_train : n_train + n_val]
    test = ordered[n_train + n_val :]
    return list(train), list(val), list(test)
