"""Attribution and structured detection records.

For a flagged window, per-feature RMSE between the forecast and its
reconstruction names the states most responsible for the anomaly; the top
three are exported with the verdict as a JSON record. Records follow a fixed
schema (shipped in schemas/detection_record.schema.json); the quadrant is
reported as a traffic-light color string.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import jsonschema
import numpy as np

from .detect import WindowVerdict
from .timeseries import FeatureSchema

__all__ = [
    "Attribution",
    "attribute",
    "category_color",
    "to_record",
    "emit_json",
    "record_schema",
    "validate_record",
]

CATEGORY_COLORS = {
    "OOD_Confident": "red",
    "OOD_Uncertain": "orange",
    "IND_Uncertain": "yellow",
    "IND_Confident": "green",
}


@dataclass(frozen=True)
class Attribution:
    """Per-feature horizon RMSE plus the top-3 offenders (descending)."""

    per_feature: dict[str, float]
    top: tuple[tuple[str, float], ...]


def attribute(forecast, recon, schema: FeatureSchema) -> Attribution:
    """Feature-wise RMSE over the horizon between reconstruction and forecast.

    Ties in the ranking are broken by schema order.
    """
    forecast = np.asarray(forecast, dtype=np.float64)
    recon = np.asarray(recon, dtype=np.float64)
    if forecast.shape != recon.shape or forecast.ndim != 2:
        raise ValueError("forecast and reconstruction must be equal-shape matrices")
    if forecast.shape[1] != schema.dim:
        raise ValueError(
            f"matrix width {forecast.shape[1]} does not match schema size {schema.dim}")
    rmse = np.sqrt(((recon - forecast) ** 2).mean(axis=0))
    per_feature = {name: float(rmse[i]) for i, name in enumerate(schema.names)}
    order = sorted(range(schema.dim), key=lambda i: (-rmse[i], i))
    top = tuple((schema.names[i], float(rmse[i])) for i in order[: min(3, schema.dim)])
    return Attribution(per_feature=per_feature, top=top)


def category_color(category: str) -> str:
    try:
        return CATEGORY_COLORS[category]
    except KeyError:
        raise ValueError(f"unknown category {category!r}") from None


def to_record(verdict: WindowVerdict,
              attribution: Optional[Attribution] = None) -> dict:
    """One JSON-ready detection record; attribution only for flagged windows."""
    record = {
        "sequence_index": verdict.sequence_index,
        "start_time_step": verdict.start_time_step,
        "end_time_step": verdict.end_time_step,
        "is_OOD": verdict.is_ood,
        "reconstruction_error": verdict.recon_error,
        "uncertainty_variance": verdict.variance_score,
        "recon_exceeds_threshold": verdict.recon_exceeds,
        "uncertainty_exceeds_threshold": verdict.var_exceeds,
        "category": category_color(verdict.category),
    }
    if verdict.recon_exceeds and attribution is not None:
        record["state_attribution"] = {name: value for name, value in attribution.top}
    return record


def emit_json(records: Sequence[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(list(records), f, indent=2)
        f.write("\n")
    return path


def record_schema() -> dict:
    text = (resources.files("twindetect") / "schemas"
            / "detection_record.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def validate_record(record: dict) -> None:
    """Raises jsonschema.ValidationError if the record is malformed."""
    jsonschema.validate(record, record_schema())
