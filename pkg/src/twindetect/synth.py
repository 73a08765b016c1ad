"""Synthetic scenario generators.

Two families of labelled traces stand in for the proprietary simulators: a
maritime vessel performing zigzag / turning / random maneuvers with a ramped
environmental disturbance, and a planar robot navigating waypoints with a
burst of injected odometry noise. Plant models are deliberately simple
first-order response models; the point is a controllable, reproducible
in-distribution / out-of-distribution structure, not physical fidelity.

All stochasticity flows through labelled Philox streams, so a (scenario,
seed) pair is bit-reproducible across runs and platforms.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .rng import stream
from .timeseries import FeatureSchema, MultivariateSeries, load_csv

__all__ = [
    "VESSEL_SCHEMA",
    "ROBOT_SCHEMA",
    "VesselScenario",
    "RobotScenario",
    "LabeledTrace",
    "gen_vessel",
    "gen_robot",
    "export_trace",
    "load_trace",
]

VESSEL_SCHEMA = FeatureSchema(
    names=("Surge Speed", "Sway Speed", "Yaw Rate", "Roll Angle", "Roll Rate"),
    units=("m/s", "m/s", "deg/s", "deg", "deg/s"),
)

ROBOT_SCHEMA = FeatureSchema(names=("x", "y", "theta"), units=("m", "m", "rad"))

MANEUVERS = ("Zigzag", "Turning", "Random")
ANGLE_VARIANTS = (10, 15, 20, 30)
RANDOM_VARIANTS = ("1", "low", "high")
DISTURBANCE_CASES = ("None", "Case1", "Case2", "Case3")

# Random-maneuver intensity -> steering random-walk step scale (deg per step).
# The variant labels are a convention; only their ordering is meaningful.
RANDOM_WALK_SCALE = {"1": 0.5, "low": 1.0, "high": 2.0}


@dataclass(frozen=True)
class VesselScenario:
    maneuver: str
    variant: object = 15
    disturbance_case: str = "None"
    duration_s: float = 1200.0
    sample_rate_hz: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.maneuver not in MANEUVERS:
            raise ValueError(f"unknown maneuver {self.maneuver!r}")
        if self.disturbance_case not in DISTURBANCE_CASES:
            raise ValueError(f"unknown disturbance case {self.disturbance_case!r}")
        if self.duration_s < 60:
            raise ValueError("duration_s must be at least 60")
        if self.maneuver in ("Zigzag", "Turning"):
            if self.variant not in ANGLE_VARIANTS:
                raise ValueError(
                    f"variant for {self.maneuver} must be one of {ANGLE_VARIANTS}, "
                    f"got {self.variant!r}"
                )
        else:
            if str(self.variant) not in RANDOM_VARIANTS:
                raise ValueError(
                    f"variant for Random must be one of {RANDOM_VARIANTS}, "
                    f"got {self.variant!r}"
                )

    def name(self) -> str:
        return f"vessel/{self.maneuver}/{self.variant}/{self.disturbance_case}"


@dataclass(frozen=True)
class RobotScenario:
    waypoints: tuple[tuple[float, float], ...]
    noise_sigma: tuple[float, float, float] = (0.3, 0.3, 0.2)  # x, y, theta
    noise_start_s: Optional[float] = None  # default: arrival at first waypoint
    noise_duration_s: float = 80.0
    sample_rate_hz: float = 10.0
    seed: int = 0

    def __post_init__(self):
        wps = tuple((float(x), float(y)) for x, y in self.waypoints)
        object.__setattr__(self, "waypoints", wps)
        if len(wps) < 2:
            raise ValueError("need at least 2 waypoints")
        for i in range(len(wps)):
            for j in range(i + 1, len(wps)):
                if math.dist(wps[i], wps[j]) < 1e-9:
                    raise ValueError("waypoints must be pairwise distinct")
        if self.noise_duration_s <= 0:
            raise ValueError("noise_duration_s must be positive")

    def name(self) -> str:
        return f"robot/waypoints{len(self.waypoints)}"


@dataclass(frozen=True)
class LabeledTrace:
    series: MultivariateSeries
    ood_interval: Optional[tuple[int, int]]  # half-open [start, end), or None
    scenario_name: str = ""

    def __post_init__(self):
        if self.ood_interval is not None:
            lo, hi = self.ood_interval
            if not (0 <= lo < hi <= self.series.length):
                raise ValueError("ood_interval must lie within [0, T)")


# ---------------------------------------------------------------------------
# Vessel


def _steering_program(scenario: VesselScenario, n: int, dt: float) -> np.ndarray:
    """Commanded steering angle (deg) per step, including the heading-driven
    zigzag switching logic evaluated against the clean yaw response."""
    if scenario.maneuver == "Turning":
        return np.full(n, float(scenario.variant))

    if scenario.maneuver == "Random":
        scale = RANDOM_WALK_SCALE[str(scenario.variant)]
        rng = stream(scenario.seed, "steering")
        steps = rng.normal(0.0, scale, size=n)
        delta = np.empty(n)
        d = 0.0
        for i in range(n):
            d = float(np.clip(d + steps[i], -30.0, 30.0))
            delta[i] = d
        return delta

    # Zigzag: flip the command when the heading crosses +/- variant degrees.
    A = float(scenario.variant)
    K_r, T_n = 0.12, 8.0
    delta = np.empty(n)
    d = A
    r = 0.0
    psi = 0.0
    for i in range(n):
        delta[i] = d
        r += dt * (K_r * d - r) / T_n
        psi += dt * r
        if d > 0 and psi >= A:
            d = -A
        elif d < 0 and psi <= -A:
            d = A
    return delta


def _disturbance(case: str, n: int, dt: float, seed: int) -> np.ndarray:
    """Additive per-step forcing on the recorded states for each case.

    Forcing = slow bias + wave oscillation + gust noise. The envelope builds
    up gradually from shortly before minute 7, holds at full strength inside
    the designated event window, and decays back to zero before minute 14,
    so every window overlapping the event carries observable forcing. Case1
    keeps reduced gusts after the event; Case2 runs light gusts everywhere
    outside it; Case3 is clean outside. Returned matrix is n x 5 in schema order.
    """
    t = np.arange(n) * dt
    env = np.interp(t, [360.0, 420.0, 450.0, 720.0, 780.0],
                    [0.0, 0.5, 1.0, 1.0, 0.0], left=0.0, right=0.0)
    in_window = (t >= 420.0) & (t < 840.0)

    bias = np.array([-1.2, 0.9, 1.3, 4.0, 0.0])
    wave_amp = np.array([0.35, 0.6, 0.7, 2.6, 1.6])
    gust_sigma = np.array([0.25, 0.15, 0.35, 0.7, 0.4])

    wave = np.sin(2 * np.pi * t / 9.0)[:, None] * wave_amp[None, :]
    rng = stream(seed, "gusts")
    gusts = rng.normal(0.0, 1.0, size=(n, 5)) * gust_sigma[None, :]

    gust_env = env.copy()
    if case == "Case1":
        gust_env = np.maximum(env, np.where(t >= 840.0, 0.15, 0.0))
    elif case == "Case2":
        gust_env = np.maximum(env, 0.1)
    # Case3: nothing outside the window

    return env[:, None] * (bias[None, :] + wave) + gust_env[:, None] * gusts


def gen_vessel(scenario: VesselScenario) -> LabeledTrace:
    """Simulate one vessel maneuver trace with optional disturbance."""
    dt = 1.0 / scenario.sample_rate_hz
    n = int(round(scenario.duration_s * scenario.sample_rate_hz))

    # First-order response constants (not calibrated to any real hull)
    u0 = 6.0           # cruise surge speed, m/s
    T_u, T_n, T_v, T_phi = 20.0, 8.0, 6.0, 10.0
    K_r = 0.12         # deg/s yaw rate per deg steering, steady state
    K_v = 0.10         # m/s sway per deg/s yaw rate
    K_phi = 1.6        # deg roll per deg/s yaw rate

    delta = _steering_program(scenario, n, dt)

    u, v, r, phi = u0, 0.0, 0.0, 0.0
    states = np.empty((n, 5))
    for i in range(n):
        r += dt * (K_r * delta[i] - r) / T_n
        u += dt * ((u0 * (1.0 - 0.02 * abs(r)) - u) / T_u)
        v += dt * (K_v * r - v) / T_v
        dphi = (K_phi * r - phi) / T_phi
        phi += dt * dphi
        states[i] = (u, v, r, phi, dphi)

    # Sensor noise floor, one stream per channel
    floor = np.array([0.02, 0.02, 0.02, 0.05, 0.02])
    for c in range(5):
        states[:, c] += stream(scenario.seed, "floor", c).normal(0, floor[c], size=n)

    if scenario.disturbance_case != "None":
        states = states + _disturbance(scenario.disturbance_case, n, dt, scenario.seed)
        lo = int(round(420.0 * scenario.sample_rate_hz))
        hi = int(round(840.0 * scenario.sample_rate_hz))
        interval = (lo, min(hi, n)) if lo < n else None
    else:
        interval = None

    series = MultivariateSeries(
        schema=VESSEL_SCHEMA, sample_rate_hz=scenario.sample_rate_hz, values=states
    )
    return LabeledTrace(series=series, ood_interval=interval,
                        scenario_name=scenario.name())


# ---------------------------------------------------------------------------
# Robot


def gen_robot(scenario: RobotScenario) -> LabeledTrace:
    """Simulate planar waypoint navigation with an injected noise burst."""
    dt = 1.0 / scenario.sample_rate_hz
    v_max, w_max = 0.5, 1.2
    heading_gain = 2.5
    arrive_tol = 0.15

    x, y, theta = scenario.waypoints[0][0], scenario.waypoints[0][1] - 1.0, 0.0
    targets = list(scenario.waypoints)
    wp_idx = 0
    first_arrival_step: Optional[int] = None

    xs, ys, thetas = [], [], []
    step = 0
    max_steps = int(3600 * scenario.sample_rate_hz)
    tail_steps = int(5.0 * scenario.sample_rate_hz)
    tail_left = None
    while True:
        tx, ty = targets[wp_idx]
        dist = math.hypot(tx - x, ty - y)
        if dist < arrive_tol:
            if wp_idx == 0 and first_arrival_step is None:
                first_arrival_step = step
            if wp_idx < len(targets) - 1:
                wp_idx += 1
            elif tail_left is None:
                tail_left = tail_steps
        desired = math.atan2(ty - y, tx - x)
        err = math.atan2(math.sin(desired - theta), math.cos(desired - theta))
        w = max(-w_max, min(w_max, heading_gain * err))
        speed = v_max * min(1.0, dist / 0.5) * max(0.0, math.cos(err))
        theta = math.atan2(math.sin(theta + w * dt), math.cos(theta + w * dt))
        x += speed * math.cos(theta) * dt
        y += speed * math.sin(theta) * dt
        xs.append(x)
        ys.append(y)
        thetas.append(theta)
        step += 1
        if tail_left is not None:
            tail_left -= 1
        if step >= max_steps:
            raise ValueError("unreachable waypoint configuration: no convergence")
        if tail_left == 0:
            # keep going until the noise window also fits
            start_s = (
                scenario.noise_start_s
                if scenario.noise_start_s is not None
                else (first_arrival_step or 0) * dt
            )
            if step * dt >= start_s + scenario.noise_duration_s + 5.0:
                break
            tail_left = tail_steps

    states = np.column_stack([xs, ys, thetas])
    n = states.shape[0]

    if first_arrival_step is None:
        first_arrival_step = 0
    start_s = (
        scenario.noise_start_s
        if scenario.noise_start_s is not None
        else first_arrival_step * dt
    )
    lo = int(round(start_s * scenario.sample_rate_hz))
    hi = lo + int(round(scenario.noise_duration_s * scenario.sample_rate_hz))
    lo, hi = max(0, lo), min(hi, n)

    sig = scenario.noise_sigma
    if any(s > 0 for s in sig) and lo < hi:
        for c in range(3):
            noise = stream(scenario.seed, "odom", c).normal(0, 1.0, size=hi - lo)
            states[lo:hi, c] += sig[c] * noise
        interval = (lo, hi)
    elif lo < hi:
        interval = (lo, hi)
    else:
        interval = None

    series = MultivariateSeries(
        schema=ROBOT_SCHEMA, sample_rate_hz=scenario.sample_rate_hz, values=states
    )
    return LabeledTrace(series=series, ood_interval=interval,
                        scenario_name=scenario.name())


# ---------------------------------------------------------------------------
# Export / import


def _sidecar_path(csv_path: Path) -> Path:
    return csv_path.with_suffix(".labels.json")


def export_trace(trace: LabeledTrace, path) -> Path:
    """Write the trace as CSV plus a JSON label sidecar; returns the CSV path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(trace.series.schema.names) + "\n")
        for row in trace.series.values:
            f.write(",".join(repr(float(v)) for v in row) + "\n")
    sidecar = {
        "ood_start": None if trace.ood_interval is None else trace.ood_interval[0],
        "ood_end": None if trace.ood_interval is None else trace.ood_interval[1],
        "sample_rate_hz": trace.series.sample_rate_hz,
        "scenario": trace.scenario_name,
    }
    with open(_sidecar_path(path), "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2)
        f.write("\n")
    return path


def load_trace(path, schema: Optional[FeatureSchema] = None) -> LabeledTrace:
    """Read a CSV trace plus its label sidecar back into a LabeledTrace."""
    path = Path(path)
    with open(_sidecar_path(path), encoding="utf-8") as f:
        sidecar = json.load(f)
    if schema is None:
        with open(path, encoding="utf-8") as f:
            header = f.readline().strip().split(",")
        schema = FeatureSchema(names=tuple(header))
    series = load_csv(path, schema, float(sidecar["sample_rate_hz"]))
    if sidecar["ood_start"] is None:
        interval = None
    else:
        interval = (int(sidecar["ood_start"]), int(sidecar["ood_end"]))
    return LabeledTrace(series=series, ood_interval=interval,
                        scenario_name=str(sidecar.get("scenario", "")))
