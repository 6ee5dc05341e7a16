"""A four-tank benchmark plant with a matching structural model.

Two coupled subsystems of square-root-outflow tanks::

    dx1 = a1*u1 - q1 - leak        q1 = k1*sqrt(x1)     leak = f_leak*k1*sqrt(x1)
    dx2 = q1 - q2                  q2 = k2*sqrt(x2)
    dx3 = a3*u2 - q3               q3 = k3*sqrt(x3)
    dx4 = q3 + c*q2 - q4           q4 = k4*sqrt(x4)

Sensors: y1 = x2, y2 = x4, y3 = q1. Sensor faults are multiplicative on the
measured signal, y = (1 + f) * measurement, from the onset time onward.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .structmodel import StructuralModel, parse_model

ACTUATORS = ("u1", "u2")
SENSORS = ("y1", "y2", "y3")
SENSOR_FAULTS = {"fy1": "y1", "fy2": "y2", "fy3": "y3"}
LEAK_FAULTS = ("fleak",)


class PlantError(ValueError):
    pass


@dataclass(frozen=True)
class PlantSpec:
    a1: float = 0.5
    k1: float = 0.5
    k2: float = 0.5
    a3: float = 0.5
    k3: float = 0.5
    k4: float = 0.6
    coupling: float = 1.0
    sampling_time: float = 0.05
    substeps: int = 5
    noise_std: tuple[float, float, float] = (0.004, 0.006, 0.002)
    u_range: tuple[float, float] = (0.3, 1.0)

    @property
    def n_states(self) -> int:
        return 4


@dataclass(frozen=True)
class FaultScenario:
    fault: str
    magnitude: float
    onset: float  # seconds

    def __post_init__(self):
        if self.fault not in SENSOR_FAULTS and self.fault not in LEAK_FAULTS:
            raise PlantError(f"unknown fault {self.fault!r}")
        if self.fault in LEAK_FAULTS and self.magnitude < 0:
            raise PlantError("leak magnitude must be non-negative")

    @property
    def kind(self) -> str:
        return "multiplicative sensor" if self.fault in SENSOR_FAULTS else "additive leak"


@dataclass
class Dataset:
    """Sampled signals keyed by the model's known-variable names."""

    time: np.ndarray
    signals: dict[str, np.ndarray]
    states: np.ndarray = field(repr=False)
    scenario: FaultScenario | None = None

    def __len__(self) -> int:
        return len(self.time)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.signals[name]

    def columns(self, names) -> np.ndarray:
        return np.column_stack([self.signals[n] for n in names]) if names else np.zeros((len(self), 0))

    def fault_mask(self) -> np.ndarray:
        if self.scenario is None:
            return np.zeros(len(self), dtype=bool)
        return self.time >= self.scenario.onset

    def to_csv(self, path) -> None:
        names = ["time", *self.signals]
        data = np.column_stack([self.time, *self.signals.values()])
        np.savetxt(path, data, delimiter=",", header=",".join(names), comments="", fmt="%.10g")


def _derivative(spec: PlantSpec, x: np.ndarray, u: np.ndarray, leak: float) -> np.ndarray:
    r = np.sqrt(np.maximum(x, 0.0))
    q1, q2, q3, q4 = spec.k1 * r[0], spec.k2 * r[1], spec.k3 * r[2], spec.k4 * r[3]
    return np.array([
        spec.a1 * u[0] - q1 - leak * spec.k1 * r[0],
        q1 - q2,
        spec.a3 * u[1] - q3,
        q3 + spec.coupling * q2 - q4,
    ])


def steady_state(spec: PlantSpec, u) -> np.ndarray:
    """Fixed point of the fault-free plant for constant input ``u``."""
    u1, u2 = u
    q1 = spec.a1 * u1
    q3 = spec.a3 * u2
    x1 = (q1 / spec.k1) ** 2
    x2 = (q1 / spec.k2) ** 2
    x3 = (q3 / spec.k3) ** 2
    x4 = ((q3 + spec.coupling * q1) / spec.k4) ** 2
    return np.array([x1, x2, x3, x4])


def input_profile(spec: PlantSpec, n_samples: int, seed: int) -> np.ndarray:
    """Seeded sequence of holds and ramps between random levels per actuator."""
    rng = np.random.default_rng(seed)
    lo, hi = spec.u_range
    out = np.empty((n_samples, 2))
    for j in range(2):
        t = 0
        level = rng.uniform(lo, hi)
        while t < n_samples:
            hold = int(rng.integers(40, 240))
            ramp = int(rng.integers(0, 120))
            target = rng.uniform(lo, hi)
            seg = np.concatenate([np.full(hold, level), np.linspace(level, target, ramp, endpoint=False)])
            out[t:t + len(seg), j] = seg[: n_samples - t]
            t += len(seg)
            level = target
    return out


def simulate_plant(spec: PlantSpec, inputs: np.ndarray, scenario: FaultScenario | None = None,
                   seed: int = 0, x0=None, noise: bool = True) -> Dataset:
    """RK4 simulation sampled at ``spec.sampling_time``; noise drawn from ``seed``."""
    u = np.asarray(inputs, dtype=float)
    if u.ndim != 2 or u.shape[1] != 2:
        raise PlantError("inputs must be an (N, 2) array")
    n = len(u)
    T = spec.sampling_time
    time = np.arange(n) * T
    if scenario is not None and not 0 <= scenario.onset <= time[-1]:
        raise PlantError(f"fault onset {scenario.onset} s outside the horizon")
    x = steady_state(spec, u[0]) if x0 is None else np.asarray(x0, dtype=float).copy()
    xs = np.empty((n, 4))
    h = T / spec.substeps
    for t in range(n):
        xs[t] = x
        leak = 0.0
        if scenario is not None and scenario.fault in LEAK_FAULTS and time[t] >= scenario.onset:
            leak = scenario.magnitude
        for _ in range(spec.substeps):
            k1 = _derivative(spec, x, u[t], leak)
            k2 = _derivative(spec, x + 0.5 * h * k1, u[t], leak)
            k3 = _derivative(spec, x + 0.5 * h * k2, u[t], leak)
            k4 = _derivative(spec, x + h * k3, u[t], leak)
            x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)) or np.any(x < -1e-9):
            raise PlantError(f"unstable simulation at sample {t}")
    clean = {
        "y1": xs[:, 1].copy(),
        "y2": xs[:, 3].copy(),
        "y3": spec.k1 * np.sqrt(np.maximum(xs[:, 0], 0.0)),
    }
    rng = np.random.default_rng(seed)
    signals = {"u1": u[:, 0].copy(), "u2": u[:, 1].copy()}
    for name, std in zip(SENSORS, spec.noise_std):
        y = clean[name] + (rng.normal(0.0, std, n) if noise else 0.0)
        signals[name] = y
    if scenario is not None and scenario.fault in SENSOR_FAULTS:
        name = SENSOR_FAULTS[scenario.fault]
        active = time >= scenario.onset
        signals[name] = np.where(active, (1.0 + scenario.magnitude) * signals[name], signals[name])
    return Dataset(time, signals, xs, scenario)


def reference_model_text() -> str:
    return resources.files("greyfdi.data").joinpath("fourtank.model").read_text(encoding="utf-8")


def reference_structural_model() -> StructuralModel:
    return parse_model(reference_model_text())
