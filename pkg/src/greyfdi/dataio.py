"""CSV time series, downsampling and per-signal normalization."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np


class DataError(ValueError):
    pass


def downsample(x: np.ndarray, factor: int, method: str = "stride") -> np.ndarray:
    """Integer-factor downsampling; output length is floor(N / factor)."""
    if factor < 1:
        raise ValueError("downsampling factor must be >= 1")
    x = np.asarray(x, dtype=float)
    n = len(x) // factor
    if method == "stride":
        return x[: n * factor : factor].copy()
    if method == "mean":
        return x[: n * factor].reshape(n, factor).mean(axis=1)
    raise ValueError(f"unknown downsampling method {method!r}")


def read_timeseries(path, required: Iterable[str] = (), factor: int = 1,
                    method: str = "stride") -> dict[str, np.ndarray]:
    """Read a headered CSV into name -> column arrays."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    missing = [n for n in required if n not in header]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    body = [r for r in rows[1:] if r]
    for i, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise DataError(f"{path}: line {i} has {len(r)} fields, header has {len(header)}")
    try:
        data = np.array(body, dtype=float).reshape(len(body), len(header))
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric entry ({exc})") from None
    return {h: downsample(data[:, j], factor, method) for j, h in enumerate(header)}


def write_timeseries(path, columns: Mapping[str, np.ndarray]) -> None:
    names = list(columns)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*(np.asarray(columns[n]) for n in names)):
            w.writerow([repr(float(v)) for v in row])


@dataclass
class Normalizer:
    """Per-signal affine map z = (x - offset) / scale.

    ``fit`` uses min-max ([0, 1] on the fitted data) or z-score. Constant
    signals get scale 1 and are listed in ``degenerate``.
    """

    offset: dict[str, float] = field(default_factory=dict)
    scale: dict[str, float] = field(default_factory=dict)
    method: str = "minmax"
    degenerate: list[str] = field(default_factory=list)

    @classmethod
    def fit(cls, data: Mapping[str, np.ndarray], names: Iterable[str] | None = None,
            method: str = "minmax") -> "Normalizer":
        if method not in ("minmax", "zscore"):
            raise ValueError(f"unknown normalization {method!r}")
        norm = cls(method=method)
        for n in (names if names is not None else data):
            x = np.asarray(data[n], dtype=float)
            if method == "minmax":
                off, sc = float(x.min()), float(x.max() - x.min())
            else:
                off, sc = float(x.mean()), float(x.std())
            if sc == 0.0 or not math.isfinite(sc):
                sc = 1.0
                norm.degenerate.append(n)
            norm.offset[n] = off
            norm.scale[n] = sc
        return norm

    def apply(self, name: str, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.offset[name]) / self.scale[name]

    def invert(self, name: str, z) -> np.ndarray:
        return np.asarray(z, dtype=float) * self.scale[name] + self.offset[name]

    def transform(self, data: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        return {n: self.apply(n, x) if n in self.offset else np.asarray(x, dtype=float) for n, x in data.items()}

    def to_dict(self) -> dict:
        return {"method": self.method, "offset": self.offset, "scale": self.scale, "degenerate": self.degenerate}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(dict(d["offset"]), dict(d["scale"]), d.get("method", "minmax"), list(d.get("degenerate", [])))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Normalizer":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
