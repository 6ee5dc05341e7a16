"""From residuals to decisions: debiasing, two-sided CUSUM tests, ROC AUC
and consistency-based diagnosis."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .dmdecomp import FaultSignatureMatrix

NO_FAULT = "no-fault"
DEFAULT_MAGNITUDES = tuple(np.round(np.linspace(-0.2, 0.2, 21), 10))


class InsufficientData(ValueError):
    pass


def debias(r, window: int) -> np.ndarray:
    """Subtract the median of the first ``window`` samples."""
    r = np.asarray(r, dtype=float)
    if r.size == 0:
        raise ValueError("empty residual series")
    if not 1 <= window <= r.size:
        raise ValueError(f"window {window} outside [1, {r.size}]")
    return r - np.median(r[:window])


def cusum(r, nu: float, direction: str = "positive") -> np.ndarray:
    """T[t] = max(0, T[t-1] + s*r[t] - nu) with T[-1] = 0, s = +1 or -1."""
    if nu < 0:
        raise ValueError("drift must be non-negative")
    if direction not in ("positive", "negative"):
        raise ValueError(f"unknown direction {direction!r}")
    sign = 1.0 if direction == "positive" else -1.0
    r = np.asarray(r, dtype=float)
    out = np.empty_like(r)
    T = 0.0
    for t, v in enumerate(r):
        T = max(0.0, T + sign * v - nu)
        out[t] = T
    return out


@dataclass
class CusumTest:
    """Streaming one-sided CUSUM; alarm latches once T exceeds the threshold."""

    nu: float
    threshold: float
    direction: str = "positive"
    T: float = 0.0
    alarm: bool = False
    alarm_time: int | None = None
    t: int = 0

    def update(self, r: float) -> bool:
        sign = 1.0 if self.direction == "positive" else -1.0
        self.T = max(0.0, self.T + sign * r - self.nu)
        if self.T > self.threshold and not self.alarm:
            self.alarm = True
            self.alarm_time = self.t
        self.t += 1
        return self.alarm

    def reset(self) -> None:
        self.T, self.alarm, self.alarm_time, self.t = 0.0, False, None, 0


@dataclass(frozen=True)
class CusumTuning:
    nu_pos: float
    nu_neg: float
    threshold_pos: float
    threshold_neg: float
    heldout_alarm_rate: float
    target_rate: float

    @property
    def meets_target(self) -> bool:
        return self.heldout_alarm_rate <= self.target_rate


def _as_series_list(data) -> list[np.ndarray]:
    if isinstance(data, np.ndarray) and data.ndim == 1:
        return [data.astype(float)]
    if isinstance(data, (list, tuple)) and data and np.ndim(data[0]) == 0:
        return [np.asarray(data, dtype=float)]
    return [np.asarray(d, dtype=float).ravel() for d in data]


def _max_statistic(series: Sequence[np.ndarray], nu: float) -> float:
    return max(
        max(float(cusum(r, nu, "positive").max(initial=0.0)), float(cusum(r, nu, "negative").max(initial=0.0)))
        for r in series
    )


def _alarm_rate(series: Sequence[np.ndarray], nu: float, threshold: float) -> float:
    hits = total = 0
    for r in series:
        alarms = (cusum(r, nu, "positive") > threshold) | (cusum(r, nu, "negative") > threshold)
        hits += int(alarms.sum())
        total += r.size
    return hits / total if total else 0.0


def tune_cusum(nominal, target_rate: float = 0.0, margin: float = 3.0, safety: float = 2.0,
               heldout=None, holdout: float = 0.5, min_nu: float = 1e-6,
               min_threshold: float = 1e-3, min_samples: int = 100) -> CusumTuning:
    """Tune a two-sided CUSUM pair on fault-free residuals.

    ``nominal`` is one residual series or a list of independent runs. The
    drift is mean |r| + margin * std over the fitting data and the common
    threshold is ``safety`` times the largest test value either side
    reaches on it. Without explicit ``heldout`` runs, the trailing
    ``holdout`` share of every run is kept back to measure the false-alarm
    rate.
    """
    runs = _as_series_list(nominal)
    n = sum(r.size for r in runs)
    if n < min_samples:
        raise InsufficientData(f"{n} nominal samples, need at least {min_samples}")
    if heldout is None:
        cut = [int(round(r.size * (1.0 - holdout))) for r in runs]
        fit = [r[:c] for r, c in zip(runs, cut) if c > 0]
        held = [r[c:] for r, c in zip(runs, cut) if c < r.size]
    else:
        fit, held = runs, _as_series_list(heldout)
    pooled = np.concatenate(fit)
    nu = max(float(np.mean(np.abs(pooled)) + margin * np.std(pooled)), min_nu)
    threshold = max(safety * _max_statistic(fit, nu), min_threshold)
    rate = _alarm_rate(held, nu, threshold) if held else 0.0
    return CusumTuning(nu, nu, threshold, threshold, rate, target_rate)


@dataclass
class CusumResult:
    t_pos: np.ndarray
    t_neg: np.ndarray
    alarm_time: int | None

    @property
    def alarm(self) -> bool:
        return self.alarm_time is not None


def run_cusum(r, tuning: CusumTuning) -> CusumResult:
    tp = cusum(r, tuning.nu_pos, "positive")
    tn = cusum(r, tuning.nu_neg, "negative")
    hits = np.flatnonzero((tp > tuning.threshold_pos) | (tn > tuning.threshold_neg))
    return CusumResult(tp, tn, int(hits[0]) if hits.size else None)


@dataclass(frozen=True)
class AUCResult:
    auc_pos: float  # test r > J
    auc_neg: float  # test -r > J

    @property
    def normalized_pos(self) -> float:
        return 2.0 * (self.auc_pos - 0.5)

    @property
    def normalized_neg(self) -> float:
        return 2.0 * (self.auc_neg - 0.5)

    @property
    def normalized(self) -> float:
        return max(self.normalized_pos, self.normalized_neg)


def _auc(nominal: np.ndarray, faulty: np.ndarray) -> float:
    ranks = rankdata(np.concatenate([nominal, faulty]))  # ties -> average rank
    n0, n1 = nominal.size, faulty.size
    u = ranks[n0:].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n0 * n1))


def roc_auc(nominal, faulty) -> AUCResult:
    """Mann-Whitney AUC for the tests r > J and -r > J."""
    a = np.asarray(nominal, dtype=float).ravel()
    b = np.asarray(faulty, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    auc = _auc(a, b)
    return AUCResult(auc, 1.0 - auc)


@dataclass(frozen=True)
class AUCRow:
    magnitude: float
    auc: AUCResult


def auc_vs_magnitude(residual_pair: Callable[[float], tuple[np.ndarray, np.ndarray]],
                     magnitudes: Iterable[float] = DEFAULT_MAGNITUDES) -> list[AUCRow]:
    """``residual_pair(f)`` returns (nominal sample, faulty sample) for fault size f."""
    rows = []
    for f in magnitudes:
        nominal, faulty = residual_pair(float(f))
        rows.append(AUCRow(float(f), roc_auc(nominal, faulty)))
    return rows


def auc_table_csv(rows: Sequence[AUCRow]) -> str:
    lines = ["magnitude,auc_pos,auc_neg,normalized_pos,normalized_neg"]
    for row in rows:
        a = row.auc
        lines.append(f"{row.magnitude:.6g},{a.auc_pos:.6f},{a.auc_neg:.6f},{a.normalized_pos:.6f},{a.normalized_neg:.6f}")
    return "\n".join(lines) + "\n"


def diagnose(pattern, sig: FaultSignatureMatrix) -> list[str]:
    """Faults whose signature covers every triggered residual, best first.

    Ranking: fewest sensitive-but-silent residuals, then smaller column
    weight, then fault id. No triggered residual gives ``[NO_FAULT]``.
    """
    p = np.asarray(pattern, dtype=bool)
    if p.shape != (sig.matrix.shape[0],):
        raise ValueError(f"pattern of length {p.size} for {sig.matrix.shape[0]} residuals")
    if not p.any():
        return [NO_FAULT]
    ranked = []
    for j, f in enumerate(sig.cols):
        col = sig.matrix[:, j]
        if np.all(col[p]):
            silent = int(np.sum(col & ~p))
            ranked.append((silent, int(col.sum()), f))
    ranked.sort()
    return [f for _, _, f in ranked]


@dataclass
class DetectionReport:
    signature: FaultSignatureMatrix
    alarm_times: dict[str, dict[str, int | None]] = field(default_factory=dict)
    auc_tables: dict[str, dict[str, list[AUCRow]]] = field(default_factory=dict)
    diagnoses: dict[str, list[str]] = field(default_factory=dict)
    tunings: dict[str, CusumTuning] = field(default_factory=dict)

    def to_text(self) -> str:
        out = ["# detection report", "", "## fault signature matrix", self.signature.to_csv().rstrip()]
        out += ["", "## CUSUM tuning"]
        for name, t in self.tunings.items():
            out.append(
                f"{name}: nu+={t.nu_pos:.6g} nu-={t.nu_neg:.6g} J+={t.threshold_pos:.6g} "
                f"J-={t.threshold_neg:.6g} heldout_alarm_rate={t.heldout_alarm_rate:.6g}"
            )
        out += ["", "## alarms (sample index, '-' = none)"]
        for scen, alarms in self.alarm_times.items():
            cells = " ".join(f"{k}={'-' if v is None else v}" for k, v in alarms.items())
            out.append(f"{scen}: {cells}")
        out += ["", "## diagnosis"]
        for scen, cands in self.diagnoses.items():
            out.append(f"{scen}: {', '.join(cands) if cands else '(unexplained)'}")
        return "\n".join(out) + "\n"
