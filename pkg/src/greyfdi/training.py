"""Training of grey-box RNNs on nominal data: BPTT through the Euler
recursion, Adam with a stepwise-decaying learning rate, and ensembles."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .rnngen import MLP, GreyBoxRNN, SimulationDivergence, StackedNets, StructureMismatch, simulate_batch

log = logging.getLogger(__name__)


class TrainingDivergence(FloatingPointError):
    def __init__(self, message: str, epoch: int):
        self.epoch = epoch
        super().__init__(f"{message} (epoch {epoch})")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    learning_rate: float = 5e-4
    decay: float = 0.97
    decay_every: int = 10
    batch_length: int = 600
    batch_count: int | None = None
    sequences_per_step: int | None = None  # None: all batches in one Adam step per epoch
    seed: int = 0
    hidden: tuple[int, ...] = (256, 256)
    report_every: int = 10
    truncation: int | None = None
    washout: int = 0  # leading samples of each batch left out of the loss
    carry_state: bool = False  # start batch k where the latest pass over batch k-1 ended
    shuffle: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.learning_rate <= 0 or self.batch_length <= 0:
            raise ValueError("learning rate and batch length must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.decay_every <= 0:
            raise ValueError("decay_every must be positive")
        if not 0 <= self.washout < self.batch_length:
            raise ValueError("washout must be shorter than a batch")


def learning_rate(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    return cfg.learning_rate * cfg.decay ** (epoch // cfg.decay_every)


def mse_loss(pred, target) -> float:
    p = np.asarray(pred, dtype=float)
    t = np.asarray(target, dtype=float)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("empty series")
    return float(np.mean((t - p) ** 2))


def make_batches(u, y, batch_length: int, count: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Cut aligned series into contiguous, equally long segments."""
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    y = np.asarray(y, dtype=float)
    if len(u) != len(y):
        raise ValueError("inputs and measurement differ in length")
    available = len(y) // batch_length
    n = available if count is None else min(count, available)
    if n < 1:
        raise ValueError(f"series of {len(y)} samples is shorter than one batch of {batch_length}")
    U = u[: n * batch_length].reshape(n, batch_length, u.shape[1])
    Y = y[: n * batch_length].reshape(n, batch_length)
    return U, Y


def _as_batch(batch) -> tuple[np.ndarray, np.ndarray]:
    U, Y = batch
    U = np.asarray(U, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        U = U.reshape(1, *U.shape) if U.ndim == 2 else U.reshape(1, -1, 1)
        Y = Y[None]
    if U.ndim == 2:
        U = U[:, :, None]
    if U.shape[:2] != Y.shape:
        raise ValueError(f"input batch {U.shape} does not align with measurements {Y.shape}")
    return U, Y


def _loss_and_grads(stack: StackedNets, params, U, Y, truncation: int | None = None, washout: int = 0,
                    x_init=None, final: dict | None = None):
    y_hat, _, caches, x_last = simulate_batch(stack, U, params, keep=True, x_init=x_init)
    if final is not None:
        final["x"] = x_last
    B, N = Y.shape
    err = Y - y_hat
    err[:, :washout] = 0.0
    loss = float(np.sum(err**2) / (B * (N - washout)))
    dyhat = -2.0 * err / (B * (N - washout))
    grads = [np.zeros_like(p) for p in params]
    n = stack.n_states
    dx = np.zeros((B, n))
    dout = np.zeros((stack.K, B))
    for t in range(N - 1, -1, -1):
        if truncation and (t + 1) % truncation == 0:
            dx[:] = 0.0
        dout[:n] = stack.T * dx.T
        dout[n] = dyhat[:, t]
        dS = stack.backward(caches[t], dout, grads, params)
        dx = dx + dS[:, :n]
    return loss, grads


def sequence_loss(rnn: GreyBoxRNN, batch) -> float:
    U, Y = _as_batch(batch)
    y_hat, _, _, _ = simulate_batch(StackedNets(rnn), U)
    return mse_loss(y_hat, Y)


def bptt_gradients(rnn: GreyBoxRNN, batch, truncation: int | None = None) -> tuple[float, list[MLP]]:
    """Exact gradient of the batch MSE w.r.t. every network parameter.

    Returns the loss and one gradient-valued :class:`MLP` per network, in
    the order ``g_nets..., h_net``.
    """
    U, Y = _as_batch(batch)
    stack = StackedNets(rnn)
    loss, grads = _loss_and_grads(stack, stack.params, U, Y, truncation)
    return loss, stack.unpack(grads)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    if len(params) != len(grads):
        raise ValueError("parameter and gradient lists differ in length")
    step = state.step + 1
    new_p, new_m, new_v = [], [], []
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, step)


@dataclass
class TrainResult:
    rnn: GreyBoxRNN
    losses: list[float] = field(default_factory=list)


def train(rnn: GreyBoxRNN, batches, cfg: TrainConfig,
          on_epoch: Callable[[int, float], None] | None = None) -> TrainResult:
    """Fit all networks of ``rnn`` to the batches; the loss curve holds the
    epoch-averaged training MSE (mean over that epoch's Adam steps,
    weighted by sequences), measured before each step's update."""
    U, Y = _as_batch(batches)
    if cfg.epochs == 0:
        return TrainResult(rnn, [])
    stack = StackedNets(rnn)
    params = [p.copy() for p in stack.params]
    state = AdamState.zeros_like(params)
    n_seq = len(Y)
    per_step = n_seq if not cfg.sequences_per_step else min(cfg.sequences_per_step, n_seq)
    order = np.arange(n_seq)
    rng = np.random.default_rng(cfg.seed)
    losses = []
    starts = np.broadcast_to(stack.x0, (n_seq, stack.n_states)).copy()
    for epoch in range(cfg.epochs):
        lr = learning_rate(epoch, cfg)
        if cfg.shuffle:
            order = rng.permutation(n_seq)
        total = 0.0
        for start in range(0, n_seq, per_step):
            sel = order[start:start + per_step]
            final: dict = {}
            try:
                loss, grads = _loss_and_grads(stack, params, U[sel], Y[sel], cfg.truncation, cfg.washout,
                                              starts[sel] if cfg.carry_state else None, final)
            except SimulationDivergence as exc:
                raise TrainingDivergence(str(exc), epoch) from exc
            if not np.isfinite(loss):
                raise TrainingDivergence("non-finite loss", epoch)
            params, state = adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
            if cfg.carry_state:
                nxt = sel + 1
                keep = nxt < n_seq
                starts[nxt[keep]] = final["x"][keep]
            total += loss * len(sel)
        epoch_loss = total / n_seq
        losses.append(epoch_loss)
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss)
        if cfg.report_every and epoch % cfg.report_every == 0:
            log.debug("epoch %d lr %.3g loss %.6g", epoch, lr, epoch_loss)
    return TrainResult(stack.to_rnn(rnn, params), losses)


@dataclass
class EnsembleModel:
    members: list[GreyBoxRNN]

    def __post_init__(self):
        if len(self.members) < 2:
            raise ValueError("an ensemble needs at least two members")
        hashes = {m.structure_hash for m in self.members}
        if len(hashes) != 1:
            raise StructureMismatch("ensemble members have different structures")


@dataclass
class EnsemblePrediction:
    mean: np.ndarray
    std: np.ndarray
    residual: np.ndarray
    members: np.ndarray

    @property
    def lower(self) -> np.ndarray:
        return self.mean - 3.0 * self.std

    @property
    def upper(self) -> np.ndarray:
        return self.mean + 3.0 * self.std


def ensemble_predict(ens: EnsembleModel, inputs, y_series) -> EnsemblePrediction:
    from .rnngen import rnn_simulate

    preds = np.array([rnn_simulate(m, inputs, y_series).y_hat for m in ens.members])
    mean = preds.mean(axis=0)
    std = preds.std(axis=0, ddof=1)
    return EnsemblePrediction(mean, std, np.asarray(y_series, dtype=float) - mean, preds)


def train_ensemble(template_builder: Callable[[int], GreyBoxRNN], batches, cfg: TrainConfig,
                   seeds: Sequence[int]) -> tuple[EnsembleModel, list[list[float]]]:
    """Train one member per seed; diversity comes from initialization only."""
    members, curves = [], []
    for seed in seeds:
        result = train(template_builder(seed), batches, replace(cfg, seed=seed))
        members.append(result.rnn)
        curves.append(result.losses)
    return EnsembleModel(members), curves
