"""Grey-box recurrent networks: one MLP per state update plus one for the
output map, simulated with forward Euler

    x[t+1] = x[t] + T * g(x[t], u[t]),    y_hat[t] = h(x[t], u[t]).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .causal import StateSpaceStructure

WEIGHTS_FORMAT = "greyfdi-weights"
WEIGHTS_VERSION = 1
DEFAULT_HIDDEN = (256, 256)


class SimulationDivergence(FloatingPointError):
    def __init__(self, message: str, step: int):
        self.step = step
        super().__init__(f"{message} at time index {step}")


class StructureMismatch(ValueError):
    pass


@dataclass
class MLP:
    """Fully connected net: rectifier hidden layers, affine scalar output.

    ``weights[l]`` has shape (fan_in, fan_out).
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ValueError(f"layer shapes {a.shape} and {b.shape} do not chain")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise ValueError(f"bias shape {b.shape} does not fit weights {w.shape}")
        if self.weights[-1].shape[1] != 1:
            raise ValueError("output layer must be scalar")

    @property
    def input_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w in self.weights[:-1])

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MLP":
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_mlp(input_width: int, hidden: Sequence[int], rng: np.random.Generator,
             output_scale: float = 1.0) -> MLP:
    """Uniform weights scaled by fan-in (He-uniform bound), zero biases.

    ``output_scale`` shrinks the output layer; state-update nets start close
    to a pure integrator so that the untrained recursion does not blow up.
    """
    widths = [input_width, *hidden, 1]
    weights, biases = [], []
    for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        last = k == len(widths) - 2
        bound = math.sqrt((3.0 if last else 6.0) / max(fan_in, 1))
        if last:
            bound *= output_scale
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MLP(weights, biases)


def mlp_forward(net: MLP, v) -> float:
    a = np.asarray(v, dtype=float)
    if a.shape != (net.input_width,):
        raise ValueError(f"expected input of width {net.input_width}, got shape {a.shape}")
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        a = np.maximum(a @ w + b, 0.0)
    return float((a @ net.weights[-1] + net.biases[-1])[0])


@dataclass
class GreyBoxRNN:
    structure: StateSpaceStructure
    g_nets: list[MLP]
    h_net: MLP
    T: float
    x0: np.ndarray
    seed: int | None = None
    clamp: float = 1e6

    def __post_init__(self):
        s = self.structure
        if len(self.g_nets) != len(s.states):
            raise StructureMismatch(f"{len(self.g_nets)} state nets for {len(s.states)} states")
        for name, net, args in zip(s.states, self.g_nets, s.g_args):
            if net.input_width != len(args):
                raise StructureMismatch(f"net for {name} takes {net.input_width} inputs, structure gives {len(args)}")
        if self.h_net.input_width != len(s.h_args):
            raise StructureMismatch("output net width does not match h arguments")
        self.x0 = np.asarray(self.x0, dtype=float).reshape(len(s.states))

    @property
    def nets(self) -> list[MLP]:
        return [*self.g_nets, self.h_net]

    @property
    def n_params(self) -> int:
        return sum(n.n_params for n in self.nets)

    @property
    def structure_hash(self) -> str:
        return self.structure.hash

    def copy(self) -> "GreyBoxRNN":
        return GreyBoxRNN(
            self.structure, [n.copy() for n in self.g_nets], self.h_net.copy(),
            self.T, self.x0.copy(), self.seed, self.clamp,
        )


@dataclass(frozen=True)
class RNNHyperParams:
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    sampling_time: float = 0.05
    seed: int = 0
    x0: Sequence[float] | None = None
    clamp: float = 1e6
    state_output_scale: float = 0.1


def build_rnn(s: StateSpaceStructure, hp: RNNHyperParams = RNNHyperParams()) -> GreyBoxRNN:
    if not s.states:
        raise ValueError("structure has no states; a grey-box RNN needs at least one")
    rng = np.random.default_rng(hp.seed)
    g_nets = [init_mlp(len(args), hp.hidden, rng, hp.state_output_scale) for args in s.g_args]
    h_net = init_mlp(len(s.h_args), hp.hidden, rng)
    x0 = np.zeros(len(s.states)) if hp.x0 is None else np.asarray(hp.x0, dtype=float)
    return GreyBoxRNN(s, g_nets, h_net, hp.sampling_time, x0, hp.seed, hp.clamp)


def _signal_index(s: StateSpaceStructure) -> dict[str, int]:
    names = [*s.states, *s.inputs]
    return {n: i for i, n in enumerate(names)}


def _gather(rnn: GreyBoxRNN, x, u, args) -> np.ndarray:
    idx = _signal_index(rnn.structure)
    sig = np.concatenate([np.asarray(x, float), np.asarray(u, float)])
    return sig[[idx[a] for a in args]]


def rnn_step(rnn: GreyBoxRNN, x_t, u_t) -> tuple[np.ndarray, float]:
    """One Euler step; returns (x[t+1], y_hat[t])."""
    s = rnn.structure
    x_t = np.asarray(x_t, dtype=float)
    u_t = np.asarray(u_t, dtype=float)
    if x_t.shape != (len(s.states),) or u_t.shape != (len(s.inputs),):
        raise ValueError("state or input vector has the wrong length")
    dx = np.array([mlp_forward(net, _gather(rnn, x_t, u_t, a)) for net, a in zip(rnn.g_nets, s.g_args)])
    y_hat = mlp_forward(rnn.h_net, _gather(rnn, x_t, u_t, s.h_args))
    x_next = x_t + rnn.T * dx
    if not np.all(np.isfinite(x_next)) or np.any(np.abs(x_next) > rnn.clamp):
        raise SimulationDivergence("state left the admissible range", 0)
    return x_next, y_hat


class StackedNets:
    """All nets of one RNN packed into 3-D arrays so a time step costs a few
    batched matmuls. Inputs narrower than the widest net are zero padded;
    the padding reads a constant-zero signal slot, so padded weights never
    receive gradient."""

    def __init__(self, rnn: GreyBoxRNN):
        s = rnn.structure
        nets = rnn.nets
        hidden = {n.hidden for n in nets}
        if len(hidden) != 1:
            raise ValueError("all nets of one RNN must share hidden widths")
        self.n_states = len(s.states)
        self.n_inputs = len(s.inputs)
        self.n_signals = self.n_states + self.n_inputs + 1
        self.zero_slot = self.n_signals - 1
        self.K = len(nets)
        self.T = rnn.T
        self.x0 = rnn.x0.copy()
        self.clamp = rnn.clamp
        self.widths = [n.input_width for n in nets]
        self.in_max = max(1, max(self.widths))
        sig = _signal_index(s)
        args = [*s.g_args, s.h_args]
        self.idx = np.full((self.K, self.in_max), self.zero_slot, dtype=np.intp)
        for k, a in enumerate(args):
            self.idx[k, : len(a)] = [sig[n] for n in a]
        onehot = np.zeros((self.K * self.in_max, self.n_signals))
        onehot[np.arange(self.K * self.in_max), self.idx.ravel()] = 1.0
        self.scatter = onehot
        self.n_layers = len(nets[0].weights)
        self.params: list[np.ndarray] = []
        for layer in range(self.n_layers):
            fan_in = self.in_max if layer == 0 else nets[0].weights[layer].shape[0]
            fan_out = nets[0].weights[layer].shape[1]
            W = np.zeros((self.K, fan_in, fan_out))
            b = np.zeros((self.K, 1, fan_out))
            for k, n in enumerate(nets):
                w = n.weights[layer]
                W[k, : w.shape[0], :] = w
                b[k, 0, :] = n.biases[layer]
            self.params += [W, b]

    def unpack(self, params: Sequence[np.ndarray] | None = None) -> list[MLP]:
        params = self.params if params is None else params
        out = []
        for k in range(self.K):
            ws, bs = [], []
            for layer in range(self.n_layers):
                W, b = params[2 * layer], params[2 * layer + 1]
                w = W[k, : self.widths[k], :] if layer == 0 else W[k]
                ws.append(w.copy())
                bs.append(b[k, 0, :].copy())
            out.append(MLP(ws, bs))
        return out

    def to_rnn(self, template: GreyBoxRNN, params: Sequence[np.ndarray] | None = None) -> GreyBoxRNN:
        nets = self.unpack(params)
        return GreyBoxRNN(template.structure, nets[:-1], nets[-1], template.T, template.x0.copy(),
                          template.seed, template.clamp)

    def forward(self, S: np.ndarray, params=None, keep: bool = False):
        """S: (B, n_signals) -> outputs (K, B) and optional layer cache."""
        params = self.params if params is None else params
        a = np.ascontiguousarray(S[:, self.idx].transpose(1, 0, 2))
        cache = [a] if keep else None
        for layer in range(self.n_layers):
            z = np.matmul(a, params[2 * layer]) + params[2 * layer + 1]
            if layer < self.n_layers - 1:
                a = np.maximum(z, 0.0)
                if keep:
                    cache.append(a)
            else:
                a = z
        return a[:, :, 0], cache

    def backward(self, cache, dout: np.ndarray, grads: list[np.ndarray], params=None) -> np.ndarray:
        """Accumulate parameter gradients into ``grads``; return dL/dS (B, n_signals)."""
        params = self.params if params is None else params
        d = dout[:, :, None]
        for layer in range(self.n_layers - 1, -1, -1):
            a_prev = cache[layer]
            grads[2 * layer] += np.matmul(a_prev.transpose(0, 2, 1), d)
            grads[2 * layer + 1] += d.sum(axis=1, keepdims=True)
            d = np.matmul(d, params[2 * layer].transpose(0, 2, 1))
            if layer > 0:
                d = d * (cache[layer] > 0.0)
        B = d.shape[1]
        return d.transpose(1, 0, 2).reshape(B, -1) @ self.scatter


def simulate_batch(stack: StackedNets, U: np.ndarray, params=None, keep: bool = False, x_init=None):
    """Run B sequences at once. U: (B, N, n_inputs).

    Every sequence starts from ``stack.x0`` unless ``x_init`` (B, n_states)
    is given. Returns y_hat (B, N), states (B, N, n_states) holding x[t],
    the per-step caches when ``keep`` is set, and the final states x[N].
    """
    B, N, _ = U.shape
    n = stack.n_states
    if x_init is None:
        x = np.broadcast_to(stack.x0, (B, n)).copy()
    else:
        x = np.array(x_init, dtype=float).reshape(B, n)
    y_hat = np.empty((B, N))
    xs = np.empty((B, N, n))
    caches = [] if keep else None
    S = np.zeros((B, stack.n_signals))
    for t in range(N):
        xs[:, t] = x
        S[:, :n] = x
        S[:, n:n + stack.n_inputs] = U[:, t]
        out, cache = stack.forward(S, params, keep)
        if keep:
            caches.append(cache)
        y_hat[:, t] = out[n]
        x = x + stack.T * out[:n].T
        if not np.all(np.isfinite(x)) or np.any(np.abs(x) > stack.clamp):
            raise SimulationDivergence("state left the admissible range", t + 1)
    return y_hat, xs, caches, x


@dataclass
class Trajectory:
    u: np.ndarray
    y: np.ndarray
    y_hat: np.ndarray
    x: np.ndarray
    residual: np.ndarray = field(init=False)

    def __post_init__(self):
        self.residual = self.y - self.y_hat


def _as_input_matrix(rnn: GreyBoxRNN, inputs) -> np.ndarray:
    names = rnn.structure.inputs
    if isinstance(inputs, dict):
        missing = [n for n in names if n not in inputs]
        if missing:
            raise KeyError(f"missing input signals: {missing}")
        cols = [np.asarray(inputs[n], dtype=float) for n in names]
        if len({len(c) for c in cols}) > 1:
            raise ValueError("input signals differ in length")
        return np.column_stack(cols) if cols else np.zeros((0, 0))
    u = np.asarray(inputs, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    if u.shape[1] != len(names):
        raise ValueError(f"expected {len(names)} input columns, got {u.shape[1]}")
    return u


def rnn_simulate(rnn: GreyBoxRNN, inputs, y_series) -> Trajectory:
    """Simulate from ``rnn.x0``; ``inputs`` is a name -> series mapping or an
    (N, n_inputs) array ordered as ``structure.inputs``."""
    y = np.asarray(y_series, dtype=float)
    if isinstance(inputs, dict) and not rnn.structure.inputs:
        u = np.zeros((len(y), 0))
    else:
        u = _as_input_matrix(rnn, inputs)
    if len(u) != len(y):
        raise ValueError(f"inputs have {len(u)} samples but the measurement has {len(y)}")
    stack = StackedNets(rnn)
    y_hat, xs, _, _ = simulate_batch(stack, u[None], keep=False)
    return Trajectory(u=u, y=y, y_hat=y_hat[0], x=xs[0])


def save_weights(rnn: GreyBoxRNN, path) -> None:
    doc = {
        "format": WEIGHTS_FORMAT,
        "version": WEIGHTS_VERSION,
        "structure_hash": rnn.structure_hash,
        "structure": rnn.structure.to_dict(),
        "sampling_time": rnn.T,
        "x0": rnn.x0.tolist(),
        "seed": rnn.seed,
        "clamp": rnn.clamp,
        "nets": [
            {
                "shapes": [list(w.shape) for w in n.weights],
                "weights": [w.tolist() for w in n.weights],
                "biases": [b.tolist() for b in n.biases],
            }
            for n in rnn.nets
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_weights(path, expected: StateSpaceStructure | None = None) -> GreyBoxRNN:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != WEIGHTS_FORMAT or doc.get("version") != WEIGHTS_VERSION:
        raise ValueError(f"{path}: not a version-{WEIGHTS_VERSION} weights file")
    structure = StateSpaceStructure.from_dict(doc["structure"])
    if structure.hash != doc["structure_hash"]:
        raise StructureMismatch(f"{path}: stored structure does not match its hash")
    if expected is not None and expected.hash != doc["structure_hash"]:
        raise StructureMismatch(f"{path}: weights belong to structure {doc['structure_hash']}, not {expected.hash}")
    nets = []
    for n in doc["nets"]:
        ws = [np.array(w, dtype=float).reshape(shape) for w, shape in zip(n["weights"], n["shapes"])]
        nets.append(MLP(ws, [np.array(b, dtype=float) for b in n["biases"]]))
    return GreyBoxRNN(structure, nets[:-1], nets[-1], doc["sampling_time"],
                      np.array(doc["x0"], dtype=float), doc["seed"], doc["clamp"])
