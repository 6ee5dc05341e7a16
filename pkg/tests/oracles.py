"""Brute-force reference implementations used as test oracles.

Everything here enumerates subsets or assignments directly and is only
meant for models with a handful of equations.
"""
from __future__ import annotations

from itertools import combinations

import numpy as np

from greyfdi.structmodel import StructuralModel, Variable


def random_model(rng: np.random.Generator, max_eqs: int = 8, max_unknowns: int = 8,
                 density: float | None = None, n_faults: int = 0) -> StructuralModel:
    """Random algebraic model: unknowns, one known signal per equation with
    probability one half, and optional faults."""
    n_e = int(rng.integers(0, max_eqs + 1))
    n_x = int(rng.integers(0, max_unknowns + 1))
    p = rng.uniform(0.15, 0.6) if density is None else density
    xs = [f"x{j + 1}" for j in range(n_x)]
    eqs = [f"e{i + 1}" for i in range(n_e)]
    knowns: list[str] = []
    eq_vars = {}
    for e in eqs:
        vs = [x for x in xs if rng.random() < p]
        if rng.random() < 0.5:
            k = f"z{len(knowns) + 1}"
            knowns.append(k)
            vs.append(k)
        eq_vars[e] = tuple(vs)
    faults = {}
    if eqs:
        for k in range(n_faults):
            faults[f"f{k + 1}"] = eqs[int(rng.integers(0, n_e))]
    variables = (
        [Variable(x, "unknown") for x in xs]
        + [Variable(f, "fault") for f in faults]
        + [Variable(k, "known") for k in knowns]
    )
    return StructuralModel(tuple(eqs), tuple(variables), eq_vars, (), faults, {})


def unknown_sets(m, eqs) -> dict[str, frozenset[str]]:
    return {e: frozenset(m.unknowns_of(e)) for e in eqs}


def vars_of(rows: dict[str, frozenset[str]], eqs) -> frozenset[str]:
    out: set[str] = set()
    for e in eqs:
        out |= rows[e]
    return frozenset(out)


def subsets(items):
    items = list(items)
    for k in range(len(items) + 1):
        for c in combinations(items, k):
            yield frozenset(c)


def max_matching_size(m, eqs=None) -> int:
    """Exhaustive search over all assignments, memoized on the used-variable mask."""
    eqs = list(m.equations if eqs is None else eqs)
    rows = unknown_sets(m, eqs)
    xs = sorted(vars_of(rows, eqs))
    bit = {x: 1 << j for j, x in enumerate(xs)}
    memo: dict[tuple[int, int], int] = {}

    def best(i: int, used: int) -> int:
        if i == len(eqs):
            return 0
        key = (i, used)
        if key not in memo:
            out = best(i + 1, used)  # leave equation i unmatched
            for x in rows[eqs[i]]:
                if not used & bit[x]:
                    out = max(out, 1 + best(i + 1, used | bit[x]))
            memo[key] = out
        return memo[key]

    return best(0, 0)


def surplus(rows, eqs) -> int:
    return len(eqs) - len(vars_of(rows, eqs))


def dm_oracle(m, eqs=None):
    """Coarse DM partition from subset surpluses.

    The over-determined equations are the smallest equation set attaining
    the maximal surplus |E| - |X(E)|; the under-determined variables are the
    smallest variable set attaining the maximal surplus |V| - |E(V)|, where
    E(V) are the equations touching V. Both surpluses are supermodular, so
    their maximizers are closed under intersection and the smallest one is
    unique.
    """
    eqs = list(m.equations if eqs is None else eqs)
    rows = unknown_sets(m, eqs)
    xs = sorted(vars_of(rows, eqs))
    best, over = 0, frozenset()
    for s in subsets(eqs):
        d = surplus(rows, s)
        if d > best or (d == best and len(s) < len(over)):
            best, over = d, s
    best_v, under_v = 0, frozenset()
    for v in subsets(xs):
        touching = frozenset(e for e in eqs if rows[e] & v)
        d = len(v) - len(touching)
        if d > best_v or (d == best_v and len(v) < len(under_v)):
            best_v, under_v = d, v
    under_e = frozenset(e for e in eqs if rows[e] & under_v)
    over_v = vars_of(rows, over)
    exact_e = frozenset(eqs) - over - under_e
    exact_v = frozenset(xs) - over_v - under_v
    return {
        "over_eqs": over, "over_vars": over_v,
        "under_eqs": under_e, "under_vars": under_v,
        "exact_eqs": exact_e, "exact_vars": exact_v,
        "redundancy": best,
    }


def mso_oracle(m) -> set[frozenset[str]]:
    """All MSO sets by exhaustive subset enumeration.

    E is PSO when its surplus is strictly larger than that of every proper
    subset, i.e. E is its own smallest surplus maximizer. An MSO set is a
    PSO set with no proper PSO subset.
    """
    rows = unknown_sets(m, m.equations)
    sur = {s: surplus(rows, s) for s in subsets(m.equations)}
    best_below: dict[frozenset, int] = {}
    pso = set()
    for s in sorted(sur, key=len):
        proper = max((best_below[s - {e}] for e in s), default=-1)
        if s and sur[s] > proper:
            pso.add(s)
        best_below[s] = max(sur[s], proper)
    return {s for s in pso if not any(t < s for t in pso)}


def random_structure(rng: np.random.Generator, max_states: int = 3, max_inputs: int = 2):
    """Random state-space structure; every argument list is non-empty."""
    from greyfdi.causal import StateSpaceStructure

    n_x = int(rng.integers(1, max_states + 1))
    n_u = int(rng.integers(0, max_inputs + 1))
    states = tuple(f"x{i}" for i in range(n_x))
    inputs = tuple(f"u{i}" for i in range(n_u))
    pool = states + inputs

    def pick():
        k = int(rng.integers(1, len(pool) + 1))
        return tuple(pool[i] for i in sorted(rng.choice(len(pool), size=k, replace=False)))

    return StateSpaceStructure(states, inputs, "y", tuple(pick() for _ in states), pick())


def flat_params(rnn) -> np.ndarray:
    return np.concatenate([p.ravel() for net in rnn.nets for p in net.params()])


def _batched_loss(rnn, theta: np.ndarray, U: np.ndarray, Y: np.ndarray):
    """MSE for P parameter vectors at once, in the dtype of ``theta``.

    Straight-line simulation independent of the stacked implementation.
    Returns (losses (P,), rectifier pattern (P, K) as booleans).
    """
    s = rnn.structure
    P = theta.shape[0]
    nets = []
    k = 0
    for net in rnn.nets:
        layers = []
        for w, b in zip(net.weights, net.biases):
            W = theta[:, k:k + w.size].reshape(P, *w.shape)
            k += w.size
            B_ = theta[:, k:k + b.size].reshape(P, 1, b.size)
            k += b.size
            layers.append((W, B_))
        nets.append(layers)
    index = {name: i for i, name in enumerate(s.states + s.inputs)}
    args = [[index[a] for a in g] for g in s.g_args] + [[index[a] for a in s.h_args]]
    n_seq, N = Y.shape
    dt = theta.dtype
    x = np.broadcast_to(np.asarray(rnn.x0, dtype=dt), (P, n_seq, len(s.states))).copy()
    Ul = U.astype(dt)
    err = np.zeros((P,), dtype=dt)
    pattern = []
    for t in range(N):
        sig = np.concatenate([x, np.broadcast_to(Ul[:, t], (P, n_seq, Ul.shape[2]))], axis=2)
        outs = []
        for layers, a_idx in zip(nets, args):
            a = sig[:, :, a_idx]
            for li, (W, B_) in enumerate(layers):
                z = np.matmul(a, W) + B_
                if li < len(layers) - 1:
                    pattern.append((z > 0).reshape(P, -1))
                    a = np.maximum(z, 0)
                else:
                    a = z
            outs.append(a[:, :, 0])
        y_hat = outs[-1]
        err = err + ((Y[:, t].astype(dt) - y_hat) ** 2).sum(axis=1)
        x = x + dt.type(rnn.T) * np.stack(outs[:-1], axis=2)
    return err / (n_seq * N), np.concatenate(pattern, axis=1)


def fd_gradient(rnn, U: np.ndarray, Y: np.ndarray, h: float = 1e-4):
    """Five-point central differences in extended precision.

    Returns (gradient, usable) where ``usable`` is False for parameters
    whose stencil moves some rectifier across its kink, or that sit within
    1e-7 of one at the nominal point.
    """
    theta = flat_params(rnn).astype(np.longdouble)
    n = theta.size
    steps = np.array([-2, -1, 1, 2], dtype=np.longdouble) * np.longdouble(h)
    batch = np.repeat(theta[None], 4 * n + 1, axis=0)
    for j in range(n):
        batch[1 + 4 * j: 5 + 4 * j, j] += steps
    losses, pattern = _batched_loss(rnn, batch, U, Y)
    lm2, lm1, lp1, lp2 = (losses[1:].reshape(n, 4).T)
    grad = (lm2 - 8 * lm1 + 8 * lp1 - lp2) / (12 * np.longdouble(h))
    base = pattern[0]
    pats = pattern[1:].reshape(n, 4, -1)
    usable = np.all(pats == base, axis=(1, 2))
    if _preactivation_margin(rnn, U) < 1e-7:
        usable[:] = False
    return grad.astype(float), usable


def _preactivation_margin(rnn, U) -> float:
    """Smallest |pre-activation| of any hidden unit along the nominal run."""
    s = rnn.structure
    index = {name: i for i, name in enumerate(s.states + s.inputs)}
    args = [[index[a] for a in g] for g in s.g_args] + [[index[a] for a in s.h_args]]
    nets = rnn.nets
    x = np.broadcast_to(rnn.x0, (U.shape[0], len(s.states))).astype(float).copy()
    margin = np.inf
    for t in range(U.shape[1]):
        sig = np.concatenate([x, U[:, t]], axis=1)
        outs = []
        for net, a_idx in zip(nets, args):
            a = sig[:, a_idx]
            for li, (w, b) in enumerate(zip(net.weights, net.biases)):
                z = a @ w + b
                if li < len(net.weights) - 1:
                    margin = min(margin, float(np.abs(z).min()))
                    a = np.maximum(z, 0)
                else:
                    a = z
            outs.append(a[:, 0])
        x = x + rnn.T * np.stack(outs[:-1], axis=1)
    return margin


def random_gradient_case(rng: np.random.Generator):
    """Random small grey-box RNN (<= 3 states, hidden widths <= 8, <= 20
    steps) with random biases, plus an input/measurement batch."""
    from greyfdi.rnngen import GreyBoxRNN, RNNHyperParams, build_rnn

    s = random_structure(rng)
    depth = int(rng.integers(1, 3))
    hidden = tuple(int(rng.integers(1, 9)) for _ in range(depth))
    rnn = build_rnn(s, RNNHyperParams(hidden=hidden, seed=int(rng.integers(0, 2**31)),
                                      sampling_time=float(rng.uniform(0.01, 0.2)),
                                      x0=rng.normal(scale=0.5, size=len(s.states)),
                                      state_output_scale=1.0))
    for net in rnn.nets:
        for b in net.biases:
            b[:] = rng.normal(scale=0.3, size=b.shape)
    n_seq = int(rng.integers(1, 4))
    N = int(rng.integers(2, 21))
    U = rng.normal(size=(n_seq, N, len(s.inputs)))
    Y = rng.normal(size=(n_seq, N))
    return rnn, U, Y


def relative_errors(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
