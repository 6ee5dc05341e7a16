"""Matchings of exactly determined remainders, computational graphs and
their causality, and extraction of grey-box state-space structures."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from graphlib import CycleError, TopologicalSorter
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .msoenum import MSOSet, natural_key
from .structmodel import StructuralModel

_FORBIDDEN = 1e9


class NoPerfectMatchingError(ValueError):
    pass


class AlgebraicLoopError(ValueError):
    pass


class CausalityError(ValueError):
    pass


class Causality(str, Enum):
    INTEGRAL = "integral"
    DERIVATIVE = "derivative"
    MIXED = "mixed"
    ALGEBRAIC = "algebraic"


def _equations_of(mso) -> tuple[str, ...]:
    return tuple(getattr(mso, "equations", mso))


def _remainder(m: StructuralModel, mso, residual_eq: str):
    eqs = _equations_of(mso)
    if residual_eq not in eqs:
        raise ValueError(f"residual equation {residual_eq} is not in the set")
    rest = [e for e in m.sort_equations(eqs) if e != residual_eq]
    xs = m.sort_variables({v for e in eqs for v in m.unknowns_of(e)})
    return rest, xs


def _cost_matrix(m: StructuralModel, rest: Sequence[str], xs: Sequence[str]) -> np.ndarray:
    """0 for ordinary edges, 1 for a link equation solved for its derivative."""
    xi = {x: j for j, x in enumerate(xs)}
    cost = np.full((len(rest), len(xs)), _FORBIDDEN)
    for i, e in enumerate(rest):
        link = m.link_of_equation(e)
        for v in m.unknowns_of(e):
            cost[i, xi[v]] = 1.0 if link is not None and v == link.derivative else 0.0
    return cost


def _min_cost(cost: np.ndarray) -> float:
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def match_remainder(m: StructuralModel, mso, residual_eq: str) -> dict[str, str]:
    """Perfect matching of the set minus ``residual_eq`` onto its unknowns.

    Among all perfect matchings the one with the fewest differentiations is
    chosen; ties go to the lexicographically smallest assignment (equations
    and variables in declaration order).
    """
    rest, xs = _remainder(m, mso, residual_eq)
    if len(rest) != len(xs):
        raise NoPerfectMatchingError(
            f"{len(rest)} equations for {len(xs)} unknowns after removing {residual_eq}"
        )
    if not rest:
        return {}
    cost = _cost_matrix(m, rest, xs)
    best = _min_cost(cost)
    if best >= _FORBIDDEN:
        raise NoPerfectMatchingError(f"no perfect matching after removing {residual_eq}")

    # fix assignments row by row, keeping the optimum reachable
    matching: dict[str, str] = {}
    for i, e in enumerate(rest):
        for j in np.flatnonzero(cost[i] < _FORBIDDEN):
            trial = cost.copy()
            trial[i, :] = _FORBIDDEN
            trial[:, j] = _FORBIDDEN
            trial[i, j] = cost[i, j]
            if _min_cost(trial) <= best + 0.5:
                cost = trial
                matching[e] = xs[j]
                break
    return matching


def var_node(name: str) -> str:
    return f"var:{name}"


def eq_node(name: str) -> str:
    return f"eq:{name}"


RESIDUAL_NODE = "r"


@dataclass(frozen=True)
class ComputationalGraph:
    model: StructuralModel = field(repr=False, compare=False)
    equations: tuple[str, ...]
    residual_equation: str
    matching: dict[str, str]
    edges: tuple[tuple[str, str], ...]
    integration_nodes: frozenset[str]
    differentiation_nodes: frozenset[str]
    mso_id: int | None = None

    @property
    def producer(self) -> dict[str, str]:
        """Unknown variable -> equation computing it."""
        return {v: e for e, v in self.matching.items()}

    def to_dot(self) -> str:
        name = f"mso{self.mso_id}_{self.residual_equation}" if self.mso_id is not None else self.residual_equation
        lines = [f'digraph "{name}" {{', "  rankdir=LR;"]
        nodes = sorted({n for edge in self.edges for n in edge}, key=natural_key)
        for n in nodes:
            if n.startswith("eq:"):
                e = n[3:]
                tag = " (int)" if e in self.integration_nodes else " (diff)" if e in self.differentiation_nodes else ""
                lines.append(f'  "{n}" [shape=circle,label="{e}{tag}"];')
            elif n == RESIDUAL_NODE:
                lines.append(f'  "{n}" [shape=box,label="r"];')
            else:
                lines.append(f'  "{n}" [shape=plaintext,label="{n[4:]}"];')
        for a, b in self.edges:
            lines.append(f'  "{a}" -> "{b}";')
        lines.append("}")
        return "\n".join(lines) + "\n"


def build_comp_graph(m: StructuralModel, mso, residual_eq: str) -> ComputationalGraph:
    matching = match_remainder(m, mso, residual_eq)
    eqs = tuple(m.sort_equations(_equations_of(mso)))
    edges: list[tuple[str, str]] = []
    integ, diff = set(), set()
    for e in eqs:
        if e == residual_eq:
            for v in m.equation_vars[e]:
                edges.append((var_node(v), eq_node(e)))
            edges.append((eq_node(e), RESIDUAL_NODE))
            continue
        out = matching[e]
        for v in m.equation_vars[e]:
            if v != out:
                edges.append((var_node(v), eq_node(e)))
        edges.append((eq_node(e), var_node(out)))
        link = m.link_of_equation(e)
        if link is not None:
            (integ if out == link.state else diff).add(e)

    # integrators delay their input by one step, so their in-edges are cut
    deps: dict[str, set[str]] = {}
    for a, b in edges:
        deps.setdefault(b, set())
        deps.setdefault(a, set())
        if b.startswith("eq:") and b[3:] in integ:
            continue
        deps[b].add(a)
    try:
        tuple(TopologicalSorter(deps).static_order())
    except CycleError as exc:
        raise AlgebraicLoopError(
            f"algebraic loop with residual {residual_eq}: {' -> '.join(exc.args[1])}"
        ) from None

    return ComputationalGraph(
        model=m,
        equations=eqs,
        residual_equation=residual_eq,
        matching=matching,
        edges=tuple(edges),
        integration_nodes=frozenset(integ),
        differentiation_nodes=frozenset(diff),
        mso_id=getattr(mso, "id", None),
    )


def causality_of(g: ComputationalGraph) -> Causality:
    if g.integration_nodes and g.differentiation_nodes:
        return Causality.MIXED
    if g.integration_nodes:
        return Causality.INTEGRAL
    if g.differentiation_nodes:
        return Causality.DERIVATIVE
    return Causality.ALGEBRAIC


@dataclass(frozen=True)
class Candidate:
    mso: MSOSet
    residual_eq: str
    graph: ComputationalGraph

    @property
    def name(self) -> str:
        return f"{self.mso.label}_{self.residual_eq}"


def enumerate_integral_candidates(
    msos: Iterable[MSOSet], m: StructuralModel, sensors: Iterable[str] | None = None
) -> list[Candidate]:
    """(MSO, sensor residual equation) pairs whose graph has integral causality.

    ``sensors`` optionally restricts the measured variables allowed as the
    residual output.
    """
    allowed = None if sensors is None else set(sensors)
    out = []
    for mso in msos:
        for e in sorted(mso.equations, key=natural_key):
            if e not in m.sensors:
                continue
            if allowed is not None and m.sensors[e] not in allowed:
                continue
            try:
                g = build_comp_graph(m, mso, e)
            except (AlgebraicLoopError, NoPerfectMatchingError):
                continue
            if causality_of(g) is Causality.INTEGRAL:
                out.append(Candidate(mso, e, g))
    return out


@dataclass(frozen=True)
class StateSpaceStructure:
    """Argument lists of the state-update functions and the output map."""

    states: tuple[str, ...]
    inputs: tuple[str, ...]
    output_sensor: str
    g_args: tuple[tuple[str, ...], ...]
    h_args: tuple[str, ...]
    mso_id: int | None = None
    residual_eq: str = ""

    def to_dict(self) -> dict:
        return {
            "states": list(self.states),
            "inputs": list(self.inputs),
            "output_sensor": self.output_sensor,
            "g_args": [list(a) for a in self.g_args],
            "h_args": list(self.h_args),
            "mso_id": self.mso_id,
            "residual_eq": self.residual_eq,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StateSpaceStructure":
        return cls(
            states=tuple(d["states"]),
            inputs=tuple(d["inputs"]),
            output_sensor=d["output_sensor"],
            g_args=tuple(tuple(a) for a in d["g_args"]),
            h_args=tuple(d["h_args"]),
            mso_id=d.get("mso_id"),
            residual_eq=d.get("residual_eq", ""),
        )

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "StateSpaceStructure":
        return cls.from_dict(json.loads(text))

    @property
    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def extract_state_space(g: ComputationalGraph) -> StateSpaceStructure:
    """Backtrack from every state derivative, and from the residual equation,
    until states or known signals are reached."""
    if causality_of(g) is not Causality.INTEGRAL:
        raise CausalityError(f"graph for {g.residual_equation} is {causality_of(g).value}, not integral")
    m = g.model
    if g.residual_equation not in m.sensors:
        raise CausalityError(f"residual equation {g.residual_equation} is not a sensor equation")
    y = m.sensors[g.residual_equation]
    producer = g.producer
    states = {g.matching[e] for e in g.integration_nodes}
    memo: dict[str, frozenset[str]] = {}

    def reach(var: str) -> frozenset[str]:
        if var in states or m.kind(var) == "known":
            return frozenset({var})
        if var in memo:
            return memo[var]
        e = producer[var]
        acc: set[str] = set()
        for w in m.equation_vars[e]:
            if w != var:
                acc |= reach(w)
        memo[var] = frozenset(acc)
        return memo[var]

    def args_of(eq: str, exclude: str) -> frozenset[str]:
        acc: set[str] = set()
        for w in m.equation_vars[eq]:
            if w != exclude:
                acc |= reach(w)
        return frozenset(acc)

    ordered_states = m.sort_variables(states)
    links = {l.state: l for l in m.links}
    g_sets = [args_of(producer[links[x].derivative], links[x].derivative) for x in ordered_states]
    h_set = args_of(g.residual_equation, y)
    if y in h_set or any(y in s for s in g_sets):
        raise CausalityError(f"predicted sensor {y} feeds back into its own prediction")
    used = set().union(h_set, *g_sets)
    dead = [x for x in ordered_states if x not in used]
    if dead:
        raise CausalityError(f"states {dead} do not influence the prediction")
    inputs = m.sort_variables(v for v in used if v not in states)
    return StateSpaceStructure(
        states=tuple(ordered_states),
        inputs=tuple(inputs),
        output_sensor=y,
        g_args=tuple(tuple(m.sort_variables(s)) for s in g_sets),
        h_args=tuple(m.sort_variables(h_set)),
        mso_id=g.mso_id,
        residual_eq=g.residual_equation,
    )
