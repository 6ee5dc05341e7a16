"""Structural models: bipartite equation/variable graphs with differential
constraints, known signals and fault annotations.

A model file is line oriented::

    @variables
    x1 state
    dx1 derivative
    u known
    @equations
    e1 : dx1 u
    e4 : dx1 x1
    @links
    x1 dx1 via e4
    @faults
    f1 in e1
    @sensors
    e3 measures y

Fault variables never appear on equation lines; the ``@faults`` section
attaches each of them to the equation where it enters.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

VARIABLE_KINDS = ("unknown", "state", "derivative", "known", "fault")
UNKNOWN_KINDS = frozenset({"unknown", "state", "derivative"})

_SECTIONS = ("variables", "equations", "links", "faults", "sensors")
_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\[\]']*$")


class ModelError(ValueError):
    """Invalid structural model or malformed model file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Variable:
    name: str
    kind: str


@dataclass(frozen=True)
class DifferentialLink:
    state: str
    derivative: str
    equation: str


@dataclass(frozen=True, eq=False)
class StructuralModel:
    """Immutable structural model.

    ``equation_vars`` maps each equation to the variables it contains, in
    variable declaration order. Fault variables are kept out of it and are
    only reachable through ``faults``.
    """

    equations: tuple[str, ...]
    variables: tuple[Variable, ...]
    equation_vars: Mapping[str, tuple[str, ...]]
    links: tuple[DifferentialLink, ...] = ()
    faults: Mapping[str, str] = field(default_factory=dict)
    sensors: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        order = {v.name: i for i, v in enumerate(self.variables)}
        canon = {
            e: tuple(sorted(set(self.equation_vars.get(e, ())), key=lambda n: order.get(n, -1)))
            for e in self.equations
        }
        object.__setattr__(self, "equation_vars", canon)
        object.__setattr__(self, "faults", dict(self.faults))
        object.__setattr__(self, "sensors", dict(self.sensors))
        object.__setattr__(self, "_kinds", {v.name: v.kind for v in self.variables})
        object.__setattr__(self, "_order", order)
        object.__setattr__(self, "_eq_order", {e: i for i, e in enumerate(self.equations)})
        _validate(self)

    def __eq__(self, other):
        if not isinstance(other, StructuralModel):
            return NotImplemented
        return (
            self.equations == other.equations
            and self.variables == other.variables
            and self.equation_vars == other.equation_vars
            and set(self.links) == set(other.links)
            and self.faults == other.faults
            and self.sensors == other.sensors
        )

    __hash__ = None

    def kind(self, name: str) -> str:
        return self._kinds[name]

    def var_index(self, name: str) -> int:
        return self._order[name]

    def eq_index(self, name: str) -> int:
        return self._eq_order[name]

    def names(self, *kinds: str) -> list[str]:
        return [v.name for v in self.variables if v.kind in kinds]

    @property
    def unknowns(self) -> list[str]:
        return [v.name for v in self.variables if v.kind in UNKNOWN_KINDS]

    @property
    def known(self) -> list[str]:
        return self.names("known")

    @property
    def fault_names(self) -> list[str]:
        return list(self.faults)

    @property
    def incidence(self) -> frozenset[tuple[str, str]]:
        return frozenset((e, v) for e in self.equations for v in self.equation_vars[e])

    def unknowns_of(self, eq: str) -> tuple[str, ...]:
        return tuple(v for v in self.equation_vars[eq] if self._kinds[v] in UNKNOWN_KINDS)

    def link_of_equation(self, eq: str) -> DifferentialLink | None:
        for link in self.links:
            if link.equation == eq:
                return link
        return None

    def sort_equations(self, eqs: Iterable[str]) -> list[str]:
        return sorted(eqs, key=self._eq_order.__getitem__)

    def sort_variables(self, names: Iterable[str]) -> list[str]:
        return sorted(names, key=self._order.__getitem__)

    def without(self, *eqs: str) -> "SubModel":
        drop = set(eqs)
        return submodel(self, [e for e in self.equations if e not in drop])


def _validate(m: StructuralModel) -> None:
    seen: set[str] = set()
    for v in m.variables:
        if not v.name:
            raise ModelError("empty variable name")
        if v.kind not in VARIABLE_KINDS:
            raise ModelError(f"unknown variable kind {v.kind!r} for {v.name}")
        if v.name in seen:
            raise ModelError(f"duplicate variable {v.name}")
        seen.add(v.name)
    if len(set(m.equations)) != len(m.equations):
        raise ModelError("duplicate equation id")
    for e, vs in m.equation_vars.items():
        for v in vs:
            if v not in m._kinds:
                raise ModelError(f"equation {e} references undeclared variable {v}")
            if m._kinds[v] == "fault":
                raise ModelError(f"fault variable {v} on equation {e}; attach it under @faults")

    linked_states: dict[str, DifferentialLink] = {}
    linked_derivs: dict[str, DifferentialLink] = {}
    for link in m.links:
        if link.state not in m._kinds or link.derivative not in m._kinds:
            raise ModelError(f"link {link.state} {link.derivative} references undeclared variable")
        if m._kinds[link.state] != "state":
            raise ModelError(f"{link.state} is linked as a state but declared {m._kinds[link.state]}")
        if m._kinds[link.derivative] != "derivative":
            raise ModelError(f"{link.derivative} is linked as a derivative but declared {m._kinds[link.derivative]}")
        if link.equation not in m._eq_order:
            raise ModelError(f"link via undeclared equation {link.equation}")
        if set(m.equation_vars[link.equation]) != {link.state, link.derivative}:
            raise ModelError(
                f"link equation {link.equation} must contain exactly {link.state} and {link.derivative}"
            )
        if link.state in linked_states or link.derivative in linked_derivs:
            raise ModelError(f"state {link.state} or derivative {link.derivative} linked twice")
        if link.equation in {l.equation for l in linked_states.values()}:
            raise ModelError(f"equation {link.equation} defines two links")
        linked_states[link.state] = link
        linked_derivs[link.derivative] = link
    for v in m.variables:
        if v.kind == "derivative" and v.name not in linked_derivs:
            raise ModelError(f"unlinked derivative {v.name}")
        if v.kind == "state" and v.name not in linked_states:
            raise ModelError(f"state without derivative link: {v.name}")

    for f, e in m.faults.items():
        if m._kinds.get(f) != "fault":
            raise ModelError(f"fault {f} is not declared as a fault variable")
        if e not in m._eq_order:
            raise ModelError(f"fault {f} in undeclared equation {e}")
    for v in m.variables:
        if v.kind == "fault" and v.name not in m.faults:
            raise ModelError(f"fault variable {v.name} has no location")

    for e, y in m.sensors.items():
        if e not in m._eq_order:
            raise ModelError(f"sensor line references undeclared equation {e}")
        if m._kinds.get(y) != "known":
            raise ModelError(f"sensor {e} measures {y}, which is not a known variable")
        if y not in m.equation_vars[e]:
            raise ModelError(f"sensor equation {e} does not contain {y}")
    measured = list(m.sensors.values())
    if len(set(measured)) != len(measured):
        raise ModelError("a known variable is measured by more than one sensor equation")


def _strip(line: str) -> str:
    return line.split("#", 1)[0].strip()


def parse_model(text: str) -> StructuralModel:
    """Parse model-file text into a validated :class:`StructuralModel`."""
    variables: list[Variable] = []
    equations: list[str] = []
    eq_vars: dict[str, tuple[str, ...]] = {}
    links: list[DifferentialLink] = []
    faults: dict[str, str] = {}
    sensors: dict[str, str] = {}
    var_names: set[str] = set()
    section = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip(raw)
        if not line:
            continue
        if line.startswith("@"):
            section = line[1:].strip().lower()
            if section not in _SECTIONS:
                raise ModelError(f"unknown section header {line!r}", lineno)
            continue
        if section is None:
            raise ModelError("content before the first section header", lineno)
        tokens = line.split()
        for t in tokens:
            if t not in (":",) and not _NAME.match(t):
                raise ModelError(f"invalid symbol {t!r}", lineno)

        if section == "variables":
            if len(tokens) != 2:
                raise ModelError("expected 'name kind'", lineno)
            name, kind = tokens
            if kind not in VARIABLE_KINDS:
                raise ModelError(f"unknown variable kind {kind!r}", lineno)
            if name in var_names:
                raise ModelError(f"duplicate variable {name}", lineno)
            var_names.add(name)
            variables.append(Variable(name, kind))
        elif section == "equations":
            if len(tokens) < 2 or tokens[1] != ":":
                raise ModelError("expected 'eqname : var1 var2 ...'", lineno)
            name, vs = tokens[0], tokens[2:]
            if name in eq_vars:
                raise ModelError(f"duplicate equation {name}", lineno)
            for v in vs:
                if v not in var_names:
                    raise ModelError(f"dangling reference to variable {v}", lineno)
            if len(set(vs)) != len(vs):
                raise ModelError(f"variable repeated in equation {name}", lineno)
            equations.append(name)
            eq_vars[name] = tuple(vs)
        elif section == "links":
            if len(tokens) != 4 or tokens[2] != "via":
                raise ModelError("expected 'state derivative via eqname'", lineno)
            links.append(DifferentialLink(tokens[0], tokens[1], tokens[3]))
        elif section == "faults":
            if len(tokens) != 3 or tokens[1] != "in":
                raise ModelError("expected 'faultname in eqname'", lineno)
            if tokens[0] in faults:
                raise ModelError(f"fault {tokens[0]} located twice", lineno)
            faults[tokens[0]] = tokens[2]
        elif section == "sensors":
            if len(tokens) != 3 or tokens[1] != "measures":
                raise ModelError("expected 'eqname measures knownvar'", lineno)
            if tokens[0] in sensors:
                raise ModelError(f"duplicate sensor line for {tokens[0]}", lineno)
            sensors[tokens[0]] = tokens[2]

    return StructuralModel(
        equations=tuple(equations),
        variables=tuple(variables),
        equation_vars=eq_vars,
        links=tuple(links),
        faults=faults,
        sensors=sensors,
    )


def serialize_model(m: StructuralModel) -> str:
    """Canonical model-file text; ``parse_model`` inverts it."""
    out = ["@variables"]
    out += [f"{v.name} {v.kind}" for v in m.variables]
    out.append("@equations")
    out += [" ".join([e, ":", *m.equation_vars[e]]) for e in m.equations]
    out.append("@links")
    links = sorted(m.links, key=lambda l: m.var_index(l.state))
    out += [f"{l.state} {l.derivative} via {l.equation}" for l in links]
    out.append("@faults")
    out += [f"{f} in {e}" for f, e in m.faults.items()]
    out.append("@sensors")
    out += [f"{e} measures {m.sensors[e]}" for e in m.equations if e in m.sensors]
    return "\n".join(out) + "\n"


def load_model(path) -> StructuralModel:
    with open(path, encoding="utf-8") as fh:
        return parse_model(fh.read())


@dataclass(frozen=True)
class IncidenceMatrix:
    matrix: np.ndarray
    rows: tuple[str, ...]
    columns: tuple[str, ...]
    column_kinds: tuple[str, ...]


def incidence_matrix(m: StructuralModel, include_faults: bool = True) -> IncidenceMatrix:
    """Boolean equations x variables matrix, columns grouped unknown, fault, known."""
    cols = m.unknowns + (m.fault_names if include_faults else []) + m.known
    kinds = tuple(m.kind(c) for c in cols)
    col_idx = {c: j for j, c in enumerate(cols)}
    mat = np.zeros((len(m.equations), len(cols)), dtype=bool)
    for i, e in enumerate(m.equations):
        for v in m.equation_vars[e]:
            mat[i, col_idx[v]] = True
    if include_faults:
        for f, e in m.faults.items():
            mat[m.eq_index(e), col_idx[f]] = True
    return IncidenceMatrix(mat, tuple(m.equations), tuple(cols), kinds)


@dataclass(frozen=True)
class SubModel:
    """A subset of a parent model's equations; derived sets are recomputed on access."""

    parent: StructuralModel
    equations: tuple[str, ...]

    @property
    def unknowns(self) -> list[str]:
        present = {v for e in self.equations for v in self.parent.unknowns_of(e)}
        return self.parent.sort_variables(present)

    @property
    def incidence(self) -> frozenset[tuple[str, str]]:
        return frozenset(
            (e, v) for e in self.equations for v in self.parent.equation_vars[e]
        )

    @property
    def links(self) -> tuple[DifferentialLink, ...]:
        eqs = set(self.equations)
        return tuple(l for l in self.parent.links if l.equation in eqs)

    def unknowns_of(self, eq: str) -> tuple[str, ...]:
        return self.parent.unknowns_of(eq)

    def without(self, *eqs: str) -> "SubModel":
        drop = set(eqs)
        return SubModel(self.parent, tuple(e for e in self.equations if e not in drop))

    def __len__(self) -> int:
        return len(self.equations)


def submodel(m: StructuralModel, eqs: Iterable[str]) -> SubModel:
    eqs = list(eqs)
    unknown = [e for e in eqs if e not in m._eq_order]
    if unknown:
        raise ModelError(f"unknown equation id(s): {', '.join(unknown)}")
    return SubModel(m, tuple(m.sort_equations(set(eqs))))


def as_submodel(m: StructuralModel | SubModel) -> SubModel:
    if isinstance(m, SubModel):
        return m
    return SubModel(m, tuple(m.equations))
