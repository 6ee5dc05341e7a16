"""PSO/MSO tests and enumeration of all MSO sets of a structural model."""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable

from .dmdecomp import dm_decompose, overdetermined_part
from .structmodel import StructuralModel, SubModel, as_submodel, submodel

DEFAULT_MAX_SETS = 10_000


class MSOOverflowError(RuntimeError):
    pass


def natural_key(name: str):
    return [int(p) if p.isdigit() else p for p in re.split(r"(\d+)", name)]


@dataclass(frozen=True)
class MSOSet:
    id: int
    equations: tuple[str, ...]
    redundancy: int = 1

    def __contains__(self, eq: str) -> bool:
        return eq in self.equations

    def __len__(self) -> int:
        return len(self.equations)

    @property
    def label(self) -> str:
        return f"MSO{self.id}"


def is_pso(m: StructuralModel | SubModel) -> bool:
    dm = dm_decompose(m)
    return not dm.exact_eqs and not dm.under_eqs


def is_mso(m: StructuralModel | SubModel) -> bool:
    sm = as_submodel(m)
    dm = dm_decompose(sm)
    if dm.exact_eqs or dm.under_eqs or dm.redundancy != 1:
        return False
    return all(not overdetermined_part(sm.without(e)).equations for e in sm.equations)


def _canonical(eqs: Iterable[str]) -> tuple[str, ...]:
    return tuple(sorted(eqs, key=natural_key))


def find_msos(m: StructuralModel, max_sets: int = DEFAULT_MAX_SETS) -> list[MSOSet]:
    """All MSO sets of ``m`` by top-down equation removal.

    Every PSO set reached is visited once; a PSO set with redundancy one is
    an MSO set, larger ones recurse on each single-equation removal.
    """
    found: set[tuple[str, ...]] = set()
    visited: set[frozenset[str]] = set()
    stack = [frozenset(overdetermined_part(m).equations)]
    while stack:
        eqs = stack.pop()
        if not eqs or eqs in visited:
            continue
        visited.add(eqs)
        dm = dm_decompose(submodel(m, eqs))
        phi = dm.redundancy
        if phi == 1:
            found.add(_canonical(eqs))
            if len(found) > max_sets:
                raise MSOOverflowError(f"more than {max_sets} MSO sets; raise max_sets to continue")
            continue
        for e in sorted(eqs, key=natural_key, reverse=True):
            rest = overdetermined_part(submodel(m, eqs - {e})).equations
            child = frozenset(rest)
            if child and child not in visited:
                stack.append(child)
    ordered = sorted(found, key=lambda s: [natural_key(e) for e in s])
    return [MSOSet(i + 1, eqs) for i, eqs in enumerate(ordered)]


def support_matrix_csv(msos: list[MSOSet], m: StructuralModel) -> str:
    """MSO-by-equation membership table."""
    lines = [",".join(["mso", *m.equations])]
    for s in msos:
        members = set(s.equations)
        lines.append(",".join([s.label, *("1" if e in members else "0" for e in m.equations)]))
    return "\n".join(lines) + "\n"
