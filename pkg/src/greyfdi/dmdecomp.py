"""Maximum matching, coarse Dulmage-Mendelsohn decomposition and the
structural detectability/isolability analyses built on it."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .structmodel import StructuralModel, SubModel, as_submodel


@dataclass(frozen=True)
class Matching:
    pairs: frozenset[tuple[str, str]]

    def __len__(self) -> int:
        return len(self.pairs)

    def as_dict(self) -> dict[str, str]:
        return dict(self.pairs)


@dataclass(frozen=True)
class DMPartition:
    under_eqs: tuple[str, ...]
    under_vars: tuple[str, ...]
    exact_eqs: tuple[str, ...]
    exact_vars: tuple[str, ...]
    over_eqs: tuple[str, ...]
    over_vars: tuple[str, ...]
    matching: Matching

    @property
    def redundancy(self) -> int:
        return len(self.over_eqs) - len(self.over_vars)


def _adjacency(sm: SubModel):
    eqs = list(sm.equations)
    xs = sm.unknowns
    xi = {x: j for j, x in enumerate(xs)}
    adj = [[xi[v] for v in sm.unknowns_of(e)] for e in eqs]
    return eqs, xs, adj


def _max_matching(n_vars: int, adj: Sequence[Sequence[int]]):
    """Augmenting-path matching; returns (eq -> var, var -> eq) index arrays."""
    match_e = [-1] * len(adj)
    match_v = [-1] * n_vars

    for root in range(len(adj)):
        # iterative DFS over alternating paths starting at a free equation
        parent_v: dict[int, int] = {}
        visited_v: set[int] = set()
        stack = [(root, iter(adj[root]))]
        found = -1
        while stack and found < 0:
            e, it = stack[-1]
            for v in it:
                if v in visited_v:
                    continue
                visited_v.add(v)
                parent_v[v] = e
                if match_v[v] < 0:
                    found = v
                    break
                nxt = match_v[v]
                stack.append((nxt, iter(adj[nxt])))
                break
            else:
                stack.pop()
        if found < 0:
            continue
        v = found
        while True:
            e = parent_v[v]
            prev = match_e[e]
            match_e[e] = v
            match_v[v] = e
            if e == root:
                break
            v = prev
    return match_e, match_v


def maximum_matching(m: StructuralModel | SubModel) -> Matching:
    sm = as_submodel(m)
    eqs, xs, adj = _adjacency(sm)
    match_e, _ = _max_matching(len(xs), adj)
    return Matching(frozenset((eqs[i], xs[j]) for i, j in enumerate(match_e) if j >= 0))


def dm_decompose(m: StructuralModel | SubModel) -> DMPartition:
    """Coarse DM decomposition via alternating-path reachability from free vertices."""
    sm = as_submodel(m)
    eqs, xs, adj = _adjacency(sm)
    match_e, match_v = _max_matching(len(xs), adj)

    # free equations -> over-determined part
    over_e = {i for i, j in enumerate(match_e) if j < 0}
    over_v: set[int] = set()
    queue = deque(over_e)
    while queue:
        e = queue.popleft()
        for v in adj[e]:
            if v not in over_v:
                over_v.add(v)
                w = match_v[v]
                if w not in over_e:
                    over_e.add(w)
                    queue.append(w)

    # free variables -> under-determined part
    var_adj: list[list[int]] = [[] for _ in xs]
    for e, vs in enumerate(adj):
        for v in vs:
            var_adj[v].append(e)
    under_v = {j for j, e in enumerate(match_v) if e < 0}
    under_e: set[int] = set()
    queue = deque(under_v)
    while queue:
        v = queue.popleft()
        for e in var_adj[v]:
            if e not in under_e:
                under_e.add(e)
                w = match_e[e]
                if w not in under_v:
                    under_v.add(w)
                    queue.append(w)

    exact_e = set(range(len(eqs))) - over_e - under_e
    exact_v = set(range(len(xs))) - over_v - under_v
    pick_e = lambda s: tuple(eqs[i] for i in sorted(s))
    pick_v = lambda s: tuple(xs[j] for j in sorted(s))
    return DMPartition(
        under_eqs=pick_e(under_e),
        under_vars=pick_v(under_v),
        exact_eqs=pick_e(exact_e),
        exact_vars=pick_v(exact_v),
        over_eqs=pick_e(over_e),
        over_vars=pick_v(over_v),
        matching=Matching(frozenset((eqs[i], xs[j]) for i, j in enumerate(match_e) if j >= 0)),
    )


def redundancy(m: StructuralModel | SubModel) -> int:
    return dm_decompose(m).redundancy


def overdetermined_part(m: StructuralModel | SubModel) -> SubModel:
    sm = as_submodel(m)
    return SubModel(sm.parent, dm_decompose(sm).over_eqs)


def detectable_faults(m: StructuralModel) -> list[str]:
    over = set(dm_decompose(m).over_eqs)
    return [f for f, e in m.faults.items() if e in over]


def isolability_matrix(m: StructuralModel) -> tuple[list[str], np.ndarray]:
    """Entry (i, j) is True when fault i stays in the over-determined part once
    the equation of fault j is removed; the diagonal holds detectability."""
    faults = m.fault_names
    detectable = set(detectable_faults(m))
    mat = np.zeros((len(faults), len(faults)), dtype=bool)
    for j, fj in enumerate(faults):
        over = set(overdetermined_part(m.without(m.faults[fj])).equations)
        for i, fi in enumerate(faults):
            if i == j:
                mat[i, j] = fi in detectable
            else:
                mat[i, j] = m.faults[fi] in over
    return faults, mat


@dataclass(frozen=True)
class FaultSignatureMatrix:
    rows: tuple[str, ...]
    cols: tuple[str, ...]
    matrix: np.ndarray

    def column(self, fault: str) -> np.ndarray:
        return self.matrix[:, self.cols.index(fault)]

    def to_csv(self) -> str:
        lines = [",".join(["residual", *self.cols])]
        for name, row in zip(self.rows, self.matrix):
            lines.append(",".join([name, *("1" if x else "0" for x in row)]))
        return "\n".join(lines) + "\n"


def fault_signature(candidates, m: StructuralModel, row_names: Sequence[str] | None = None) -> FaultSignatureMatrix:
    """Residual-by-fault sensitivity from equation-set membership.

    ``candidates`` holds anything with an ``equations`` attribute (SubModel,
    MSO sets) or plain equation collections.
    """
    sets = [set(getattr(c, "equations", c)) for c in candidates]
    for s in sets:
        missing = s - set(m.equations)
        if missing:
            raise ValueError(f"candidate references equations outside the model: {sorted(missing)}")
    faults = tuple(m.fault_names)
    mat = np.array([[m.faults[f] in s for f in faults] for s in sets], dtype=bool).reshape(len(sets), len(faults))
    if row_names is None:
        row_names = [f"r{i + 1}" for i in range(len(sets))]
    return FaultSignatureMatrix(tuple(row_names), faults, mat)


def dm_permuted_csv(m: StructuralModel | SubModel) -> str:
    """Incidence over the unknowns with rows and columns in DM block order
    (under-, exactly, over-determined). Matched cells are written as 2."""
    sm = as_submodel(m)
    dm = dm_decompose(sm)
    rows = [*dm.under_eqs, *dm.exact_eqs, *dm.over_eqs]
    cols = [*dm.under_vars, *dm.exact_vars, *dm.over_vars]
    block = {**{e: "under" for e in dm.under_eqs}, **{e: "exact" for e in dm.exact_eqs},
             **{e: "over" for e in dm.over_eqs}}
    matched = dm.matching.pairs
    lines = [",".join(["equation", "block", *cols])]
    for e in rows:
        vs = set(sm.unknowns_of(e))
        cells = ["2" if (e, x) in matched else "1" if x in vs else "0" for x in cols]
        lines.append(",".join([e, block[e], *cells]))
    return "\n".join(lines) + "\n"


def partition_text(dm: DMPartition) -> str:
    def fmt(names):
        return " ".join(names) if names else "-"

    return "\n".join([
        f"under-determined equations: {fmt(dm.under_eqs)}",
        f"under-determined variables: {fmt(dm.under_vars)}",
        f"exactly determined equations: {fmt(dm.exact_eqs)}",
        f"exactly determined variables: {fmt(dm.exact_vars)}",
        f"over-determined equations: {fmt(dm.over_eqs)}",
        f"over-determined variables: {fmt(dm.over_vars)}",
        f"structural redundancy: {dm.redundancy}",
    ]) + "\n"


def read_signature_csv(text: str) -> FaultSignatureMatrix:
    """Inverse of :meth:`FaultSignatureMatrix.to_csv`."""
    lines = [l for l in text.splitlines() if l.strip()]
    if not lines:
        raise ValueError("empty signature table")
    header = lines[0].split(",")
    if header[0] != "residual":
        raise ValueError("signature table must start with a 'residual' column")
    rows, cells = [], []
    for l in lines[1:]:
        parts = l.split(",")
        if len(parts) != len(header):
            raise ValueError(f"row {parts[0]!r} has {len(parts)} fields, header has {len(header)}")
        rows.append(parts[0])
        cells.append([p.strip() == "1" for p in parts[1:]])
    mat = np.array(cells, dtype=bool).reshape(len(rows), len(header) - 1)
    return FaultSignatureMatrix(tuple(rows), tuple(header[1:]), mat)
