"""Candidate-plan enumeration for combined graph/relational queries.

Every movable table component is a binary choice: ship it into the graph
engine or leave it in place. The full space is therefore 2^n plans for n
movable components, enumerated exhaustively in binary-counter order so that
plan indices are stable across runs (index 0 is always the raw plan that
moves nothing).

Vertex-to-relational movements are deliberately absent from the space: any
plan that exports a vertex set, joins it relationally and ships the result
back is dominated by the plan that ships the table instead, because the
matching rows come back over the same channel plus one extra transfer.
:func:`pruned_variant` still builds such a plan on demand so the claim can
be measured rather than assumed.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

from .algebra import to_sexpr
from .datamodel import Catalog, Relation
from .frontend import CandidatePlan, Query, translate

MAX_MOVABLE = 12


class ExplorerError(Exception):
    """Raised for plan spaces too large to enumerate or bad pruned-variant requests."""


@dataclass(frozen=True)
class PlanSpace:
    """All 2^n movement choices for one query, in a fixed enumeration order."""

    query: Query
    joinable: tuple[str, ...]  # movable component names, sorted
    candidates: tuple[CandidatePlan, ...]

    def movement_at(self, index: int) -> frozenset[str]:
        if not 0 <= index < len(self.candidates):
            raise ExplorerError(f"candidate index {index} out of range")
        return frozenset(self.candidates[index].movement)

    def index_of(self, movement) -> int:
        wanted = frozenset(movement)
        index = 0
        for bit, name in enumerate(self.joinable):
            if name in wanted:
                index |= 1 << bit
        if wanted - set(self.joinable):
            raise ExplorerError(f"unknown movable components {sorted(wanted - set(self.joinable))}")
        return index


def movement_subsets(names: tuple[str, ...]) -> Iterator[frozenset[str]]:
    """Subsets of ``names`` in binary-counter order; bit i selects names[i]."""
    for index in range(1 << len(names)):
        yield frozenset(n for i, n in enumerate(names) if index >> i & 1)


def enumerate_candidates(q: Query, catalog: Catalog, tables: dict[str, Relation],
                         max_movable: int = MAX_MOVABLE) -> PlanSpace:
    """Translate one candidate plan per movable-component subset.

    ``max_movable`` bounds n; beyond it exhaustive enumeration stops being the
    right tool and we fail loudly instead of enumerating 2^n plans.
    """
    joinable = q.movable
    if len(joinable) > max_movable:
        raise ExplorerError(
            f"{len(joinable)} movable components exceed the enumeration cap "
            f"of {max_movable}"
        )
    table_columns = {name: rel.columns for name, rel in tables.items()}
    candidates = tuple(
        translate(q, movement, catalog, table_columns)
        for movement in movement_subsets(joinable)
    )
    return PlanSpace(query=q, joinable=joinable, candidates=candidates)


def pruned_variant(q: Query, label: str, catalog: Catalog,
                   tables: dict[str, Relation]) -> CandidatePlan:
    """Build the vertex-export plan for ``label`` that enumeration leaves out.

    The variant ships the vertices carrying ``label`` to the relational
    engine, entity-joins them with the table that joins that label, and ships
    the surviving rows back into the graph — the same end result as moving
    the table, paid for with one extra transfer.
    """
    matching = []
    for name in q.movable:
        comp = q.components[name]
        for cond in comp.cross:
            if cond.op != "=":
                continue
            var, prop = q.return_aliases[cond.graph_column]
            if (q.var_label(var) == label
                    and catalog.is_joinable(label, prop, q.alias_tables[cond.alias],
                                            cond.column)):
                matching.append(name)
                break
    if not matching:
        raise ExplorerError(f"no movable table joins vertices labeled {label!r}")
    component = sorted(matching)[0]
    table_columns = {name: rel.columns for name, rel in tables.items()}
    plan = translate(q, frozenset({component}), catalog, table_columns)
    return dataclasses.replace(plan, pruned_vertex_movement=label)


def plan_space_text(space: PlanSpace) -> str:
    """One inspectable text block per candidate."""
    lines = [
        f"plan space: {len(space.candidates)} candidates "
        f"over movable components [{', '.join(space.joinable)}]"
    ]
    for i, plan in enumerate(space.candidates):
        moved = ", ".join(plan.movement)
        lines.append(f"--- candidate {i}: move {{{moved}}} ---")
        for pre in plan.prequeries:
            lines.append(f"pre-query {pre.name} ({', '.join(pre.columns)}):")
            lines.append(f"  {to_sexpr(pre.expr)}")
        lines.append(f"graph ({', '.join(plan.graph_columns)}):")
        lines.append(f"  {to_sexpr(plan.graph_expr)}")
        lines.append(f"final ({', '.join(plan.output_columns)}):")
        lines.append(f"  {to_sexpr(plan.final_expr)}")
    return "\n".join(lines)
