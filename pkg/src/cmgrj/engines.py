"""Embedded physical executors and the data-movement cost model.

Two engines run the two halves of a candidate plan:

* the graph engine executes chain plans (label scan, expansions, filters,
  hash joins against shipped rows) over the property graph;
* the relational engine executes left-deep scan/join/project plans over the
  base tables and the transferred graph result.

Network movement is simulated by a closed-form cost: one round trip per
batch plus per-row overhead plus serialized bytes over bandwidth. In
``measured`` mode compute time is wall clock and transfer terms are added
from the formula (there are no real sockets); in ``synthetic`` mode compute
time is a deterministic sum of per-operator unit costs times processed rows,
making experiments machine-independent.

Engine results are checked against :func:`cmgrj.algebra.evaluate` in tests;
the executors here share only scalar helpers with the reference evaluator.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

from . import algebra as A
from .algebra import Card, Col, Comparison, Lit, Prop, compare_values, join_key, list_cardinality
from .datamodel import Catalog, GraphRelation, PropertyGraph, Relation, render_value
from .frontend import GRAPH_RESULT, CandidatePlan, Query

VAR_EXPAND_ESTIMATE_FACTOR = 3.0  # extra fan-out assumed for unbounded hops


class EngineError(Exception):
    pass


class ProbeTimeout(Exception):
    """Raised when execution exceeds a cooperative deadline."""


# ---------------------------------------------------------------------------
# Cost model
# ---------------------------------------------------------------------------

def mbps(megabits_per_second: float) -> float:
    """Convert a link rate in Mbit/s to bytes/second."""
    return megabits_per_second * 1e6 / 8.0


DEFAULT_UNIT_COSTS = {
    "NodeByLabelScan": 5e-7,
    "ExpandAll": 2e-6,
    "VarLengthExpand": 4e-6,
    "Filter": 2e-7,
    "NodeHashJoin": 1.5e-6,
    "NodeFromRelation": 1e-6,
    "Produce": 2e-7,
    "TableScan": 5e-7,
    "GraphResultScan": 5e-7,
    "HashJoin": 1.5e-6,
    "Project": 2e-7,
}


@dataclass
class CostModelConfig:
    """Execution mode plus network and per-operator cost parameters."""

    mode: str = "synthetic"  # or "measured"
    bandwidth: float = mbps(50)  # bytes/second
    rtt: float = 0.05  # seconds per transfer batch
    per_row_overhead: float = 1e-6  # seconds per shipped row
    unit_costs: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_UNIT_COSTS))
    probe_timeout: float = 60.0  # seconds before a probe is abandoned
    transfer_cap_rows: int = 1_000_000  # result rows beyond this trip the cap

    def __post_init__(self):
        if self.mode not in ("synthetic", "measured"):
            raise EngineError(f"unknown cost mode {self.mode!r}")
        if self.bandwidth <= 0:
            raise EngineError("bandwidth must be positive")
        for name, value in [("rtt", self.rtt), ("per_row_overhead", self.per_row_overhead),
                            ("probe_timeout", self.probe_timeout)]:
            if value < 0:
                raise EngineError(f"{name} must be nonnegative")
        if any(v < 0 for v in self.unit_costs.values()):
            raise EngineError("unit costs must be nonnegative")


def transfer_cost(rows: int, bytes_per_row: float, cfg: CostModelConfig) -> float:
    """Seconds to ship ``rows`` of ``bytes_per_row`` each in one batch."""
    if rows < 0 or bytes_per_row < 0:
        raise EngineError("transfer_cost needs nonnegative inputs")
    return cfg.rtt + rows * cfg.per_row_overhead + rows * bytes_per_row / cfg.bandwidth


def transfer_cost_total(rows: int, total_bytes: int, cfg: CostModelConfig) -> float:
    """Same model with the byte total given directly (heterogeneous rows)."""
    if rows < 0 or total_bytes < 0:
        raise EngineError("transfer_cost needs nonnegative inputs")
    return cfg.rtt + rows * cfg.per_row_overhead + total_bytes / cfg.bandwidth


def row_bytes(row: tuple) -> int:
    """Serialized size of one row: UTF-8 text widths plus 8 bytes per cell."""
    return sum(len(render_value(v).encode("utf-8")) + 8 for v in row)


def rows_bytes(rows) -> int:
    return sum(row_bytes(r) for r in rows)


# ---------------------------------------------------------------------------
# Physical plan nodes
# ---------------------------------------------------------------------------

# graph-side slot descriptors: ("v", var) holds a vertex reference,
# ("c", temp_var, column) holds a shipped value
Slot = tuple


@dataclass
class GraphPlanNode:
    op: str  # NodeByLabelScan | ExpandAll | VarLengthExpand | Filter | NodeHashJoin | NodeFromRelation | Produce
    children: tuple["GraphPlanNode", ...] = ()
    var: str | None = None
    label: str | None = None
    source_var: str | None = None
    edge_type: str | None = None
    direction: str | None = None
    max_hops: int | None = None
    filter: tuple[Comparison, ...] = ()
    pairs: tuple[tuple[str, str, str], ...] = ()  # (pattern var, vertex prop, shipped column)
    temp_var: str | None = None
    temp_label: str | None = None
    source: str | None = None  # moved-payload key for NodeFromRelation
    produce: tuple[tuple[object, str], ...] = ()
    est: float | None = None  # None = unknown cardinality
    slots: tuple[Slot, ...] = ()


@dataclass
class RelPlanNode:
    op: str  # TableScan | GraphResultScan | HashJoin | Project
    children: tuple["RelPlanNode", ...] = ()
    table: str | None = None
    columns: tuple[str, ...] = ()  # output column names
    filter: tuple[Comparison, ...] = ()
    pairs: tuple[tuple[str, str], ...] = ()  # (left column, right column)
    projection: tuple[tuple[object, str], ...] = ()
    est: float | None = None


def plan_text(node, indent: int = 0) -> str:
    """Indented one-line-per-operator rendering of either plan kind."""
    pad = "  " * indent
    est = "?" if node.est is None else f"{node.est:.6g}"
    if isinstance(node, GraphPlanNode):
        if node.op == "NodeByLabelScan":
            head = f"NodeByLabelScan ({node.var}:{node.label})"
        elif node.op in ("ExpandAll", "VarLengthExpand"):
            arrow = "->" if node.direction == "out" else "<-"
            hops = ""
            if node.op == "VarLengthExpand":
                hops = f"*1..{node.max_hops if node.max_hops else ''}"
            head = (f"{node.op} ({node.source_var}){arrow}[:{node.edge_type}{hops}]"
                    f"({node.var}:{node.label or '?'})")
        elif node.op == "Filter":
            head = "Filter"
        elif node.op == "NodeHashJoin":
            conds = ", ".join(f"{v}.{p} = {c}" for v, p, c in node.pairs)
            head = f"NodeHashJoin [{conds}]"
        elif node.op == "NodeFromRelation":
            head = f"NodeFromRelation [{node.temp_label} <- {node.source}]"
        elif node.op == "Produce":
            head = "Produce [" + ", ".join(n for _, n in node.produce) + "]"
        else:
            head = node.op
    else:
        if node.op == "TableScan":
            head = f"TableScan {node.table}"
        elif node.op == "GraphResultScan":
            head = "GraphResultScan"
        elif node.op == "HashJoin":
            conds = ", ".join(f"{l} = {r}" for l, r in node.pairs)
            head = f"HashJoin [{conds}]"
        elif node.op == "Project":
            head = "Project [" + ", ".join(n for _, n in node.projection) + "]"
        else:
            head = node.op
    if node.filter:
        head += f" where<{len(node.filter)}>"
    lines = [f"{pad}{head} est={est}"]
    for child in node.children:
        lines.append(plan_text(child, indent + 1))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Graph planning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _ChainStep:
    var: str
    label: str | None
    source_var: str | None = None
    edge_type: str | None = None
    direction: str | None = None
    var_length: bool = False
    max_hops: int | None = None


@dataclass(frozen=True)
class MovementJoin:
    """One shipped payload joining the pattern graph-natively."""

    temp_var: str
    temp_label: str
    source: str  # payload key (pre-query name)
    columns: tuple[str, ...]
    pairs: tuple[tuple[str, str, str], ...]  # (pattern var, vertex prop, shipped column)
    est_rows: float | None = None  # source table rowcount when known


def _decompose_graph_expr(expr: A.AlgebraExpr):
    """Split a graph-side expression into chain steps, filters, movements, output."""
    produce = None
    if expr.kind == A.G_PROJECT:
        produce = expr.projection
        expr = expr.children[0]
    else:
        raise EngineError("graph plan needs an output projection at the top")
    movements: list[MovementJoin] = []
    filters: list[Comparison] = []
    while True:
        if expr.kind == A.RG_JOIN:
            rel = expr.children[0]
            if rel.kind != A.BASE_RELATION:
                raise EngineError("shipped side of an in-graph join must be a named payload")
            movements.append(MovementJoin(
                temp_var=expr.var, temp_label=expr.temp_label, source=rel.table,
                columns=tuple(rel.columns), pairs=tuple(expr.pairs)))
            expr = expr.children[1]
        elif expr.kind == A.G_SELECT:
            filters.extend(expr.predicate)
            expr = expr.children[0]
        else:
            break
    steps: list[_ChainStep] = []
    while expr.kind in (A.EXPAND, A.VAR_EXPAND):
        steps.append(_ChainStep(
            var=expr.var, label=expr.label, source_var=expr.source_var,
            edge_type=expr.edge_type, direction=expr.direction,
            var_length=expr.kind == A.VAR_EXPAND, max_hops=expr.max_hops))
        expr = expr.children[0]
    if expr.kind != A.GET_VERTICES:
        raise EngineError(f"unsupported graph-side operator {expr.kind!r}")
    steps.append(_ChainStep(var=expr.var, label=expr.label))
    steps.reverse()  # chain order, anchor first
    movements.reverse()  # innermost join first
    return steps, tuple(filters), tuple(movements), tuple(produce)


def _cond_vars(cond: Comparison) -> set[str]:
    out = set()
    for side in (cond.lhs, cond.rhs):
        if isinstance(side, Card):
            side = side.arg
        if isinstance(side, Prop):
            out.add(side.var)
    return out


def _selectivity(cond: Comparison, label: str | None, cat: Catalog) -> float:
    if cond.op == "=":
        for side in (cond.lhs, cond.rhs):
            if isinstance(side, Prop) and label is not None:
                d = cat.property_index.get((label, side.prop))
                if d:
                    return 1.0 / d
        return 0.1
    if cond.op == "!=":
        return 0.9
    return 1.0 / 3.0


def _expand_factor(src_label: str, edge_type: str, direction: str,
                   dst_label: str | None, cat: Catalog) -> float:
    """Average out-degree of the traversal from one bound vertex."""
    total = 0
    for (sl, et, dl), count in cat.edge_counts.items():
        if et != edge_type:
            continue
        if direction == "out" and sl == src_label and (dst_label is None or dl == dst_label):
            total += count
        if direction == "in" and dl == src_label and (dst_label is None or sl == dst_label):
            total += count
    n_src = max(cat.label_counts.get(src_label, 0), 1)
    return total / n_src


def plan_graph_query(expr: A.AlgebraExpr, cat: Catalog,
                     movement_rowcounts: dict[str, float] | None = None) -> GraphPlanNode:
    """Greedy chain plan: anchor at the smallest filtered label, expand outward.

    ``movement_rowcounts`` maps temp labels to their source-table rowcounts
    (the estimate shown on NodeFromRelation leaves).
    """
    steps, filters, movements, produce = _decompose_graph_expr(expr)
    label_of = {s.var: s.label for s in steps}

    var_filters: dict[str, list[Comparison]] = {s.var: [] for s in steps}
    cross_filters: list[Comparison] = []
    for cond in filters:
        vars_ = _cond_vars(cond)
        if len(vars_) == 1:
            var_filters[next(iter(vars_))].append(cond)
        else:
            cross_filters.append(cond)

    def scan_estimate(var: str) -> float:
        if label_of[var] is None:
            # no label to narrow the scan: assume every vertex qualifies
            est = float(sum(cat.label_counts.values()))
        else:
            est = float(cat.label_counts.get(label_of[var], 0))
        for cond in var_filters[var]:
            est *= _selectivity(cond, label_of[var], cat)
        return est

    anchor_idx = min(range(len(steps)), key=lambda i: (scan_estimate(steps[i].var), i))

    anchor = steps[anchor_idx]
    node = GraphPlanNode(
        op="NodeByLabelScan", var=anchor.var, label=anchor.label,
        filter=tuple(var_filters[anchor.var]), est=scan_estimate(anchor.var),
        slots=(("v", anchor.var),),
    )
    bound = [anchor.var]

    def attach_expand(node: GraphPlanNode, step: _ChainStep, from_var: str,
                      new_var: str, direction: str) -> GraphPlanNode:
        new_label = label_of[new_var]
        factor = _expand_factor(label_of[from_var], step.edge_type, direction,
                                new_label, cat)
        if step.var_length:
            factor *= VAR_EXPAND_ESTIMATE_FACTOR
        est = None if node.est is None else node.est * factor
        for cond in var_filters[new_var]:
            if est is not None:
                est *= _selectivity(cond, new_label, cat)
        out = GraphPlanNode(
            op="VarLengthExpand" if step.var_length else "ExpandAll",
            children=(node,), var=new_var, label=new_label, source_var=from_var,
            edge_type=step.edge_type, direction=direction, max_hops=step.max_hops,
            filter=tuple(var_filters[new_var]), est=est,
            slots=node.slots + (("v", new_var),),
        )
        bound.append(new_var)
        return out

    # expand forward from the anchor, then backward along reversed edges
    for i in range(anchor_idx + 1, len(steps)):
        step = steps[i]
        node = attach_expand(node, step, step.source_var, step.var, step.direction)
    for i in range(anchor_idx, 0, -1):
        step = steps[i]  # edge binding steps[i].var from steps[i-1].var, reversed
        direction = "in" if step.direction == "out" else "out"
        node = attach_expand(node, step, step.var, step.source_var, direction)

    # cross-variable filters as soon as both sides are bound
    remaining = list(cross_filters)
    order = {v: i for i, v in enumerate(bound)}
    for cond in sorted(remaining, key=lambda c: max(order[v] for v in _cond_vars(c))):
        node = GraphPlanNode(op="Filter", children=(node,), filter=(cond,),
                             est=None if node.est is None else node.est * _selectivity(cond, None, cat),
                             slots=node.slots)

    node = insert_movement_joins(node, movements, movement_rowcounts or {})

    produce_slots = tuple(("o", name) for _, name in produce)
    return GraphPlanNode(op="Produce", children=(node,), produce=produce,
                         est=node.est, slots=produce_slots)


def insert_movement_joins(root: GraphPlanNode, movements,
                          movement_rowcounts: dict[str, float] | None = None) -> GraphPlanNode:
    """Graft one NodeHashJoin + NodeFromRelation per movement into a chain plan.

    Each join lands immediately above the node that binds the movement's last
    pattern variable (the earliest point where every join key is available);
    estimates of nodes above the insertion keep their original values, the
    join itself reports unknown cardinality.
    """
    movement_rowcounts = movement_rowcounts or {}
    node = root
    for mv in movements:
        vars_needed = {v for v, _, _ in mv.pairs}
        node = _insert_one(node, mv, vars_needed, movement_rowcounts)
    return _recompute_slots(node)


def _binds(node: GraphPlanNode) -> str | None:
    if node.op in ("NodeByLabelScan", "ExpandAll", "VarLengthExpand"):
        return node.var
    return None


def _recompute_slots(node: GraphPlanNode) -> GraphPlanNode:
    """Reassign row-slot layouts bottom-up after structural edits."""
    children = tuple(_recompute_slots(c) for c in node.children)
    if node.op == "NodeByLabelScan":
        slots = (("v", node.var),)
    elif node.op in ("ExpandAll", "VarLengthExpand"):
        slots = children[0].slots + (("v", node.var),)
    elif node.op == "Filter":
        slots = children[0].slots
    elif node.op == "NodeHashJoin":
        slots = children[0].slots + children[1].slots
    elif node.op in ("NodeFromRelation", "Produce"):
        slots = node.slots
    else:
        raise EngineError(f"unknown graph operator {node.op!r}")
    return replace(node, children=children, slots=slots)


def _insert_one(node: GraphPlanNode, mv: MovementJoin, vars_needed: set[str],
                rowcounts: dict[str, float]) -> GraphPlanNode:
    """Wrap the shallowest node under which all of ``vars_needed`` are bound."""
    def bound_below(n: GraphPlanNode) -> set[str]:
        out = set()
        if _binds(n):
            out.add(_binds(n))
        for c in n.children:
            out |= bound_below(c)
        return out

    def rec(n: GraphPlanNode) -> GraphPlanNode:
        for i, child in enumerate(n.children):
            if vars_needed <= bound_below(child):
                children = list(n.children)
                children[i] = rec(child)
                return replace(n, children=tuple(children))
        # no child binds everything: this node is the binder -> wrap it
        payload = GraphPlanNode(
            op="NodeFromRelation", temp_var=mv.temp_var, temp_label=mv.temp_label,
            source=mv.source,
            est=rowcounts.get(mv.temp_label, mv.est_rows),
            slots=tuple(("c", mv.temp_var, c) for c in mv.columns),
        )
        return GraphPlanNode(op="NodeHashJoin", children=(n, payload),
                             pairs=mv.pairs, temp_var=mv.temp_var, est=None)

    if not vars_needed <= bound_below(node):
        raise EngineError(
            f"movement {mv.temp_label} joins on unbound variables {sorted(vars_needed)}")
    return rec(node)


# ---------------------------------------------------------------------------
# Graph execution
# ---------------------------------------------------------------------------

class _Deadline:
    def __init__(self, deadline: float | None):
        self.deadline = deadline
        self.counter = 0

    def tick(self, n: int = 1):
        if self.deadline is None:
            return
        self.counter += n
        if self.counter >= 2048:
            self.counter = 0
            if time.perf_counter() > self.deadline:
                raise ProbeTimeout()


def _slot_operand(op, row: tuple, index: dict[Slot, int], g: PropertyGraph):
    if isinstance(op, Lit):
        return op.value
    if isinstance(op, Card):
        return list_cardinality(_slot_operand(op.arg, row, index, g))
    if isinstance(op, Prop):
        vslot = ("v", op.var)
        if vslot in index:
            ref = row[index[vslot]]
            return None if ref is None else g.vertex_props[ref].get(op.prop)
        cslot = ("c", op.var, op.prop)
        if cslot in index:
            return row[index[cslot]]
        raise EngineError(f"unresolvable reference {op.var}.{op.prop}")
    if isinstance(op, Col):
        raise EngineError("bare column references do not occur graph-side")
    raise EngineError(f"unknown operand {op!r}")


def _passes(conds, row, index, g) -> bool:
    return all(
        compare_values(_slot_operand(c.lhs, row, index, g), c.op,
                       _slot_operand(c.rhs, row, index, g))
        for c in conds
    )


def execute_graph(plan: GraphPlanNode, g: PropertyGraph,
                  moved: dict[str, Relation], cfg: CostModelConfig,
                  deadline: float | None = None) -> tuple[GraphRelation, float]:
    """Run a graph plan; returns the produced relation and its latency."""
    dl = _Deadline(deadline)
    t0 = time.perf_counter()
    synthetic_cost = [0.0]

    def charge(op: str, processed: int):
        synthetic_cost[0] += cfg.unit_costs.get(op, 0.0) * processed

    def run(node: GraphPlanNode) -> list[tuple]:
        index = {s: i for i, s in enumerate(node.slots)}
        if node.op == "NodeByLabelScan":
            if node.label is None:
                vids = sorted(g.vertices)
            else:
                vids = g.vertices_with_label(node.label)
            charge(node.op, len(vids))
            out = []
            for v in vids:
                dl.tick()
                if _passes(node.filter, (v,), index, g):
                    out.append((v,))
            return out

        if node.op in ("ExpandAll", "VarLengthExpand"):
            rows = run(node.children[0])
            child_index = {s: i for i, s in enumerate(node.children[0].slots)}
            src_i = child_index[("v", node.source_var)]
            out = []
            if node.op == "ExpandAll":
                for row in rows:
                    src = row[src_i]
                    if src is None or src < 0:
                        continue
                    if node.direction == "out":
                        for eid in g.out_edges(src):
                            dl.tick()
                            if node.edge_type not in g.edge_labels[eid]:
                                continue
                            tgt = g.endpoints[eid][1]
                            if node.label is not None and not g.has_label(tgt, node.label):
                                continue
                            new = row + (tgt,)
                            if _passes(node.filter, new, index, g):
                                out.append(new)
                    else:
                        for eid in g.in_edges(src):
                            dl.tick()
                            if node.edge_type not in g.edge_labels[eid]:
                                continue
                            tgt = g.endpoints[eid][0]
                            if node.label is not None and not g.has_label(tgt, node.label):
                                continue
                            new = row + (tgt,)
                            if _passes(node.filter, new, index, g):
                                out.append(new)
            else:
                reach_cache: dict[int, list[int]] = {}
                for row in rows:
                    src = row[src_i]
                    if src is None or src < 0:
                        continue
                    if src not in reach_cache:
                        reach_cache[src] = _bfs(g, src, node.edge_type, node.direction,
                                                node.max_hops, dl)
                    for tgt in reach_cache[src]:
                        if node.label is not None and not g.has_label(tgt, node.label):
                            continue
                        new = row + (tgt,)
                        if _passes(node.filter, new, index, g):
                            out.append(new)
            charge(node.op, len(rows) + len(out))
            return out

        if node.op == "Filter":
            rows = run(node.children[0])
            charge(node.op, len(rows))
            return [r for r in rows if _passes(node.filter, r, index, g)]

        if node.op == "NodeFromRelation":
            if node.source not in moved:
                raise EngineError(f"moved payload {node.source!r} not provided")
            rows = list(moved[node.source].rows)
            charge(node.op, len(rows))
            return rows

        if node.op == "NodeHashJoin":
            left_rows = run(node.children[0])
            right_rows = run(node.children[1])
            right_index = {s: i for i, s in enumerate(node.children[1].slots)}
            left_index = {s: i for i, s in enumerate(node.children[0].slots)}
            key_cols = [right_index[("c", node.temp_var, col)] for _, _, col in node.pairs]
            table: dict[tuple, list[tuple]] = {}
            for rr in right_rows:
                dl.tick()
                key = tuple(join_key(rr[i]) for i in key_cols)
                if None in key:
                    continue
                table.setdefault(key, []).append(rr)
            probe = [(left_index[("v", v)], prop) for v, prop, _ in node.pairs]
            out = []
            for lr in left_rows:
                dl.tick()
                key = []
                ok = True
                for vi, prop in probe:
                    ref = lr[vi]
                    val = None if ref is None else (
                        g.vertex_props[ref].get(prop) if ref >= 0 else None)
                    k = join_key(val)
                    if k is None:
                        ok = False
                        break
                    key.append(k)
                if not ok:
                    continue
                for rr in table.get(tuple(key), ()):
                    out.append(lr + rr)
            charge(node.op, len(left_rows) + len(right_rows) + len(out))
            return out

        if node.op == "Produce":
            rows = run(node.children[0])
            child_index = {s: i for i, s in enumerate(node.children[0].slots)}
            out = []
            for row in rows:
                dl.tick()
                out.append(tuple(_slot_operand(op_, row, child_index, g)
                                 for op_, _ in node.produce))
            charge(node.op, len(rows))
            return out

        raise EngineError(f"unknown graph operator {node.op!r}")

    if plan.op != "Produce":
        raise EngineError("graph plans are rooted at Produce")
    rows = run(plan)
    columns = tuple(name for _, name in plan.produce)
    result = GraphRelation(schema=tuple((c, "value") for c in columns), rows=tuple(rows))
    latency = synthetic_cost[0] if cfg.mode == "synthetic" else time.perf_counter() - t0
    return result, latency


def _bfs(g: PropertyGraph, src: int, edge_type: str, direction: str,
         max_hops: int | None, dl: _Deadline) -> list[int]:
    seen: set[int] = set()
    frontier = [src]
    hops = 0
    while frontier and (max_hops is None or hops < max_hops):
        hops += 1
        nxt = []
        for v in frontier:
            edges = g.out_edges(v) if direction == "out" else g.in_edges(v)
            for eid in edges:
                dl.tick()
                if edge_type not in g.edge_labels[eid]:
                    continue
                w = g.endpoints[eid][1] if direction == "out" else g.endpoints[eid][0]
                if w not in seen:
                    seen.add(w)
                    nxt.append(w)
        frontier = nxt
    return sorted(seen)


# ---------------------------------------------------------------------------
# Relational planning and execution
# ---------------------------------------------------------------------------

def compile_relational(expr: A.AlgebraExpr, cat: Catalog) -> RelPlanNode:
    """Compile a relational algebra expression into a physical plan.

    Selections over scans merge into the scan's filter; selections over joins
    become the join's residual predicate.
    """
    if expr.kind == A.BASE_RELATION:
        if expr.table == GRAPH_RESULT:
            return RelPlanNode(op="GraphResultScan", columns=tuple(expr.columns), est=None)
        if expr.table == A.DUAL_TABLE:
            raise EngineError("the dual relation has no physical scan")
        est = float(cat.table_rowcounts.get(expr.table, 0))
        return RelPlanNode(op="TableScan", table=expr.table,
                           columns=tuple(expr.columns), est=est)
    if expr.kind == A.REL_SELECT:
        child = compile_relational(expr.children[0], cat)
        sel = 1.0
        for cond in expr.predicate:
            sel *= _selectivity(cond, None, cat)
        est = None if child.est is None else child.est * sel
        return replace(child, filter=child.filter + tuple(expr.predicate), est=est)
    if expr.kind == A.REL_JOIN:
        left = compile_relational(expr.children[0], cat)
        right = compile_relational(expr.children[1], cat)
        if expr.pairs is not None:
            pairs = tuple(expr.pairs)
        else:
            pairs = tuple((n, n) for n in left.columns if n in right.columns)
        out_cols = left.columns + tuple(c for c in right.columns if c not in left.columns)
        return RelPlanNode(op="HashJoin", children=(left, right), pairs=pairs,
                           columns=out_cols, est=None)
    if expr.kind == A.REL_PROJECT:
        child = compile_relational(expr.children[0], cat)
        return RelPlanNode(op="Project", children=(child,),
                           projection=tuple(expr.projection),
                           columns=tuple(n for _, n in expr.projection), est=child.est)
    raise EngineError(f"unsupported relational operator {expr.kind!r}")


def _col_operand(op, columns: tuple[str, ...]):
    if isinstance(op, Lit):
        return lambda row: op.value
    if isinstance(op, Card):
        inner = _col_operand(op.arg, columns)
        return lambda row: list_cardinality(inner(row))
    if isinstance(op, Col):
        try:
            i = columns.index(op.name)
        except ValueError:
            raise EngineError(f"unknown column {op.name!r}; have {list(columns)}") from None
        return lambda row: row[i]
    raise EngineError(f"unsupported relational operand {op!r}")


def execute_relational(plan: RelPlanNode, tables: dict[str, Relation],
                       graph_result: Relation | None, cfg: CostModelConfig,
                       deadline: float | None = None) -> tuple[Relation, float]:
    """Run a relational plan; returns the result and its latency."""
    dl = _Deadline(deadline)
    t0 = time.perf_counter()
    synthetic_cost = [0.0]

    def charge(op: str, processed: int):
        synthetic_cost[0] += cfg.unit_costs.get(op, 0.0) * processed

    def apply_filter(rows, conds, columns):
        if not conds:
            return rows
        tests = [(c.op, _col_operand(c.lhs, columns), _col_operand(c.rhs, columns))
                 for c in conds]
        out = []
        for row in rows:
            dl.tick()
            if all(compare_values(l(row), op, r(row)) for op, l, r in tests):
                out.append(row)
        return out

    def run(node: RelPlanNode) -> list[tuple]:
        if node.op == "TableScan":
            if node.table not in tables:
                raise EngineError(f"unknown table {node.table!r}")
            rel = tables[node.table]
            if len(rel.columns) != len(node.columns):
                raise EngineError(f"table {node.table!r} arity mismatch")
            rows = list(rel.rows)
            charge(node.op, len(rows))
            return apply_filter(rows, node.filter, node.columns)
        if node.op == "GraphResultScan":
            if graph_result is None:
                raise EngineError("no transferred graph result bound")
            rows = list(graph_result.rows)
            charge(node.op, len(rows))
            return apply_filter(rows, node.filter, node.columns)
        if node.op == "HashJoin":
            left, right = node.children
            lrows = run(left)
            rrows = run(right)
            li = [left.columns.index(l) for l, _ in node.pairs]
            ri = [right.columns.index(r) for _, r in node.pairs]
            table: dict[tuple, list[tuple]] = {}
            for rr in rrows:
                dl.tick()
                key = tuple(join_key(rr[i]) for i in ri)
                if None in key:
                    continue
                table.setdefault(key, []).append(rr)
            keep = [i for i, c in enumerate(right.columns) if c not in left.columns]
            out = []
            if node.pairs:
                for lr in lrows:
                    dl.tick()
                    key = tuple(join_key(lr[i]) for i in li)
                    if None in key:
                        continue
                    for rr in table.get(key, ()):
                        out.append(lr + tuple(rr[i] for i in keep))
            else:
                for lr in lrows:
                    for rr in rrows:
                        dl.tick()
                        out.append(lr + tuple(rr[i] for i in keep))
            charge(node.op, len(lrows) + len(rrows) + len(out))
            return apply_filter(out, node.filter, node.columns)
        if node.op == "Project":
            child = node.children[0]
            rows = run(child)
            funcs = [_col_operand(op_, child.columns) for op_, _ in node.projection]
            charge(node.op, len(rows))
            out = []
            for row in rows:
                dl.tick()
                out.append(tuple(f(row) for f in funcs))
            return apply_filter(out, node.filter, node.columns)
        raise EngineError(f"unknown relational operator {node.op!r}")

    rows = run(plan)
    result = Relation(name="", schema=tuple((c, "string") for c in plan.columns),
                      rows=tuple(rows))
    latency = synthetic_cost[0] if cfg.mode == "synthetic" else time.perf_counter() - t0
    return result, latency


# ---------------------------------------------------------------------------
# Candidate orchestration
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    latency: float
    breakdown: dict[str, float]
    rows_moved: int  # relational -> graph
    bytes_moved: int
    rows_back: int  # graph -> relational
    bytes_back: int
    result: Relation | None
    graph_plan_text: str


def run_candidate(plan: CandidatePlan, g: PropertyGraph, tables: dict[str, Relation],
                  cat: Catalog, cfg: CostModelConfig, deadline: float | None = None,
                  keep_result: bool = True, stop_after_graph: bool = False) -> RunResult:
    """Execute one candidate end to end and account its latency.

    Stages: pre-queries, one batched relational->graph transfer, graph
    execution, one graph->relational transfer, final relational query. The
    pruned vertex-movement variant adds a vertex export plus a relational
    entity join before shipping (two extra transfer terms).

    With ``stop_after_graph`` the run ends once the graph result's size is
    known — a count-only probe that skips the return transfer and the final
    join, leaving ``result`` unset.
    """
    q = plan.query
    breakdown = {"pre_query": 0.0, "movement_out": 0.0, "graph": 0.0,
                 "movement_back": 0.0, "final_relational": 0.0}

    pre_results: dict[str, Relation] = {}
    for pre in plan.prequeries:
        rel_plan = compile_relational(pre.expr, cat)
        result, lat = execute_relational(rel_plan, tables, None, cfg, deadline)
        pre_results[pre.name] = result
        breakdown["pre_query"] += lat

    rows_moved = 0
    bytes_moved = 0
    if plan.pruned_vertex_movement is not None:
        extra, pre_results = _vertex_export_join(plan, g, tables, cfg, pre_results, deadline)
        breakdown["movement_out"] += extra

    if plan.movements:
        overheads = 0.0
        for step in plan.movements:
            payload = pre_results[step.source]
            rows_moved += len(payload.rows)
            bytes_moved += rows_bytes(payload.rows)
        breakdown["movement_out"] += transfer_cost_total(rows_moved, bytes_moved, cfg)

    rowcounts = {
        step.temp_label: float(cat.table_rowcounts[q.alias_tables[step.component]])
        for step in plan.movements
    }
    gplan = plan_graph_query(plan.graph_expr, cat, rowcounts)
    moved = {plan.movements[i].source: pre_results[plan.movements[i].source]
             for i in range(len(plan.movements))}
    graph_out, glat = execute_graph(gplan, g, moved, cfg, deadline)
    breakdown["graph"] += glat

    rows_back = len(graph_out.rows)
    bytes_back = rows_bytes(graph_out.rows)
    if stop_after_graph:
        return RunResult(
            latency=sum(breakdown.values()),
            breakdown=breakdown,
            rows_moved=rows_moved,
            bytes_moved=bytes_moved,
            rows_back=rows_back,
            bytes_back=bytes_back,
            result=None,
            graph_plan_text=plan_text(gplan),
        )
    breakdown["movement_back"] += transfer_cost_total(rows_back, bytes_back, cfg)

    bound = Relation(name=GRAPH_RESULT,
                     schema=tuple((c, "string") for c in plan.graph_columns),
                     rows=graph_out.rows)
    final_plan = compile_relational(plan.final_expr, cat)
    final, flat = execute_relational(final_plan, tables, bound, cfg, deadline)
    breakdown["final_relational"] += flat

    return RunResult(
        latency=sum(breakdown.values()),
        breakdown=breakdown,
        rows_moved=rows_moved,
        bytes_moved=bytes_moved,
        rows_back=rows_back,
        bytes_back=bytes_back,
        result=final if keep_result else None,
        graph_plan_text=plan_text(gplan),
    )


def _vertex_export_join(plan: CandidatePlan, g: PropertyGraph,
                        tables: dict[str, Relation], cfg: CostModelConfig,
                        pre_results: dict[str, Relation],
                        deadline: float | None) -> tuple[float, dict[str, Relation]]:
    """Export a label's vertices, entity-join them relationally, reship the rows.

    This is the movement shape that enumeration prunes; it exists only for
    the pruning-effectiveness study.
    """
    label = plan.pruned_vertex_movement
    step = next(s for s in plan.movements
                if plan.query.var_label(s.rg_pairs[0][0]) == label)
    vids = g.vertices_with_label(label)
    props = [prop for _, prop, _ in step.rg_pairs]
    exported = [tuple(g.vertex_props[v].get(p) for p in props) for v in vids]
    export_cost = transfer_cost_total(len(exported), rows_bytes(exported), cfg)

    payload = pre_results[step.source]
    key_idx = [payload.columns.index(col) for _, _, col in step.rg_pairs]
    t0 = time.perf_counter()
    keys = set()
    for row in exported:
        key = tuple(join_key(v) for v in row)
        if None not in key:
            keys.add(key)
    kept = [r for r in payload.rows
            if tuple(join_key(r[i]) for i in key_idx) in keys]
    if cfg.mode == "synthetic":
        join_cost = cfg.unit_costs["HashJoin"] * (len(exported) + len(payload.rows) + len(kept))
    else:
        join_cost = time.perf_counter() - t0
    out = dict(pre_results)
    out[step.source] = Relation(name=payload.name, schema=payload.schema, rows=tuple(kept))
    return export_cost + join_cost, out
