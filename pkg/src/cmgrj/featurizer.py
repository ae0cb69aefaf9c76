"""Plan encoding: (modified plan tree, star join graph) feature-vector pairs.

Each candidate plan becomes two structures over one shared node encoding:

* the graph engine's estimated plan for the original pattern, with one
  NodeHashJoin + NodeFromRelation pair grafted in per moved table — the tree
  a plan-cost model should judge;
* an undirected star describing the final relational query: a center node for
  the incoming graph result, and per remaining table a Join node linked to
  that table's scan — cardinalities here are *input* sizes, since output
  sizes of the final joins are exactly what nobody knows up front.

A node vector is ``one-hot(operator) ∥ card_norm ∥ unknown-flag ∥ table
bitmap ∥ label bitmap``: cardinalities are min-max normalized in log space
against corpus bounds, and a node's bitmaps cover itself and everything
below it, so the root summarizes what the whole plan touches.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .datamodel import Catalog
from .engines import EngineError, GraphPlanNode, MovementJoin, insert_movement_joins
from .frontend import CandidatePlan

TREE_OPS = ("NodeByLabelScan", "ExpandAll", "VarLengthExpand", "Filter",
            "NodeHashJoin", "NodeFromRelation", "Produce")
GRAPH_OPS = ("Neo4jResult", "TableScan", "Join")
OP_VOCAB = TREE_OPS + GRAPH_OPS  # shared one-hot width for both structures


class FeaturizeError(Exception):
    pass


@dataclass(frozen=True)
class RawNode:
    """One plan-tree or join-graph node before numeric encoding."""

    op: str
    card: float | None           # None = unknown
    tables: frozenset[str]       # self + descendants
    labels: frozenset[str]
    children: tuple[int, int]    # indices into the node list; -1 = absent


@dataclass(frozen=True)
class PlanStructures:
    """Featurizer stage 1: structure with raw cardinalities (bounds not yet applied)."""

    name: str
    movement: tuple[str, ...]
    tree: tuple[RawNode, ...]         # index 0 is the root
    graph: tuple[RawNode, ...]        # index 0 is the center
    graph_edges: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class FeatureConfig:
    """Everything needed to turn structures into fixed-width vectors."""

    tables: tuple[str, ...]
    labels: tuple[str, ...]
    bounds: tuple[float, float]  # (lo, hi) over log cardinality

    @property
    def width(self) -> int:
        return len(OP_VOCAB) + 2 + len(self.tables) + len(self.labels)


@dataclass(frozen=True)
class PlanFeatures:
    name: str
    movement: tuple[str, ...]
    tree: np.ndarray                  # [n, width] float64
    tree_children: np.ndarray         # [n, 2] int, -1 = absent
    graph: np.ndarray                 # [m, width]
    graph_edges: np.ndarray           # [e, 2] int, undirected


def log_card(card: float | None) -> float | None:
    """Natural log with zero mapped to log(1) = 0; None passes through."""
    if card is None:
        return None
    return math.log(max(float(card), 1.0))


def _flatten_tree(root: GraphPlanNode, source_tables: dict[str, str]) -> tuple[RawNode, ...]:
    nodes: list[RawNode] = []

    def visit(n: GraphPlanNode) -> int:
        index = len(nodes)
        nodes.append(None)  # reserve slot so parents precede children
        child_idx = [-1, -1]
        if len(n.children) > 2:
            raise FeaturizeError(f"{n.op} has {len(n.children)} children; trees are binary")
        tables: set[str] = set()
        labels: set[str] = set()
        for j, c in enumerate(n.children):
            child_idx[j] = visit(c)
            tables |= nodes[child_idx[j]].tables
            labels |= nodes[child_idx[j]].labels
        if n.op == "NodeByLabelScan" and n.label is not None:
            labels.add(n.label)
        elif n.op in ("ExpandAll", "VarLengthExpand") and n.label is not None:
            labels.add(n.label)
        elif n.op == "NodeFromRelation":
            shipped = source_tables.get(n.source)
            if shipped is None:
                raise FeaturizeError(f"no source tables recorded for {n.source!r}")
            tables |= shipped
        nodes[index] = RawNode(op=n.op, card=n.est, tables=frozenset(tables),
                               labels=frozenset(labels), children=tuple(child_idx))
        return index

    visit(root)
    return tuple(nodes)


def build_structures(plan: CandidatePlan, estimated: GraphPlanNode,
                     cat: Catalog) -> PlanStructures:
    """Stage 1: modified tree + star join graph with raw cardinalities.

    ``estimated`` must be the graph engine's plan for the *original* pattern
    (no movements); the movement joins of ``plan`` are grafted here so the
    encoded tree reflects the candidate without re-planning.
    """
    q = plan.query
    # a moved component ships its whole pre-query: every member table counts
    source_tables = {
        step.source: frozenset(q.alias_tables[a]
                               for a in q.components[step.component].aliases)
        for step in plan.movements
    }
    movements = []
    rowcounts = {}
    for step in plan.movements:
        table = q.alias_tables[step.component]
        movements.append(MovementJoin(
            temp_var=step.temp_var, temp_label=step.temp_label, source=step.source,
            columns=step.columns, pairs=step.rg_pairs))
        rowcounts[step.temp_label] = float(cat.table_rowcounts[table])
    try:
        modified = insert_movement_joins(estimated, movements, rowcounts)
    except EngineError as exc:
        raise FeaturizeError(str(exc)) from None
    tree = _flatten_tree(modified, source_tables)

    # star join graph over the final relational query
    moved = set(plan.movement)
    center = RawNode(op="Neo4jResult", card=tree[0].card,
                     tables=tree[0].tables, labels=tree[0].labels,
                     children=(-1, -1))
    graph: list[RawNode] = [center]
    edges: list[tuple[int, int]] = []
    for name in sorted(set(q.components) - moved):
        comp = q.components[name]
        for alias in comp.aliases:
            table = q.alias_tables[alias]
            scan = RawNode(op="TableScan", card=float(cat.table_rowcounts[table]),
                           tables=frozenset({table}), labels=frozenset(),
                           children=(-1, -1))
            scan_i = len(graph)
            graph.append(scan)
            join_card = None
            if center.card is not None:
                join_card = center.card + scan.card
            join = RawNode(op="Join", card=join_card,
                           tables=center.tables | scan.tables,
                           labels=center.labels, children=(-1, -1))
            join_i = len(graph)
            graph.append(join)
            edges.append((0, join_i))
            edges.append((join_i, scan_i))
    return PlanStructures(name=q.name, movement=plan.movement, tree=tree,
                          graph=tuple(graph), graph_edges=tuple(edges))


def card_bounds(structures) -> tuple[float, float]:
    """Min/max of log cardinality over every known estimate in a corpus."""
    values = []
    for ps in structures:
        for node in ps.tree + ps.graph:
            lc = log_card(node.card)
            if lc is not None:
                values.append(lc)
    if not values:
        return (0.0, 0.0)
    return (min(values), max(values))


def _encode_nodes(nodes, cfg: FeatureConfig) -> np.ndarray:
    lo, hi = cfg.bounds
    table_pos = {t: i for i, t in enumerate(cfg.tables)}
    label_pos = {l: i for i, l in enumerate(cfg.labels)}
    out = np.zeros((len(nodes), cfg.width), dtype=np.float64)
    for i, node in enumerate(nodes):
        try:
            out[i, OP_VOCAB.index(node.op)] = 1.0
        except ValueError:
            raise FeaturizeError(f"operator {node.op!r} not in the vocabulary") from None
        lc = log_card(node.card)
        if lc is None:
            out[i, len(OP_VOCAB)] = 0.0
            out[i, len(OP_VOCAB) + 1] = 1.0
        else:
            if hi > lo:
                norm = (lc - lo) / (hi - lo)
            else:
                norm = 0.5  # degenerate corpus: everything sits mid-scale
            out[i, len(OP_VOCAB)] = min(max(norm, 0.0), 1.0)
        base = len(OP_VOCAB) + 2
        for t in node.tables:
            if t in table_pos:
                out[i, base + table_pos[t]] = 1.0
        for l in node.labels:
            if l in label_pos:
                out[i, base + len(cfg.tables) + label_pos[l]] = 1.0
    return out


def encode_structures(ps: PlanStructures, cfg: FeatureConfig) -> PlanFeatures:
    """Stage 2: numeric vectors under fixed corpus bounds and bitmap vocabularies."""
    tree_children = np.array([n.children for n in ps.tree], dtype=np.int64)
    graph_edges = (np.array(ps.graph_edges, dtype=np.int64)
                   if ps.graph_edges else np.zeros((0, 2), dtype=np.int64))
    return PlanFeatures(
        name=ps.name, movement=ps.movement,
        tree=_encode_nodes(ps.tree, cfg), tree_children=tree_children,
        graph=_encode_nodes(ps.graph, cfg), graph_edges=graph_edges,
    )


def featurize(plan: CandidatePlan, estimated: GraphPlanNode, cat: Catalog,
              cfg: FeatureConfig) -> PlanFeatures:
    """One-shot: build structures and encode them under ``cfg``."""
    return encode_structures(build_structures(plan, estimated, cat), cfg)


def feature_config_from_catalog(cat: Catalog, bounds: tuple[float, float]) -> FeatureConfig:
    return FeatureConfig(tables=tuple(sorted(cat.table_rowcounts)),
                         labels=tuple(sorted(cat.label_counts)), bounds=bounds)


# ---------------------------------------------------------------------------
# Dump format: one JSON record per line, header first
# ---------------------------------------------------------------------------

def dump_features(path: str, cfg: FeatureConfig, features) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = {"record": "header", "op_vocab": list(OP_VOCAB),
                  "tables": list(cfg.tables), "labels": list(cfg.labels),
                  "bounds": list(cfg.bounds), "width": cfg.width}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for pf in features:
            rec = {"record": "plan", "name": pf.name, "movement": list(pf.movement),
                   "tree": [[round(v, 12) for v in row] for row in pf.tree.tolist()],
                   "tree_children": pf.tree_children.tolist(),
                   "graph": [[round(v, 12) for v in row] for row in pf.graph.tolist()],
                   "graph_edges": pf.graph_edges.tolist()}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_features(path: str) -> tuple[FeatureConfig, list[PlanFeatures]]:
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("record") != "header":
        raise FeaturizeError(f"{path}: missing feature-file header")
    head = lines[0]
    if head["op_vocab"] != list(OP_VOCAB):
        raise FeaturizeError("feature file was written with a different operator vocabulary")
    cfg = FeatureConfig(tables=tuple(head["tables"]), labels=tuple(head["labels"]),
                        bounds=(head["bounds"][0], head["bounds"][1]))
    out = []
    for rec in lines[1:]:
        if rec.get("record") != "plan":
            raise FeaturizeError("unexpected record kind in feature file")
        out.append(PlanFeatures(
            name=rec["name"], movement=tuple(rec["movement"]),
            tree=np.array(rec["tree"], dtype=np.float64),
            tree_children=np.array(rec["tree_children"], dtype=np.int64).reshape(-1, 2),
            graph=np.array(rec["graph"], dtype=np.float64),
            graph_edges=np.array(rec["graph_edges"], dtype=np.int64).reshape(-1, 2),
        ))
    return cfg, out
