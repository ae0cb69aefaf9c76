"""Unified logical algebra over relations and property graphs.

Operators come in three groups:

* relational: selection, projection, natural/equi join over bags of tuples;
* graph: vertex scan, edge expansion (single and variable length), selection,
  projection, and natural join over graph relations (tuples whose cells may
  reference vertices);
* cross-model: ``RG_JOIN`` ships a relation into the graph side as temporary
  vertices and joins graph-natively; ``GR_JOIN`` materializes a graph relation
  into plain values and joins relationally.

:func:`evaluate` is a straightforward reference evaluator used as the ground
truth that the physical engines are checked against. It favours clarity over
speed and shares no operator code with the engines.

All expressions are immutable; :func:`to_sexpr`/:func:`from_sexpr` give a
stable text round trip.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .datamodel import (
    GraphRelation,
    PropertyGraph,
    REF_EDGE,
    REF_VALUE,
    REF_VERTEX,
    Relation,
    Value,
)

DUAL_TABLE = "__dual"


class AlgebraError(Exception):
    pass


class EvalError(Exception):
    pass


# ---------------------------------------------------------------------------
# Scalar operands and predicates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Col:
    """Reference to an attribute of the input by name."""

    name: str


@dataclass(frozen=True)
class Prop:
    """Property access on a vertex-reference attribute."""

    var: str
    prop: str


@dataclass(frozen=True)
class Lit:
    value: Value


@dataclass(frozen=True)
class Card:
    """Number of elements in a ';'-separated list value."""

    arg: "Operand"


Operand = Col | Prop | Lit | Card

COMPARE_OPS = ("=", "!=", "<", "<=", ">", ">=")


@dataclass(frozen=True)
class Comparison:
    op: str
    lhs: Operand
    rhs: Operand

    def __post_init__(self):
        if self.op not in COMPARE_OPS:
            raise AlgebraError(f"unknown comparison operator {self.op!r}")


def values_equal(a: Value, b: Value) -> bool:
    """Equality with null semantics: a null compares unequal to everything."""
    if a is None or b is None:
        return False
    if isinstance(a, bool) or isinstance(b, bool):
        return isinstance(a, bool) and isinstance(b, bool) and a == b
    if isinstance(a, (int, float)) and isinstance(b, (int, float)):
        return a == b
    return type(a) is type(b) and a == b


def compare_values(a: Value, op: str, b: Value) -> bool:
    """Three-valued-logic comparison collapsed to bool: unknown is False."""
    if a is None or b is None:
        return False
    if op == "=":
        return values_equal(a, b)
    if op == "!=":
        return not values_equal(a, b)
    numeric = (
        not isinstance(a, bool) and not isinstance(b, bool)
        and isinstance(a, (int, float)) and isinstance(b, (int, float))
    )
    if not numeric and not (isinstance(a, str) and isinstance(b, str)):
        return False
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    if op == ">=":
        return a >= b
    raise AlgebraError(f"unknown comparison operator {op!r}")


def list_cardinality(value: Value) -> Value:
    """Length of a ';'-separated list; null stays null."""
    if value is None:
        return None
    if not isinstance(value, str):
        raise EvalError(f"cardinality() needs a list-valued string, got {type(value).__name__}")
    return sum(1 for part in value.split(";") if part != "")


def join_key(value: Value):
    """Normalized hash-join key; returns None for unmatchable (null) cells."""
    if value is None:
        return None
    if isinstance(value, bool):
        return ("b", value)
    if isinstance(value, (int, float)):
        return ("n", float(value))
    return ("s", value)


# ---------------------------------------------------------------------------
# Expressions
# ---------------------------------------------------------------------------

BASE_RELATION = "base-relation"
BASE_GRAPH = "base-graph"
REL_SELECT = "rel-select"
REL_PROJECT = "rel-project"
REL_JOIN = "rel-join"
G_SELECT = "g-select"
G_PROJECT = "g-project"
G_JOIN = "g-join"
GET_VERTICES = "get-vertices"
EXPAND = "expand"
VAR_EXPAND = "var-expand"
RG_JOIN = "rg-join"
GR_JOIN = "gr-join"

KINDS = (
    BASE_RELATION, BASE_GRAPH, REL_SELECT, REL_PROJECT, REL_JOIN,
    G_SELECT, G_PROJECT, G_JOIN, GET_VERTICES, EXPAND, VAR_EXPAND,
    RG_JOIN, GR_JOIN,
)

DIRECTIONS = ("out", "in")


@dataclass(frozen=True)
class AlgebraExpr:
    kind: str
    children: tuple["AlgebraExpr", ...] = ()
    table: str | None = None
    columns: tuple[str, ...] | None = None
    predicate: tuple[Comparison, ...] | None = None
    projection: tuple[tuple[Operand, str], ...] | None = None
    var: str | None = None
    label: str | None = None
    source_var: str | None = None
    edge_type: str | None = None
    direction: str | None = None
    min_hops: int | None = None
    max_hops: int | None = None
    pairs: tuple[tuple[str, ...], ...] | None = None
    temp_label: str | None = None

    def __post_init__(self):
        k = self.kind
        if k not in KINDS:
            raise AlgebraError(f"unknown operator kind {k!r}")
        n = len(self.children)
        if k in (BASE_RELATION, BASE_GRAPH, GET_VERTICES) and n != 0:
            raise AlgebraError(f"{k} takes no children")
        if k in (REL_SELECT, REL_PROJECT, G_SELECT, G_PROJECT, EXPAND, VAR_EXPAND) and n != 1:
            raise AlgebraError(f"{k} takes exactly one child")
        if k in (REL_JOIN, G_JOIN, RG_JOIN, GR_JOIN) and n != 2:
            raise AlgebraError(f"{k} takes exactly two children")
        if k == BASE_RELATION and (self.table is None or self.columns is None):
            raise AlgebraError("base relation needs table and columns")
        if k in (REL_SELECT, G_SELECT) and not self.predicate:
            raise AlgebraError(f"{k} needs a non-empty predicate")
        if k in (REL_PROJECT, G_PROJECT) and not self.projection:
            raise AlgebraError(f"{k} needs a non-empty projection")
        if k == GET_VERTICES and (self.var is None or self.label is None):
            raise AlgebraError("vertex scan needs var and label")
        if k in (EXPAND, VAR_EXPAND):
            if None in (self.var, self.source_var, self.edge_type, self.direction):
                raise AlgebraError(f"{k} needs var, source_var, edge_type, direction")
            if self.direction not in DIRECTIONS:
                raise AlgebraError(f"direction must be one of {DIRECTIONS}")
        if k == VAR_EXPAND:
            if self.min_hops is None or self.min_hops < 1:
                raise AlgebraError("variable-length expand needs min_hops >= 1")
            if self.max_hops is not None and self.max_hops < self.min_hops:
                raise AlgebraError("max_hops must be >= min_hops")
        if k == RG_JOIN and (self.var is None or self.temp_label is None or not self.pairs):
            raise AlgebraError("relation-to-graph join needs var, temp_label and pairs")


# Convenience constructors, used heavily by the query translator.

def base_relation(table: str, columns: tuple[str, ...]) -> AlgebraExpr:
    return AlgebraExpr(BASE_RELATION, table=table, columns=tuple(columns))


def dual() -> AlgebraExpr:
    """A one-row, zero-column relation; joining against it is the identity."""
    return base_relation(DUAL_TABLE, ())


def rel_select(child: AlgebraExpr, predicate) -> AlgebraExpr:
    return AlgebraExpr(REL_SELECT, (child,), predicate=tuple(predicate))


def rel_project(child: AlgebraExpr, projection) -> AlgebraExpr:
    return AlgebraExpr(REL_PROJECT, (child,), projection=tuple(projection))


def rel_join(left: AlgebraExpr, right: AlgebraExpr, pairs=None) -> AlgebraExpr:
    return AlgebraExpr(REL_JOIN, (left, right),
                       pairs=tuple(tuple(p) for p in pairs) if pairs else None)


def g_select(child: AlgebraExpr, predicate) -> AlgebraExpr:
    return AlgebraExpr(G_SELECT, (child,), predicate=tuple(predicate))


def g_project(child: AlgebraExpr, projection) -> AlgebraExpr:
    return AlgebraExpr(G_PROJECT, (child,), projection=tuple(projection))


def g_join(left: AlgebraExpr, right: AlgebraExpr) -> AlgebraExpr:
    return AlgebraExpr(G_JOIN, (left, right))


def get_vertices(var: str, label: str) -> AlgebraExpr:
    return AlgebraExpr(GET_VERTICES, var=var, label=label)


def expand(child: AlgebraExpr, source_var: str, var: str, edge_type: str,
           direction: str, label: str | None = None) -> AlgebraExpr:
    return AlgebraExpr(EXPAND, (child,), var=var, source_var=source_var,
                       edge_type=edge_type, direction=direction, label=label)


def var_expand(child: AlgebraExpr, source_var: str, var: str, edge_type: str,
               direction: str, label: str | None = None,
               min_hops: int = 1, max_hops: int | None = None) -> AlgebraExpr:
    return AlgebraExpr(VAR_EXPAND, (child,), var=var, source_var=source_var,
                       edge_type=edge_type, direction=direction, label=label,
                       min_hops=min_hops, max_hops=max_hops)


def rg_join(relation: AlgebraExpr, pattern: AlgebraExpr, temp_var: str,
            temp_label: str, pairs) -> AlgebraExpr:
    """Ship ``relation`` into the graph as ``temp_label`` vertices and join.

    ``pairs`` items are (pattern var, vertex property, relation column); the
    output appends one vertex-reference attribute named ``temp_var`` whose
    properties are the relation's columns.
    """
    return AlgebraExpr(RG_JOIN, (relation, pattern), var=temp_var,
                       temp_label=temp_label, pairs=tuple(tuple(p) for p in pairs))


def gr_join(graph_side: AlgebraExpr, relation: AlgebraExpr, pairs=None) -> AlgebraExpr:
    """Materialize the graph relation into values, then join relationally.

    ``pairs`` items are (graph-side column, relation column); when omitted the
    join is natural on shared column names (a cross product if none).
    """
    return AlgebraExpr(GR_JOIN, (graph_side, relation),
                       pairs=tuple(tuple(p) for p in pairs) if pairs else None)


# ---------------------------------------------------------------------------
# Schemas
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Schema:
    names: tuple[str, ...]
    kinds: tuple[str, ...]  # REF_VERTEX / REF_EDGE / REF_VALUE per attribute
    graph: bool  # graph relation (may hold references) vs plain relation

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise AlgebraError(f"unknown attribute {name!r}; have {list(self.names)}") from None


def _concat_drop_dupes(left: Schema, right: Schema, graph: bool) -> Schema:
    names = list(left.names)
    kinds = list(left.kinds)
    for n, k in zip(right.names, right.kinds):
        if n not in left.names:
            names.append(n)
            kinds.append(k)
    return Schema(tuple(names), tuple(kinds), graph)


def _projection_schema(child: Schema, projection, graph: bool) -> Schema:
    names, kinds = [], []
    for operand, out_name in projection:
        if isinstance(operand, Col):
            kinds.append(child.kinds[child.index(operand.name)])
        else:
            kinds.append(REF_VALUE)
        names.append(out_name)
    return Schema(tuple(names), tuple(kinds), graph)


def schema_of(expr: AlgebraExpr) -> Schema:
    """Output schema of an expression, independent of any dataset."""
    k = expr.kind
    if k == BASE_RELATION:
        return Schema(tuple(expr.columns), tuple(REF_VALUE for _ in expr.columns), False)
    if k == BASE_GRAPH:
        raise AlgebraError("a bare graph is not a tuple collection; scan vertices instead")
    if k in (REL_SELECT, G_SELECT):
        return schema_of(expr.children[0])
    if k == REL_PROJECT:
        return _projection_schema(schema_of(expr.children[0]), expr.projection, False)
    if k == G_PROJECT:
        return _projection_schema(schema_of(expr.children[0]), expr.projection, True)
    if k == REL_JOIN:
        return _concat_drop_dupes(schema_of(expr.children[0]), schema_of(expr.children[1]), False)
    if k == G_JOIN:
        return _concat_drop_dupes(schema_of(expr.children[0]), schema_of(expr.children[1]), True)
    if k == GET_VERTICES:
        return Schema((expr.var,), (REF_VERTEX,), True)
    if k in (EXPAND, VAR_EXPAND):
        child = schema_of(expr.children[0])
        child.index(expr.source_var)  # must exist
        if expr.var in child.names:
            raise AlgebraError(f"expansion target {expr.var!r} already bound")
        return Schema(child.names + (expr.var,), child.kinds + (REF_VERTEX,), True)
    if k == RG_JOIN:
        pattern = schema_of(expr.children[1])
        if expr.var in pattern.names:
            raise AlgebraError(f"temp vertex attribute {expr.var!r} already bound")
        return Schema(pattern.names + (expr.var,), pattern.kinds + (REF_VERTEX,), True)
    if k == GR_JOIN:
        graph_side = schema_of(expr.children[0])
        materialized = Schema(graph_side.names,
                              tuple(REF_VALUE for _ in graph_side.names), False)
        return _concat_drop_dupes(materialized, schema_of(expr.children[1]), False)
    raise AlgebraError(f"unknown operator kind {k!r}")


# ---------------------------------------------------------------------------
# Reference evaluation
# ---------------------------------------------------------------------------

class EvalContext:
    """Evaluation state: the dataset plus temp vertices minted by RG joins.

    Temp vertices use negative ids so they can never collide with loaded ones;
    they exist only for the lifetime of one evaluation.
    """

    def __init__(self, graph: PropertyGraph, tables: dict[str, Relation]):
        self.graph = graph
        self.tables = tables
        self.temp_props: dict[int, dict[str, Value]] = {}
        self._next_temp = -1

    def new_temp_vertex(self, props: dict[str, Value]) -> int:
        vid = self._next_temp
        self._next_temp -= 1
        self.temp_props[vid] = props
        return vid

    def vertex_prop(self, vid: int, prop: str) -> Value:
        if vid < 0:
            return self.temp_props[vid].get(prop)
        return self.graph.vertex_props[vid].get(prop)


def _eval_operand(operand: Operand, row: tuple, schema: Schema, ctx: EvalContext) -> Value:
    if isinstance(operand, Lit):
        return operand.value
    if isinstance(operand, Col):
        return row[schema.index(operand.name)]
    if isinstance(operand, Prop):
        idx = schema.index(operand.var)
        if schema.kinds[idx] != REF_VERTEX:
            raise EvalError(f"{operand.var!r} is not a vertex reference")
        ref = row[idx]
        if ref is None:
            return None
        return ctx.vertex_prop(ref, operand.prop)
    if isinstance(operand, Card):
        return list_cardinality(_eval_operand(operand.arg, row, schema, ctx))
    raise EvalError(f"unknown operand {operand!r}")


def _row_passes(predicate, row, schema, ctx) -> bool:
    return all(
        compare_values(_eval_operand(c.lhs, row, schema, ctx), c.op,
                       _eval_operand(c.rhs, row, schema, ctx))
        for c in predicate
    )


def _hash_join(left_rows, right_rows, left_schema: Schema, right_schema: Schema,
               pairs) -> list[tuple]:
    """Equi-join; returns concatenated rows with right join-duplicate columns kept.

    ``pairs`` are (left column index, right column index). With no pairs this
    is a cross product.
    """
    if not pairs:
        return [lr + rr for lr in left_rows for rr in right_rows]
    index: dict[tuple, list[tuple]] = {}
    for rr in right_rows:
        key = tuple(join_key(rr[j]) for _, j in pairs)
        if None in key:
            continue
        index.setdefault(key, []).append(rr)
    out = []
    for lr in left_rows:
        key = tuple(join_key(lr[i]) for i, _ in pairs)
        if None in key:
            continue
        for rr in index.get(key, ()):
            out.append(lr + rr)
    return out


def _drop_duplicate_columns(rows, left: Schema, right: Schema):
    keep = [i for i, n in enumerate(right.names) if n not in left.names]
    nl = len(left.names)
    return [row[:nl] + tuple(row[nl + i] for i in keep) for row in rows]


def _join_pair_indexes(left: Schema, right: Schema, pairs) -> list[tuple[int, int]]:
    if pairs is not None:
        return [(left.index(l), right.index(r)) for l, r in pairs]
    return [(left.index(n), right.index(n)) for n in left.names if n in right.names]


def evaluate(expr: AlgebraExpr, graph: PropertyGraph,
             tables: dict[str, Relation]) -> GraphRelation:
    """Reference evaluation; the result of a relational operator has all-value kinds."""
    ctx = EvalContext(graph, tables)
    schema, rows = _eval(expr, ctx)
    return GraphRelation(schema=tuple(zip(schema.names, schema.kinds)), rows=tuple(rows))


def _eval(expr: AlgebraExpr, ctx: EvalContext) -> tuple[Schema, list[tuple]]:
    k = expr.kind
    if k == BASE_RELATION:
        schema = schema_of(expr)
        if expr.table == DUAL_TABLE:
            if expr.columns:
                raise EvalError("the dual relation has no columns")
            return schema, [()]
        if expr.table not in ctx.tables:
            raise EvalError(f"unknown table {expr.table!r}")
        rel = ctx.tables[expr.table]
        if len(rel.columns) != len(expr.columns):
            raise EvalError(
                f"table {expr.table!r} has {len(rel.columns)} columns, "
                f"expression declares {len(expr.columns)}"
            )
        return schema, list(rel.rows)

    if k == BASE_GRAPH:
        raise EvalError("a bare graph is not a tuple collection; scan vertices instead")

    if k in (REL_SELECT, G_SELECT):
        schema, rows = _eval(expr.children[0], ctx)
        return schema, [r for r in rows if _row_passes(expr.predicate, r, schema, ctx)]

    if k in (REL_PROJECT, G_PROJECT):
        child_schema, rows = _eval(expr.children[0], ctx)
        schema = _projection_schema(child_schema, expr.projection, k == G_PROJECT)
        out = [
            tuple(_eval_operand(op, r, child_schema, ctx) for op, _ in expr.projection)
            for r in rows
        ]
        return schema, out

    if k in (REL_JOIN, G_JOIN):
        left, lrows = _eval(expr.children[0], ctx)
        right, rrows = _eval(expr.children[1], ctx)
        pairs = _join_pair_indexes(left, right, expr.pairs)
        joined = _hash_join(lrows, rrows, left, right, pairs)
        return _concat_drop_dupes(left, right, k == G_JOIN), _drop_duplicate_columns(joined, left, right)

    if k == GET_VERTICES:
        schema = schema_of(expr)
        return schema, [(vid,) for vid in ctx.graph.vertices_with_label(expr.label)]

    if k == EXPAND:
        child, rows = _eval(expr.children[0], ctx)
        schema = Schema(child.names + (expr.var,), child.kinds + (REF_VERTEX,), True)
        src_idx = child.index(expr.source_var)
        out = []
        for row in rows:
            src = row[src_idx]
            if src is None or src < 0:
                continue  # temp vertices have no edges
            for target in _neighbors(ctx.graph, src, expr.edge_type, expr.direction):
                if expr.label is None or ctx.graph.has_label(target, expr.label):
                    out.append(row + (target,))
        return schema, out

    if k == VAR_EXPAND:
        if expr.min_hops != 1:
            raise EvalError("variable-length expansion supports min_hops=1 only")
        child, rows = _eval(expr.children[0], ctx)
        schema = Schema(child.names + (expr.var,), child.kinds + (REF_VERTEX,), True)
        src_idx = child.index(expr.source_var)
        out = []
        cache: dict[int, list[int]] = {}
        for row in rows:
            src = row[src_idx]
            if src is None or src < 0:
                continue
            if src not in cache:
                cache[src] = _reachable(ctx.graph, src, expr.edge_type, expr.direction,
                                        expr.max_hops)
            for target in cache[src]:
                if expr.label is None or ctx.graph.has_label(target, expr.label):
                    out.append(row + (target,))
        return schema, out

    if k == RG_JOIN:
        rel_schema, rel_rows = _eval(expr.children[0], ctx)
        if rel_schema.graph:
            raise EvalError("the shipped side of a relation-to-graph join must be relational")
        pattern, pattern_rows = _eval(expr.children[1], ctx)
        schema = Schema(pattern.names + (expr.var,), pattern.kinds + (REF_VERTEX,), True)
        col_idx = [rel_schema.index(col) for _, _, col in expr.pairs]
        index: dict[tuple, list[int]] = {}
        for row in rel_rows:
            vid = ctx.new_temp_vertex(dict(zip(rel_schema.names, row)))
            key = tuple(join_key(row[i]) for i in col_idx)
            if None in key:
                continue
            index.setdefault(key, []).append(vid)
        probe = [(pattern.index(var), prop) for var, prop, _ in expr.pairs]
        out = []
        for row in pattern_rows:
            key = tuple(join_key(ctx.vertex_prop(row[i], prop)) if row[i] is not None else None
                        for i, prop in probe)
            if None in key:
                continue
            for vid in index.get(key, ()):
                out.append(row + (vid,))
        return schema, out

    if k == GR_JOIN:
        graph_schema, graph_rows = _eval(expr.children[0], ctx)
        materialized = Schema(graph_schema.names,
                              tuple(REF_VALUE for _ in graph_schema.names), False)
        mat_rows = [
            tuple(_materialize_cell(cell, kind, ctx)
                  for cell, kind in zip(row, graph_schema.kinds))
            for row in graph_rows
        ]
        right, rrows = _eval(expr.children[1], ctx)
        if right.graph:
            raise EvalError("the relational side of a graph-to-relation join must be relational")
        pairs = _join_pair_indexes(materialized, right, expr.pairs)
        joined = _hash_join(mat_rows, rrows, materialized, right, pairs)
        return (_concat_drop_dupes(materialized, right, False),
                _drop_duplicate_columns(joined, materialized, right))

    raise EvalError(f"unknown operator kind {k!r}")


def _materialize_cell(cell, kind: str, ctx: EvalContext) -> Value:
    if kind == REF_VALUE or cell is None:
        return cell
    if kind == REF_VERTEX:
        return ctx.vertex_prop(cell, "id")
    if kind == REF_EDGE:
        return cell
    raise EvalError(f"unknown attribute kind {kind!r}")


def _neighbors(g: PropertyGraph, vid: int, edge_type: str, direction: str):
    if direction == "out":
        for eid in g.out_edges(vid):
            if edge_type in g.edge_labels[eid]:
                yield g.endpoints[eid][1]
    else:
        for eid in g.in_edges(vid):
            if edge_type in g.edge_labels[eid]:
                yield g.endpoints[eid][0]


def _reachable(g: PropertyGraph, src: int, edge_type: str, direction: str,
               max_hops: int | None) -> list[int]:
    """Distinct vertices reachable in 1..max_hops typed hops, sorted."""
    seen: set[int] = set()
    frontier = [src]
    hops = 0
    while frontier and (max_hops is None or hops < max_hops):
        hops += 1
        nxt = []
        for v in frontier:
            for w in _neighbors(g, v, edge_type, direction):
                if w not in seen:
                    seen.add(w)
                    nxt.append(w)
        frontier = nxt
    return sorted(seen)


# ---------------------------------------------------------------------------
# Bag comparison
# ---------------------------------------------------------------------------

def _cell_sort_key(v):
    if v is None:
        return (0, "")
    if isinstance(v, bool):
        return (1, str(int(v)))
    if isinstance(v, (int, float)):
        return (2, f"{float(v):+.17e}")
    return (3, str(v))


def canonical_rows(columns, rows):
    """Rows reordered into sorted-column order, then sorted; basis for bag equality."""
    order = sorted(range(len(columns)), key=lambda i: columns[i])
    reordered = [tuple(row[i] for i in order) for row in rows]
    return sorted(reordered, key=lambda row: tuple(_cell_sort_key(c) for c in row))


def bag_equal(columns_a, rows_a, columns_b, rows_b) -> bool:
    """True when both results hold the same bag of rows over the same columns."""
    if sorted(columns_a) != sorted(columns_b):
        return False
    return canonical_rows(columns_a, rows_a) == canonical_rows(columns_b, rows_b)


# ---------------------------------------------------------------------------
# S-expression serialization
# ---------------------------------------------------------------------------

def _quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _write_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return _quote(v)
    if isinstance(v, Comparison):
        return f"(cmp {_quote(v.op)} {_write_value(v.lhs)} {_write_value(v.rhs)})"
    if isinstance(v, Col):
        return f"(col {_quote(v.name)})"
    if isinstance(v, Prop):
        return f"(prop {_quote(v.var)} {_quote(v.prop)})"
    if isinstance(v, Lit):
        return f"(lit {_write_value(v.value)})"
    if isinstance(v, Card):
        return f"(card {_write_value(v.arg)})"
    if isinstance(v, tuple):
        return "(" + " ".join(_write_value(x) for x in v) + ")"
    raise AlgebraError(f"cannot serialize {v!r}")


_SCALAR_FIELDS = ("table", "var", "label", "source_var", "edge_type", "direction",
                  "min_hops", "max_hops", "temp_label")
_STRUCT_FIELDS = ("columns", "predicate", "pairs")


def to_sexpr(expr: AlgebraExpr) -> str:
    parts = [expr.kind]
    for name in _SCALAR_FIELDS:
        v = getattr(expr, name)
        if v is not None:
            parts.append(f":{name} {_write_value(v)}")
    for name in _STRUCT_FIELDS:
        v = getattr(expr, name)
        if v is not None:
            parts.append(f":{name} {_write_value(v)}")
    if expr.projection is not None:
        items = " ".join(f"(as {_write_value(op)} {_quote(nm)})" for op, nm in expr.projection)
        parts.append(f":projection ({items})")
    for child in expr.children:
        parts.append(to_sexpr(child))
    return "(" + " ".join(parts) + ")"


def _tokenize(text: str):
    tokens = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
        elif c in "()":
            tokens.append(c)
            i += 1
        elif c == '"':
            j = i + 1
            buf = []
            while j < n and text[j] != '"':
                if text[j] == "\\":
                    j += 1
                buf.append(text[j])
                j += 1
            if j >= n:
                raise AlgebraError("unterminated string in s-expression")
            tokens.append(("str", "".join(buf)))
            i = j + 1
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in "()":
                j += 1
            tokens.append(("atom", text[i:j]))
            i = j
    return tokens


def _parse_nodes(tokens, pos):
    if tokens[pos] == "(":
        items = []
        pos += 1
        while tokens[pos] != ")":
            node, pos = _parse_nodes(tokens, pos)
            items.append(node)
        return items, pos + 1
    tok = tokens[pos]
    if tok == ")":
        raise AlgebraError("unbalanced ')' in s-expression")
    return tok, pos + 1


def _decode_atom(text: str):
    if text == "none":
        return None
    if text == "true":
        return True
    if text == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def _decode_value(node):
    if isinstance(node, tuple):
        tag, payload = node
        return payload if tag == "str" else _decode_atom(payload)
    if not node:
        return ()
    head = node[0]
    if isinstance(head, tuple) and head[0] == "atom":
        tag = head[1]
        args = [_decode_value(x) for x in node[1:]]
        if tag == "cmp":
            return Comparison(op=args[0], lhs=args[1], rhs=args[2])
        if tag == "col":
            return Col(args[0])
        if tag == "prop":
            return Prop(args[0], args[1])
        if tag == "lit":
            return Lit(args[0])
        if tag == "card":
            return Card(args[0])
        if tag == "as":
            return (args[0], args[1])
    return tuple(_decode_value(x) for x in node)


def _decode_expr(node) -> AlgebraExpr:
    if not isinstance(node, list) or not node:
        raise AlgebraError("malformed expression node")
    head = node[0]
    if not (isinstance(head, tuple) and head[0] == "atom"):
        raise AlgebraError("expression must start with an operator kind")
    kind = head[1]
    fields: dict = {}
    children = []
    i = 1
    while i < len(node):
        item = node[i]
        if isinstance(item, tuple) and item[0] == "atom" and item[1].startswith(":"):
            name = item[1][1:]
            value = _decode_value(node[i + 1])
            if name in ("min_hops", "max_hops") and value is not None:
                value = int(value)
            fields[name] = value
            i += 2
        else:
            children.append(_decode_expr(item))
            i += 1
    return AlgebraExpr(kind, tuple(children), **fields)


def from_sexpr(text: str) -> AlgebraExpr:
    tokens = _tokenize(text)
    if not tokens:
        raise AlgebraError("empty s-expression")
    node, pos = _parse_nodes(tokens, 0)
    if pos != len(tokens):
        raise AlgebraError("trailing tokens after s-expression")
    return _decode_expr(node)
