"""Query parsing, validation, and translation into executable plans.

A query file holds two statements separated by a lone ``;`` line: a graph
pattern query (linear MATCH chain, conjunctive WHERE, RETURN with aliases)
and a SQL query whose FROM list includes the ``neo4j`` pseudo-table exposing
the pattern's RETURN columns.

Analysis groups the plain tables into *components*: maximal sets of FROM
aliases connected by join conditions. Each component touches the graph result
through at least one cross-model condition; a component is *movable* when one
of those conditions is an equality backed by a registered vertex-property /
table-column match. :func:`translate` turns one movement choice (the set of
components shipped into the graph engine) into a five-stage candidate plan:

1. one relational pre-query per moved component,
2. pattern filters evaluated inside the graph engine,
3. a single batched relation-to-graph transfer,
4. in-graph joins against the shipped rows,
5. one graph-to-relation transfer feeding the final relational joins.
"""
from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass

from . import algebra as A
from .algebra import Card, Col, Comparison, Lit, Prop
from .datamodel import Catalog, TEMP_LABEL_PREFIX

GRAPH_TABLE = "neo4j"
GRAPH_RESULT = "__graph_result"
PREQUERY_PREFIX = "__pre_"


class ParseError(Exception):
    def __init__(self, message: str, pos: int | None = None, text: str | None = None):
        self.pos = pos
        if pos is not None and text is not None:
            line = text.count("\n", 0, pos) + 1
            col = pos - (text.rfind("\n", 0, pos) + 1) + 1
            message = f"{message} (at line {line}, column {col})"
        super().__init__(message)


class ValidationError(Exception):
    pass


# ---------------------------------------------------------------------------
# Tokenizer (shared by both statement dialects)
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
      (?P<ws>\s+)
    | (?P<num>\d+\.\d+|\d+)
    | (?P<str>'(?:[^'\\]|\\.)*')
    | (?P<sym><=|>=|<>|!=|->|<-|\.\.|[=<>(),.;:*\[\]\-])
    | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str  # num / str / sym / ident
    text: str
    pos: int


def tokenize(text: str) -> list[Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", pos, text)
        if m.lastgroup != "ws":
            tokens.append(Token(m.lastgroup, m.group(), pos))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = tokenize(text)
        self.i = 0

    def peek(self, offset: int = 0) -> Token | None:
        j = self.i + offset
        return self.tokens[j] if j < len(self.tokens) else None

    def at_kw(self, word: str) -> bool:
        t = self.peek()
        return t is not None and t.kind == "ident" and t.text.upper() == word

    def take(self) -> Token:
        t = self.peek()
        if t is None:
            raise ParseError("unexpected end of input", len(self.text), self.text)
        self.i += 1
        return t

    def expect_sym(self, sym: str) -> Token:
        t = self.take()
        if t.kind != "sym" or t.text != sym:
            raise ParseError(f"expected {sym!r}, found {t.text!r}", t.pos, self.text)
        return t

    def expect_kw(self, word: str) -> Token:
        t = self.take()
        if t.kind != "ident" or t.text.upper() != word:
            raise ParseError(f"expected {word}, found {t.text!r}", t.pos, self.text)
        return t

    def expect_ident(self) -> Token:
        t = self.take()
        if t.kind != "ident":
            raise ParseError(f"expected identifier, found {t.text!r}", t.pos, self.text)
        return t

    def done(self) -> bool:
        return self.i >= len(self.tokens)

    # shared literal / operand / condition parsing ---------------------------

    def parse_literal(self):
        t = self.take()
        if t.kind == "num":
            return Lit(float(t.text) if "." in t.text else int(t.text))
        if t.kind == "str":
            body = t.text[1:-1]
            return Lit(re.sub(r"\\(.)", r"\1", body))
        if t.kind == "ident" and t.text.upper() in ("TRUE", "FALSE"):
            return Lit(t.text.upper() == "TRUE")
        if t.kind == "sym" and t.text == "-":
            inner = self.parse_literal()
            return Lit(-inner.value)
        raise ParseError(f"expected literal, found {t.text!r}", t.pos, self.text)

    def parse_ref(self) -> Prop:
        name = self.expect_ident()
        self.expect_sym(".")
        prop = self.expect_ident()
        return Prop(name.text, prop.text)

    def parse_operand(self):
        t = self.peek()
        if t is None:
            raise ParseError("unexpected end of input", len(self.text), self.text)
        if t.kind == "ident" and t.text.lower() == "cardinality":
            self.take()
            self.expect_sym("(")
            inner = self.parse_ref()
            self.expect_sym(")")
            return Card(inner)
        if t.kind == "ident" and t.text.upper() not in ("TRUE", "FALSE"):
            nxt = self.peek(1)
            if nxt is not None and nxt.kind == "sym" and nxt.text == ".":
                return self.parse_ref()
        return self.parse_literal()

    def parse_conditions(self) -> tuple[Comparison, ...]:
        conds = []
        while True:
            lhs = self.parse_operand()
            t = self.take()
            if t.kind != "sym" or t.text not in ("=", "!=", "<>", "<", "<=", ">", ">="):
                raise ParseError(f"expected comparison operator, found {t.text!r}", t.pos, self.text)
            op = "!=" if t.text == "<>" else t.text
            rhs = self.parse_operand()
            conds.append(Comparison(op, lhs, rhs))
            if self.at_kw("AND"):
                self.take()
                continue
            return tuple(conds)


# ---------------------------------------------------------------------------
# Graph pattern statement
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NodePattern:
    var: str
    label: str


@dataclass(frozen=True)
class EdgePattern:
    """One hop of the chain, walking source_var -> var.

    ``direction`` is "out" when the stored edge points along the walk and "in"
    when it points against it. ``max_hops`` of 0 means unbounded; None paired
    with var_length=False means a single hop.
    """

    source_var: str
    var: str
    edge_type: str
    direction: str
    var_length: bool = False
    max_hops: int | None = None


@dataclass(frozen=True)
class PatternQuery:
    nodes: tuple[NodePattern, ...]
    edges: tuple[EdgePattern, ...]
    where: tuple[Comparison, ...]
    returns: tuple[tuple[str, str, str], ...]  # (var, prop, output alias)


def parse_pattern(text: str) -> PatternQuery:
    p = _Parser(text)
    p.expect_kw("MATCH")
    nodes = []
    edges = []

    def parse_node():
        p.expect_sym("(")
        var = p.expect_ident().text
        p.expect_sym(":")
        label = p.expect_ident().text
        p.expect_sym(")")
        nodes.append(NodePattern(var, label))
        return var

    def parse_rel_body():
        p.expect_sym("[")
        p.expect_sym(":")
        etype = p.expect_ident().text
        var_length = False
        max_hops = None
        t = p.peek()
        if t is not None and t.kind == "sym" and t.text == "*":
            p.take()
            var_length = True
            t = p.peek()
            if t is not None and t.kind == "num":
                low = p.take()
                if low.text != "1":
                    raise ParseError("variable-length lower bound must be 1", low.pos, text)
            t = p.peek()
            if t is not None and t.kind == "sym" and t.text == "..":
                p.take()
                t = p.peek()
                if t is not None and t.kind == "num":
                    max_hops = int(p.take().text)
        p.expect_sym("]")
        return etype, var_length, max_hops

    prev = parse_node()
    while True:
        t = p.peek()
        if t is None or t.kind != "sym" or t.text not in ("-", "<-"):
            break
        if t.text == "<-":
            p.take()
            etype, var_length, max_hops = parse_rel_body()
            p.expect_sym("-")
            nxt = parse_node()
            edges.append(EdgePattern(prev, nxt, etype, "in", var_length, max_hops))
        else:
            p.take()
            etype, var_length, max_hops = parse_rel_body()
            p.expect_sym("->")
            nxt = parse_node()
            edges.append(EdgePattern(prev, nxt, etype, "out", var_length, max_hops))
        prev = nxt

    where: tuple[Comparison, ...] = ()
    if p.at_kw("WHERE"):
        p.take()
        where = p.parse_conditions()

    p.expect_kw("RETURN")
    returns = []
    while True:
        ref = p.parse_ref()
        alias = ref.prop
        if p.at_kw("AS"):
            p.take()
            alias = p.expect_ident().text
        returns.append((ref.var, ref.prop, alias))
        t = p.peek()
        if t is not None and t.kind == "sym" and t.text == ",":
            p.take()
            continue
        break
    if not p.done():
        t = p.peek()
        raise ParseError(f"trailing input {t.text!r}", t.pos, text)
    return PatternQuery(tuple(nodes), tuple(edges), where, tuple(returns))


# ---------------------------------------------------------------------------
# SQL statement
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SelectItem:
    alias: str
    column: str
    output: str


@dataclass(frozen=True)
class SqlQuery:
    star: bool
    select: tuple[SelectItem, ...]
    tables: tuple[tuple[str, str], ...]  # (table name, alias)
    where: tuple[Comparison, ...]


def parse_sql(text: str) -> SqlQuery:
    p = _Parser(text)
    p.expect_kw("SELECT")
    star = False
    select = []
    t = p.peek()
    if t is not None and t.kind == "sym" and t.text == "*":
        p.take()
        star = True
    else:
        while True:
            ref = p.parse_ref()
            out = ref.prop
            if p.at_kw("AS"):
                p.take()
                out = p.expect_ident().text
            select.append(SelectItem(ref.var, ref.prop, out))
            t = p.peek()
            if t is not None and t.kind == "sym" and t.text == ",":
                p.take()
                continue
            break
    p.expect_kw("FROM")
    tables = []
    while True:
        name = p.expect_ident().text
        alias = name
        t = p.peek()
        if t is not None and t.kind == "ident" and t.text.upper() not in ("WHERE", "AS"):
            alias = p.take().text
        elif p.at_kw("AS"):
            p.take()
            alias = p.expect_ident().text
        tables.append((name, alias))
        t = p.peek()
        if t is not None and t.kind == "sym" and t.text == ",":
            p.take()
            continue
        break
    where: tuple[Comparison, ...] = ()
    if p.at_kw("WHERE"):
        p.take()
        where = p.parse_conditions()
    if not p.done():
        t = p.peek()
        raise ParseError(f"trailing input {t.text!r}", t.pos, text)
    return SqlQuery(star, tuple(select), tuple(tables), where)


def split_query_file(text: str) -> tuple[str, str]:
    """Split a query file into its pattern and SQL statements."""
    lines = text.splitlines()
    for i, line in enumerate(lines):
        if line.strip() == ";":
            return "\n".join(lines[:i]).strip(), "\n".join(lines[i + 1:]).strip()
    raise ParseError("query file needs a lone ';' line between the two statements")


# ---------------------------------------------------------------------------
# Analysis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CrossCondition:
    """graph_column <op> alias.column linking the graph result to a table."""

    graph_column: str
    alias: str
    column: str
    op: str


@dataclass(frozen=True)
class Component:
    """A maximal join-connected group of FROM aliases (graph alias excluded)."""

    name: str  # the alias carrying the first movable cross condition
    aliases: tuple[str, ...]
    cross: tuple[CrossCondition, ...]
    internal: tuple[Comparison, ...]  # conditions among member aliases
    filters: dict[str, tuple[Comparison, ...]]  # single-alias conditions
    movable: bool


@dataclass
class Query:
    """A parsed, validated two-statement query plus its join structure."""

    pattern: PatternQuery
    sql: SqlQuery
    graph_alias: str
    alias_tables: dict[str, str]
    return_aliases: dict[str, tuple[str, str]]  # output column -> (var, prop)
    components: dict[str, Component]
    graph_filters: tuple[Comparison, ...]  # conditions on graph-result columns only
    select: tuple[SelectItem, ...]  # star-expanded
    name: str = ""

    @property
    def movable(self) -> tuple[str, ...]:
        return tuple(sorted(n for n, c in self.components.items() if c.movable))

    def var_label(self, var: str) -> str:
        for n in self.pattern.nodes:
            if n.var == var:
                return n.label
        raise ValidationError(f"unknown pattern variable {var!r}")


def _cond_aliases(cond: Comparison) -> set[str]:
    out = set()
    for side in (cond.lhs, cond.rhs):
        if isinstance(side, Card):
            side = side.arg
        if isinstance(side, Prop):
            out.add(side.var)
    return out


def parse_query(text: str, catalog: Catalog, name: str = "") -> Query:
    pattern_text, sql_text = split_query_file(text)
    pattern = parse_pattern(pattern_text)
    sql = parse_sql(sql_text)
    return analyze(pattern, sql, catalog, name=name)


def analyze(pattern: PatternQuery, sql: SqlQuery, catalog: Catalog, name: str = "") -> Query:
    # -- pattern side validation
    seen_vars = set()
    for node in pattern.nodes:
        if node.var in seen_vars:
            raise ValidationError(f"pattern variable {node.var!r} bound twice")
        seen_vars.add(node.var)
        if node.label not in catalog.label_counts:
            raise ValidationError(f"unknown vertex label {node.label!r}")
        if node.label.startswith(TEMP_LABEL_PREFIX):
            raise ValidationError(f"label {node.label!r} uses the reserved temp prefix")
    known_types = {etype for (_, etype, _) in catalog.edge_counts}
    for edge in pattern.edges:
        if edge.edge_type not in known_types:
            raise ValidationError(f"unknown edge type {edge.edge_type!r}")
    known_props = {prop for (_, prop) in catalog.property_index} | {"id"}
    for cond in pattern.where:
        for side in (cond.lhs, cond.rhs):
            if isinstance(side, Card):
                side = side.arg
            if isinstance(side, Prop):
                if side.var not in seen_vars:
                    raise ValidationError(f"unknown pattern variable {side.var!r}")
                if side.prop not in known_props:
                    raise ValidationError(f"unknown vertex property {side.prop!r}")
    return_aliases: dict[str, tuple[str, str]] = {}
    for var, prop, alias in pattern.returns:
        if var not in seen_vars:
            raise ValidationError(f"unknown pattern variable {var!r}")
        if prop not in known_props:
            raise ValidationError(f"unknown vertex property {prop!r}")
        if alias in return_aliases:
            raise ValidationError(f"duplicate output column {alias!r}")
        return_aliases[alias] = (var, prop)

    # -- SQL side validation
    graph_alias = None
    alias_tables: dict[str, str] = {}
    for table, alias in sql.tables:
        if alias in alias_tables or alias == graph_alias:
            raise ValidationError(f"duplicate FROM alias {alias!r}")
        if table == GRAPH_TABLE:
            if graph_alias is not None:
                raise ValidationError("the graph result may appear only once in FROM")
            graph_alias = alias
        else:
            if table not in catalog.table_rowcounts:
                raise ValidationError(f"unknown table {table!r}")
            alias_tables[alias] = table
    if graph_alias is None:
        raise ValidationError(f"FROM must include the {GRAPH_TABLE!r} pseudo-table")

    def check_ref(ref: Prop):
        if ref.var == graph_alias:
            if ref.prop not in return_aliases:
                raise ValidationError(
                    f"{ref.var}.{ref.prop} is not an output column of the pattern statement"
                )
        elif ref.var in alias_tables:
            # column existence is checked against the loaded schema at run time;
            # here we only know rowcounts, so check by name when possible
            pass
        else:
            raise ValidationError(f"unknown FROM alias {ref.var!r}")

    select = sql.select
    if sql.star:
        select = tuple(
            SelectItem(graph_alias, col, col) for col in return_aliases
        )
    for item in select:
        check_ref(Prop(item.alias, item.column))
    for cond in sql.where:
        for side in (cond.lhs, cond.rhs):
            if isinstance(side, Card):
                side = side.arg
            if isinstance(side, Prop):
                check_ref(side)

    # -- condition classification & component discovery
    parent: dict[str, str] = {a: a for a in alias_tables}

    def find(a: str) -> str:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a: str, b: str):
        parent[find(a)] = find(b)

    cross_conds: list[CrossCondition] = []
    internal_conds: list[Comparison] = []
    single_filters: dict[str, list[Comparison]] = {a: [] for a in alias_tables}
    graph_filters: list[Comparison] = []
    for cond in sql.where:
        aliases = _cond_aliases(cond)
        table_side = aliases - {graph_alias}
        if not table_side:
            graph_filters.append(cond)
            continue
        if graph_alias in aliases:
            # normalize to (graph column, table ref); flip the operator if needed
            lhs, rhs, op = cond.lhs, cond.rhs, cond.op
            if isinstance(rhs, Prop) and rhs.var == graph_alias:
                lhs, rhs = rhs, lhs
                op = {"<": ">", ">": "<", "<=": ">=", ">=": "<="}.get(op, op)
            if not (isinstance(lhs, Prop) and isinstance(rhs, Prop)):
                raise ValidationError(
                    "conditions mixing the graph result and a table must compare two columns"
                )
            cross_conds.append(CrossCondition(lhs.prop, rhs.var, rhs.prop, op))
            continue
        if len(table_side) == 1:
            single_filters[next(iter(table_side))].append(cond)
            continue
        if len(table_side) == 2:
            a, b = table_side
            union(a, b)
            internal_conds.append(cond)
            continue
        raise ValidationError("a condition may reference at most two FROM aliases")

    groups: dict[str, list[str]] = {}
    for alias in alias_tables:
        groups.setdefault(find(alias), []).append(alias)

    from_order = [a for _, a in sql.tables if a != graph_alias]

    components: dict[str, Component] = {}
    for members in groups.values():
        members_sorted = tuple(sorted(members, key=from_order.index))
        cross = tuple(c for c in cross_conds if c.alias in members)
        if not cross:
            raise ValidationError(
                f"table alias group {members_sorted} is not connected to the graph result"
            )
        internal = tuple(c for c in internal_conds if _cond_aliases(c) <= set(members))
        filters = {a: tuple(single_filters[a]) for a in members_sorted if single_filters[a]}
        movable_anchor = None
        for c in cross:
            if c.op != "=":
                continue
            var, prop = return_aliases[c.graph_column]
            label = next(n.label for n in pattern.nodes if n.var == var)
            if catalog.is_joinable(label, prop, alias_tables[c.alias], c.column):
                movable_anchor = c.alias
                break
        name_alias = movable_anchor if movable_anchor is not None else cross[0].alias
        components[name_alias] = Component(
            name=name_alias,
            aliases=members_sorted,
            cross=cross,
            internal=internal,
            filters=filters,
            movable=movable_anchor is not None,
        )

    return Query(
        pattern=pattern,
        sql=sql,
        graph_alias=graph_alias,
        alias_tables=alias_tables,
        return_aliases=return_aliases,
        components=components,
        graph_filters=tuple(graph_filters),
        select=select,
        name=name,
    )


# ---------------------------------------------------------------------------
# Translation into candidate plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Prequery:
    name: str
    component: str
    expr: A.AlgebraExpr
    columns: tuple[str, ...]


@dataclass(frozen=True)
class MovementStep:
    component: str
    source: str  # prequery name
    temp_var: str
    temp_label: str
    columns: tuple[str, ...]
    rg_pairs: tuple[tuple[str, str, str], ...]  # (pattern var, vertex prop, shipped column)


@dataclass(frozen=True)
class CandidatePlan:
    query: Query
    movement: tuple[str, ...]
    prequeries: tuple[Prequery, ...]
    movements: tuple[MovementStep, ...]
    graph_expr: A.AlgebraExpr
    graph_columns: tuple[str, ...]
    final_expr: A.AlgebraExpr  # over the bound graph-result relation
    combined_expr: A.AlgebraExpr  # single expression, for reference evaluation
    output_columns: tuple[str, ...]
    pruned_vertex_movement: str | None = None  # label whose vertices ship out instead


def _to_rel_operand(op, graph_alias: str | None = None):
    if isinstance(op, Card):
        return Card(_to_rel_operand(op.arg, graph_alias))
    if isinstance(op, Prop):
        if graph_alias is not None and op.var == graph_alias:
            return Col(op.prop)
        return Col(f"{op.var}.{op.prop}")
    return op


def _rel_cond(cond: Comparison, graph_alias: str | None = None) -> Comparison:
    return Comparison(cond.op, _to_rel_operand(cond.lhs, graph_alias),
                      _to_rel_operand(cond.rhs, graph_alias))


def _estimate_alias_rows(q: Query, comp: Component, alias: str, catalog: Catalog) -> float:
    rows = float(catalog.table_rowcounts[q.alias_tables[alias]])
    for cond in comp.filters.get(alias, ()):
        if cond.op == "=":
            rows *= 0.1
        elif cond.op == "!=":
            rows *= 0.9
        else:
            rows *= 1 / 3
    return max(rows, 1.0)


def _component_columns(q: Query, comp: Component) -> set[str]:
    """Qualified columns of ``comp`` needed beyond its own pre-joins."""
    needed: set[str] = set()
    for item in q.select:
        if item.alias in comp.aliases:
            needed.add(f"{item.alias}.{item.column}")
    for c in comp.cross:
        needed.add(f"{c.alias}.{c.column}")
    return needed


def component_expr(q: Query, comp: Component, catalog: Catalog,
                   table_columns: dict[str, tuple[str, ...]]) -> tuple[A.AlgebraExpr, tuple[str, ...]]:
    """Filtered, projected join of a component's member tables.

    Join order is greedy by ascending estimated size; equality conditions
    become join pairs, other internal conditions are applied after all members
    are present. Returns the expression and its output columns.
    """
    def scan(alias: str) -> A.AlgebraExpr:
        cols = tuple(f"{alias}.{c}" for c in table_columns[q.alias_tables[alias]])
        expr = A.base_relation(q.alias_tables[alias], cols)
        filters = comp.filters.get(alias)
        if filters:
            expr = A.rel_select(expr, tuple(_rel_cond(c) for c in filters))
        return expr

    equi = [c for c in comp.internal if c.op == "="
            and isinstance(c.lhs, Prop) and isinstance(c.rhs, Prop)]
    other = [c for c in comp.internal if c not in equi]

    order = sorted(comp.aliases, key=lambda a: _estimate_alias_rows(q, comp, a, catalog))
    placed = [order[0]]
    expr = scan(order[0])
    remaining = [a for a in order[1:]]
    while remaining:
        chosen = None
        for a in remaining:
            pairs = []
            for c in equi:
                va, vb = c.lhs.var, c.rhs.var
                if va == a and vb in placed:
                    pairs.append((f"{vb}.{c.rhs.prop}", f"{va}.{c.lhs.prop}"))
                elif vb == a and va in placed:
                    pairs.append((f"{va}.{c.lhs.prop}", f"{vb}.{c.rhs.prop}"))
            if pairs:
                chosen = (a, pairs)
                break
        if chosen is None:
            # no equality link yet: cross-join the smallest remaining member
            chosen = (remaining[0], None)
        a, pairs = chosen
        expr = A.rel_join(expr, scan(a), pairs=pairs)
        placed.append(a)
        remaining.remove(a)
    if other:
        expr = A.rel_select(expr, tuple(_rel_cond(c) for c in other))
    needed = sorted(_component_columns(q, comp))
    expr = A.rel_project(expr, tuple((Col(c), c) for c in needed))
    return expr, tuple(needed)


def pattern_expr(pattern: PatternQuery) -> A.AlgebraExpr:
    """Logical chain for the pattern statement, filters applied at the end."""
    expr = A.get_vertices(pattern.nodes[0].var, pattern.nodes[0].label)
    label_of = {n.var: n.label for n in pattern.nodes}
    for e in pattern.edges:
        if e.var_length:
            expr = A.var_expand(expr, e.source_var, e.var, e.edge_type, e.direction,
                                label=label_of[e.var], max_hops=e.max_hops)
        else:
            expr = A.expand(expr, e.source_var, e.var, e.edge_type, e.direction,
                            label=label_of[e.var])
    if pattern.where:
        expr = A.g_select(expr, pattern.where)
    return expr


def translate(q: Query, movement: frozenset[str] | set[str], catalog: Catalog,
              table_columns: dict[str, tuple[str, ...]]) -> CandidatePlan:
    """Build the candidate plan that ships exactly ``movement`` into the graph.

    ``table_columns`` maps physical table names to their column lists (from
    the loaded dataset); it fixes the scan schemas.
    """
    movement = frozenset(movement)
    unknown = movement - set(q.movable)
    if unknown:
        raise ValidationError(f"components {sorted(unknown)} cannot be moved")
    moved = tuple(sorted(movement))
    unmoved = tuple(sorted(set(q.components) - movement))

    # step 1: relational pre-queries for moved components
    prequeries = []
    movements = []
    pat = pattern_expr(q.pattern)
    for i, name in enumerate(moved):
        comp = q.components[name]
        expr, cols = component_expr(q, comp, catalog, table_columns)
        pre_name = f"{PREQUERY_PREFIX}{name}"
        prequeries.append(Prequery(pre_name, name, expr, cols))
        rg_pairs = []
        for c in comp.cross:
            if c.op != "=":
                continue
            var, prop = q.return_aliases[c.graph_column]
            rg_pairs.append((var, prop, f"{c.alias}.{c.column}"))
        temp_var = f"__t_{name}"
        temp_label = f"{TEMP_LABEL_PREFIX}{name}_{i}"
        movements.append(MovementStep(name, pre_name, temp_var, temp_label,
                                      cols, tuple(rg_pairs)))
        # steps 3+4: the shipped rows join graph-natively
        pat = A.rg_join(A.base_relation(pre_name, cols), pat,
                        temp_var=temp_var, temp_label=temp_label, pairs=rg_pairs)

    # graph-side projection: every pattern output column, plus moved columns
    # still referenced downstream (their join keys already mirror output columns)
    projection: list[tuple] = [
        (Prop(var, prop), alias) for alias, (var, prop) in q.return_aliases.items()
    ]
    needed_downstream = {
        f"{item.alias}.{item.column}" for item in q.select if item.alias != q.graph_alias
    }
    for comp in q.components.values():
        for c in comp.cross:
            if c.op != "=":
                needed_downstream.add(f"{c.alias}.{c.column}")
    for name in moved:
        comp = q.components[name]
        keys = {f"{c.alias}.{c.column}" for c in comp.cross if c.op == "="}
        for step in movements:
            if step.component != name:
                continue
            for col in step.columns:
                if col in keys and col not in needed_downstream:
                    continue  # join keys mirror pattern outputs unless selected
                projection.append((Prop(step.temp_var, col), col))
    graph_expr = A.g_project(pat, tuple(projection))
    graph_columns = tuple(alias for _, alias in projection)

    # step 5: single transfer back, then the final relational query
    out_names = _output_names(q)

    def finish(start: A.AlgebraExpr, graph_start: bool) -> A.AlgebraExpr:
        expr = start
        for name in unmoved:
            comp = q.components[name]
            comp_e, _ = component_expr(q, comp, catalog, table_columns)
            pairs = [(c.graph_column, f"{c.alias}.{c.column}")
                     for c in comp.cross if c.op == "="]
            if graph_start:
                expr = A.gr_join(expr, comp_e, pairs=pairs or None)
                graph_start = False
            else:
                expr = A.rel_join(expr, comp_e, pairs=pairs or None)
        if graph_start:
            expr = A.gr_join(expr, A.dual())
        residual = [_rel_cond(c, q.graph_alias) for c in q.graph_filters]
        for name in q.components:
            for c in q.components[name].cross:
                if c.op != "=":
                    # both sides are present as columns by now, moved or not
                    residual.append(Comparison(c.op, Col(c.graph_column),
                                               Col(f"{c.alias}.{c.column}")))
        if residual:
            expr = A.rel_select(expr, tuple(residual))
        items = []
        for item, out in zip(q.select, out_names):
            col = item.column if item.alias == q.graph_alias else f"{item.alias}.{item.column}"
            items.append((Col(col), out))
        return A.rel_project(expr, tuple(items))

    final_expr = finish(A.base_relation(GRAPH_RESULT, graph_columns), graph_start=False)
    combined = finish(graph_expr, graph_start=True)
    combined = _inline_prequeries(combined, {p.name: p.expr for p in prequeries})

    return CandidatePlan(
        query=q,
        movement=moved,
        prequeries=tuple(prequeries),
        movements=tuple(movements),
        graph_expr=graph_expr,
        graph_columns=graph_columns,
        final_expr=final_expr,
        combined_expr=combined,
        output_columns=tuple(out_names),
    )


def _output_names(q: Query) -> list[str]:
    """Output column names; duplicates fall back to their qualified form."""
    raw = [item.output for item in q.select]
    names = []
    for i, item in enumerate(q.select):
        if raw.count(raw[i]) > 1:
            names.append(f"{item.alias}.{item.column}"
                         if item.alias != q.graph_alias else item.column)
        else:
            names.append(raw[i])
    return names


def _inline_prequeries(expr: A.AlgebraExpr, bindings: dict[str, A.AlgebraExpr]) -> A.AlgebraExpr:
    """Replace pre-query scans by their defining expressions (for oracle runs)."""
    if expr.kind == A.BASE_RELATION and expr.table in bindings:
        return bindings[expr.table]
    if not expr.children:
        return expr
    children = tuple(_inline_prequeries(c, bindings) for c in expr.children)
    if children == expr.children:
        return expr
    return dataclasses.replace(expr, children=children)


def raw_expr(q: Query, catalog: Catalog,
             table_columns: dict[str, tuple[str, ...]]) -> A.AlgebraExpr:
    """The no-movement combined expression; reference oracle for the query."""
    return translate(q, frozenset(), catalog, table_columns).combined_expr
