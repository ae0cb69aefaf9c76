"""Semi-synthetic benchmark generation: datasets and templated workloads.

Datasets pair a labeled property graph with one relational table per label.
Table rows split into *true* entries (ids sampled from the graph, attributes
copied) and purely synthetic entries whose ids live in a reserved range the
graph never uses — so the cross-model id join has an exactly controlled
cardinality: ``floor(node_count * true_ratio)`` matches per label.

Workloads are built from path templates walked over the dataset's edge
schema: 2–4 hops, a slice of variable-length hops where a self-connecting
edge type exists, one to four joined tables, and randomized conjunctive
filters whose constants are drawn from the generated value domains. Both
generators are deterministic functions of their seed, byte for byte.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .datamodel import PropertyGraph, Relation, load_dataset, save_dataset
from .engines import CostModelConfig, run_candidate
from .frontend import parse_query, translate

log = logging.getLogger(__name__)

SYNTHETIC_ID_BASE = 900_000_000

# every vertex carries these plus "id"; tables add the trailing two columns
GRAPH_PROPS = (("score", "integer"), ("grp", "string"))
TABLE_COLUMNS = (("id", "integer"), ("score", "integer"), ("grp", "string"),
                 ("active", "boolean"), ("payload", "string"))

TRAIN_FRACTION = 385 / 505  # train/test split ratio used throughout


class GenError(Exception):
    """Raised for infeasible generator configurations."""


@dataclass(frozen=True)
class LabelSpec:
    name: str
    count: int


@dataclass(frozen=True)
class EdgeSpec:
    etype: str
    source: str
    target: str
    mean_degree: float
    distribution: str = "uniform"  # or "zipf"


@dataclass(frozen=True)
class TableSpec:
    label: str
    rows: int          # S_l
    true_ratio: float  # TR_l


@dataclass
class GenConfig:
    labels: tuple[LabelSpec, ...]
    edges: tuple[EdgeSpec, ...] = ()
    tables: tuple[TableSpec, ...] = ()
    seed: int = 0


def _validate(cfg: GenConfig) -> None:
    names = [l.name for l in cfg.labels]
    if len(set(names)) != len(names):
        raise GenError("duplicate label names")
    known = set(names)
    for l in cfg.labels:
        if l.count < 0:
            raise GenError(f"negative node count for {l.name}")
    for e in cfg.edges:
        if e.source not in known or e.target not in known:
            raise GenError(f"edge type {e.etype} references unknown labels")
        if e.mean_degree < 0:
            raise GenError(f"negative mean degree for {e.etype}")
        if e.distribution not in ("uniform", "zipf"):
            raise GenError(f"unknown degree distribution {e.distribution!r}")
    seen_tables = set()
    for t in cfg.tables:
        if t.label not in known:
            raise GenError(f"table spec references unknown label {t.label}")
        if t.label in seen_tables:
            raise GenError(f"two table specs for label {t.label}")
        seen_tables.add(t.label)
        if not 0.0 <= t.true_ratio <= 1.0:
            raise GenError(f"true ratio {t.true_ratio} outside [0, 1]")
        if t.rows < true_match_count(_count_of(cfg, t.label), t.true_ratio):
            raise GenError(
                f"table for {t.label} needs {true_match_count(_count_of(cfg, t.label), t.true_ratio)} "
                f"true rows but holds only {t.rows}")


def _count_of(cfg: GenConfig, label: str) -> int:
    return next(l.count for l in cfg.labels if l.name == label)


def true_match_count(node_count: int, true_ratio: float) -> int:
    """floor(N*TR), clamped up to 1 when the ratio is positive but rounds to 0."""
    m = math.floor(node_count * true_ratio)
    if m == 0 and true_ratio > 0 and node_count > 0:
        log.warning("true-match count for ratio %s rounds to 0; clamping to 1",
                    true_ratio)
        return 1
    return m


def table_name(label: str) -> str:
    return label.lower()


def _degrees(rng: np.random.Generator, n: int, spec: EdgeSpec) -> np.ndarray:
    if n == 0:
        return np.zeros(0, dtype=int)
    if spec.distribution == "uniform":
        high = max(1, int(round(2 * spec.mean_degree)) + 1)
        return rng.integers(0, high, size=n)
    # heavy tail: zipf-shaped weights scaled to the requested edge budget
    weights = np.minimum(rng.zipf(1.2, size=n), 50).astype(float)
    budget = int(round(n * spec.mean_degree))
    if weights.sum() == 0:
        return np.zeros(n, dtype=int)
    return np.floor(weights * budget / weights.sum()).astype(int)


def generate_dataset(cfg: GenConfig, out_dir: str) -> str:
    """Write a dataset directory; returns the manifest path."""
    _validate(cfg)
    rng = np.random.default_rng(cfg.seed)

    g = PropertyGraph()
    meta = {"vertex_labels": {}, "edge_types": [], "tables": {},
            "joinable_pairs": []}
    vid = 0
    label_vids: dict[str, list[int]] = {}
    label_props: dict[str, list[dict]] = {}
    for spec in cfg.labels:
        vids = []
        props_here = []
        scores = rng.integers(0, 100, size=spec.count)
        grps = rng.integers(0, 10, size=spec.count)
        for i in range(spec.count):
            props = {"id": i, "score": int(scores[i]), "grp": f"g{grps[i]}"}
            g.add_vertex(vid, frozenset([spec.name]), props)
            vids.append(vid)
            props_here.append(props)
            vid += 1
        label_vids[spec.name] = vids
        label_props[spec.name] = props_here
        meta["vertex_labels"][spec.name] = {
            "file": f"{spec.name}.csv",
            "properties": [list(p) for p in GRAPH_PROPS],
            "id_kind": "integer",
        }

    eid = 0
    for espec in cfg.edges:
        srcs = label_vids[espec.source]
        tgts = label_vids[espec.target]
        degrees = _degrees(rng, len(srcs), espec)
        if tgts:
            for si, d in enumerate(degrees):
                if d == 0:
                    continue
                picks = rng.integers(0, len(tgts), size=int(d))
                for t in picks:
                    if espec.source == espec.target and tgts[t] == srcs[si]:
                        continue  # no self loops
                    g.add_edge(eid, srcs[si], tgts[t], frozenset([espec.etype]), {})
                    eid += 1
        meta["edge_types"].append({
            "source": espec.source, "type": espec.etype, "target": espec.target,
            "file": f"{espec.source}_{espec.etype}_{espec.target}.csv",
            "properties": [],
        })
    g.freeze()

    tables: dict[str, Relation] = {}
    synth_counter = 0
    for tspec in cfg.tables:
        n = _count_of(cfg, tspec.label)
        m = true_match_count(n, tspec.true_ratio)
        chosen = rng.choice(n, size=m, replace=False) if m else np.zeros(0, dtype=int)
        rows = []
        for i in sorted(int(c) for c in chosen):
            p = label_props[tspec.label][i]
            rows.append((p["id"], p["score"], p["grp"],
                         bool(rng.integers(0, 2)), f"p{rng.integers(0, 1000)}"))
        for _ in range(tspec.rows - m):
            rows.append((SYNTHETIC_ID_BASE + synth_counter,
                         int(rng.integers(0, 100)), f"g{rng.integers(0, 10)}",
                         bool(rng.integers(0, 2)), f"p{rng.integers(0, 1000)}"))
            synth_counter += 1
        order = rng.permutation(len(rows))
        name = table_name(tspec.label)
        tables[name] = Relation(name=name, schema=TABLE_COLUMNS,
                                rows=tuple(rows[i] for i in order))
        meta["tables"][name] = {"file": f"{name}.csv",
                                "columns": [list(c) for c in TABLE_COLUMNS]}
        meta["joinable_pairs"].append({"label": tspec.label, "property": "id",
                                       "table": name, "column": "id"})

    g.meta = meta
    return save_dataset(g, tables, out_dir)


# ---------------------------------------------------------------------------
# Table-derived presets (social-network shape at adjustable scale)
# ---------------------------------------------------------------------------

_NODE_COUNTS = {
    "Tag": 16_080, "TagClass": 71, "Comment": 1_739_438, "Forum": 100_827,
    "Person": 10_295, "Post": 1_121_226, "Country": 111, "City": 1_343,
    "Company": 1_575, "University": 6_380,
}

_TABLE_PROFILES = {
    "t1": {
        "Tag": (50_000, 0.5), "TagClass": (1_000, 0.8), "Comment": (1_000_000, 0.001),
        "Forum": (500_000, 0.05), "Person": (50_000, 0.3), "Post": (1_000_000, 0.001),
        "Country": (5_000, 0.8), "City": (5_000, 0.8), "Company": (10_000, 0.8),
        "University": (10_000, 0.8),
    },
    "t2": {
        "Tag": (100_000, 0.1), "TagClass": (1_000, 0.8), "Comment": (1_000_000, 0.0001),
        "Forum": (100_000, 0.1), "Person": (50_000, 0.3), "Post": (1_000_000, 0.0001),
        "Country": (5_000, 0.5), "City": (5_000, 0.5), "Company": (50_000, 1.0),
        "University": (50_000, 1.0),
    },
}

# zipf where posts/comments attach, uniform elsewhere
_EDGE_SHAPE = (
    ("KNOWS", "Person", "Person", 3.0, "uniform"),
    ("REPLY_OF", "Comment", "Comment", 0.6, "zipf"),
    ("COMMENT_ON", "Comment", "Post", 0.4, "zipf"),
    ("HAS_CREATOR", "Comment", "Person", 1.0, "zipf"),
    ("HAS_CREATOR", "Post", "Person", 1.0, "zipf"),
    ("CONTAINER_OF", "Forum", "Post", 8.0, "zipf"),
    ("HAS_MEMBER", "Forum", "Person", 3.0, "uniform"),
    ("LIKES", "Person", "Post", 6.0, "zipf"),
    ("HAS_TAG", "Post", "Tag", 1.0, "zipf"),
    ("HAS_INTEREST", "Person", "Tag", 2.0, "uniform"),
    ("HAS_TYPE", "Tag", "TagClass", 1.0, "uniform"),
    ("IS_LOCATED_IN", "Person", "City", 1.0, "uniform"),
    ("IS_PART_OF", "City", "Country", 1.0, "uniform"),
    ("STUDY_AT", "Person", "University", 0.8, "uniform"),
    ("WORK_AT", "Person", "Company", 1.2, "uniform"),
)


def preset_config(profile: str, scale: float = 0.01, seed: int = 0) -> GenConfig:
    """Social-network dataset shape; ``scale`` shrinks all row counts (default 1%)."""
    if profile not in _TABLE_PROFILES:
        raise GenError(f"unknown profile {profile!r}; have {sorted(_TABLE_PROFILES)}")
    if scale <= 0:
        raise GenError("scale must be positive")
    labels = tuple(LabelSpec(name, max(1, int(count * scale)))
                   for name, count in _NODE_COUNTS.items())
    edges = tuple(EdgeSpec(t, s, d, mean, dist) for t, s, d, mean, dist in _EDGE_SHAPE)
    tables = tuple(
        TableSpec(label, max(1, int(rows * scale)), ratio)
        for label, (rows, ratio) in _TABLE_PROFILES[profile].items()
    )
    return GenConfig(labels=labels, edges=edges, tables=tables, seed=seed)


# ---------------------------------------------------------------------------
# Workload generation
# ---------------------------------------------------------------------------

@dataclass
class _SchemaView:
    """What the template walker needs to know about a loaded dataset."""

    forward: dict[str, list[tuple[str, str, str]]] = field(default_factory=dict)
    backward: dict[str, list[tuple[str, str, str]]] = field(default_factory=dict)
    self_types: list[tuple[str, str]] = field(default_factory=list)  # (label, etype)
    label_tables: dict[str, list] = field(default_factory=dict)
    graph_domains: dict[tuple[str, str], list] = field(default_factory=dict)
    table_domains: dict[tuple[str, str], list] = field(default_factory=dict)


def _schema_view(g, tables, catalog) -> _SchemaView:
    view = _SchemaView()
    for (src, etype, dst), count in sorted(catalog.edge_counts.items()):
        if count == 0:
            continue
        view.forward.setdefault(src, []).append((src, etype, dst))
        view.backward.setdefault(dst, []).append((src, etype, dst))
        if src == dst:
            view.self_types.append((src, etype))
    for pair in catalog.joinable_pairs:
        view.label_tables.setdefault(pair.label, []).append(pair)
    for label in sorted(catalog.label_counts):
        for vid in g.vertices_with_label(label)[:200]:
            for prop, value in g.vertex_props[vid].items():
                if prop == "id" or value is None:
                    continue
                view.graph_domains.setdefault((label, prop), []).append(value)
    for name in sorted(tables):
        rel = tables[name]
        for row in rel.rows[:200]:
            for (col, _), value in zip(rel.schema, row):
                if col == "id" or value is None or isinstance(value, bool):
                    continue
                view.table_domains.setdefault((name, col), []).append(value)
    return view


def _graph_filter(rng, view: _SchemaView, var: str, label: str) -> str | None:
    keys = [k for k in view.graph_domains if k[0] == label]
    if not keys:
        return None
    label_, prop = keys[rng.integers(0, len(keys))]
    domain = view.graph_domains[(label_, prop)]
    value = domain[rng.integers(0, len(domain))]
    if isinstance(value, str):
        op = ["=", "!="][rng.integers(0, 2)]
        return f"{var}.{prop} {op} '{value}'"
    op = ["<", "<=", ">", ">=", "=", "!="][rng.integers(0, 6)]
    return f"{var}.{prop} {op} {value}"


def _table_filter(rng, view: _SchemaView, alias: str, tname: str) -> str | None:
    keys = [k for k in view.table_domains if k[0] == tname]
    if not keys:
        return None
    _, col = keys[rng.integers(0, len(keys))]
    domain = view.table_domains[(tname, col)]
    value = domain[rng.integers(0, len(domain))]
    if isinstance(value, str):
        op = ["=", "!="][rng.integers(0, 2)]
        return f"{alias}.{col} {op} '{value}'"
    op = ["<", "<=", ">", ">=", "!="][rng.integers(0, 5)]
    return f"{alias}.{col} {op} {value}"


def _template(rng, view: _SchemaView, want_var_length: bool) -> str | None:
    """One random query text, or None when the walk dead-ends."""
    n_hops = int(rng.integers(2, 5))
    starts = sorted(set(view.forward) | set(view.backward))
    if not starts:
        return None
    label = starts[rng.integers(0, len(starts))]
    var_names = "abcdefgh"
    chain = [f"({var_names[0]}:{label})"]
    var_labels = [(var_names[0], label)]
    var_hop_done = False
    for h in range(n_hops):
        var = var_names[h + 1]
        if want_var_length and not var_hop_done:
            selfs = [(l, t) for l, t in view.self_types if l == label]
            if selfs:
                _, etype = selfs[rng.integers(0, len(selfs))]
                upper = ["*1..2", "*1..3", "*"][rng.integers(0, 3)]
                chain.append(f"-[:{etype}{upper}]->({var}:{label})")
                var_labels.append((var, label))
                var_hop_done = True
                continue
        fwd = view.forward.get(label, ())
        bwd = view.backward.get(label, ())
        options = [("f", s) for s in fwd] + [("b", s) for s in bwd]
        if not options:
            return None
        kind, (src, etype, dst) = options[rng.integers(0, len(options))]
        if kind == "f":
            chain.append(f"-[:{etype}]->({var}:{dst})")
            label = dst
        else:
            chain.append(f"<-[:{etype}]-({var}:{src})")
            label = src
        var_labels.append((var, label))
    if want_var_length and not var_hop_done:
        return None

    joinable_vars = [(v, l) for v, l in var_labels if l in view.label_tables]
    if not joinable_vars:
        return None
    k = int(rng.integers(1, min(4, len(joinable_vars)) + 1))
    picked_idx = rng.choice(len(joinable_vars), size=k, replace=False)
    picked = [joinable_vars[i] for i in sorted(int(i) for i in picked_idx)]

    returns = [f"{v}.id AS {v}_id" for v, _ in picked]
    extra_out = None
    if rng.random() < 0.4:
        v, l = var_labels[rng.integers(0, len(var_labels))]
        if (l, "score") in view.graph_domains:
            extra_out = f"{v}.score AS {v}_score"
            returns.append(extra_out)
    graph_where = []
    for _ in range(int(rng.integers(0, 3))):
        v, l = var_labels[rng.integers(0, len(var_labels))]
        f = _graph_filter(rng, view, v, l)
        if f:
            graph_where.append(f)

    pattern = f"MATCH {''.join(chain)}"
    if graph_where:
        pattern += " WHERE " + " AND ".join(graph_where)
    pattern += " RETURN " + ", ".join(returns)

    froms = ["neo4j g"]
    conds = []
    selects = [f"g.{v}_id" for v, _ in picked]
    if extra_out:
        selects.append(f"g.{extra_out.split(' AS ')[1]}")
    for i, (v, l) in enumerate(picked):
        pair = view.label_tables[l][0]
        alias = f"t{i}"
        froms.append(f"{pair.table} {alias}")
        conds.append(f"g.{v}_id = {alias}.{pair.column}")
        cols = sorted({c for (tn, c) in view.table_domains if tn == pair.table})
        if cols:
            col = cols[rng.integers(0, len(cols))]
            selects.append(f"{alias}.{col}")
        for _ in range(int(rng.integers(0, 3))):
            f = _table_filter(rng, view, alias, pair.table)
            if f:
                conds.append(f)
    sql = f"SELECT {', '.join(selects)} FROM {', '.join(froms)}"
    if conds:
        sql += " WHERE " + " AND ".join(conds)
    return f"{pattern}\n;\n{sql}\n"


def generate_workload(manifest_path: str, count: int, seed: int = 0,
                      out_dir: str | None = None, min_nonempty: float = 0.5,
                      var_length_fraction: float = 0.1,
                      max_attempts_per_query: int = 200) -> list[str]:
    """Emit ``count`` query files plus a train/test split listing.

    Every emitted query parses against the dataset; at least
    ``ceil(count*min_nonempty)`` of them return rows under the raw plan, and
    at least ``ceil(count*var_length_fraction)`` use a variable-length hop
    when the schema has a self-connecting edge type.
    """
    g, tables, catalog = load_dataset(manifest_path)
    view = _schema_view(g, tables, catalog)
    if out_dir is None:
        out_dir = os.path.join(os.path.dirname(os.path.abspath(manifest_path)), "workload")
    os.makedirs(out_dir, exist_ok=True)

    rng = np.random.default_rng(seed)
    cfg = CostModelConfig(mode="synthetic")
    table_columns = {n: r.columns for n, r in tables.items()}
    need_nonempty = math.ceil(count * min_nonempty)
    need_var = math.ceil(count * var_length_fraction) if view.self_types else 0

    accepted: list[tuple[str, bool, bool]] = []  # (text, nonempty, var-length)
    budget = max_attempts_per_query * max(count, 1)
    attempts = 0
    while len(accepted) < count:
        if attempts >= budget:
            raise GenError(
                f"workload infeasible: {len(accepted)}/{count} queries after "
                f"{attempts} attempts")
        attempts += 1
        got_var = sum(1 for _, _, v in accepted if v)
        remaining = count - len(accepted)
        force_var = need_var - got_var >= remaining
        want_var = bool(view.self_types) and (force_var or rng.random() < 0.25)
        text = _template(rng, view, want_var)
        if text is None:
            continue
        try:
            q = parse_query(text, catalog)
            raw = translate(q, frozenset(), catalog, table_columns)
            out = run_candidate(raw, g, tables, catalog, cfg)
        except Exception:
            continue
        nonempty = len(out.result.rows) > 0
        got_nonempty = sum(1 for _, ne, _ in accepted if ne)
        if not nonempty and remaining <= need_nonempty - got_nonempty:
            continue  # every remaining slot is owed to a nonempty query
        if not want_var and force_var:
            continue
        accepted.append((text, nonempty, want_var))

    paths = []
    for i, (text, _, _) in enumerate(accepted):
        path = os.path.join(out_dir, f"q{i:03d}.cmq")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
        paths.append(path)

    n_train = int(round(count * TRAIN_FRACTION))
    order = [int(i) for i in rng.permutation(count)]
    names = [f"q{i:03d}.cmq" for i in range(count)]
    split = {
        "train": sorted(names[i] for i in order[:n_train]),
        "test": sorted(names[i] for i in order[n_train:]),
    }
    with open(os.path.join(out_dir, "split.json"), "w", encoding="utf-8") as fh:
        json.dump(split, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths
