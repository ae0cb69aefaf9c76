"""Core data containers: property graph, relational tables, graph relations, catalog.

Everything here is immutable after load. Mutation happens only inside the
loader (or the benchmark generator, which writes files and reloads them).
The null marker for absent property values is Python ``None``; predicate
evaluation treats it as unequal to everything, including itself.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

Value = int | float | str | bool | None

VALUE_KINDS = ("integer", "float", "string", "boolean")

# Reserved prefix for labels minted during cross-model joins; the loader
# rejects datasets that use it so temp labels can never collide.
TEMP_LABEL_PREFIX = "__tmp_"


class DatasetError(Exception):
    """Raised for malformed datasets, with file/line context when available."""

    def __init__(self, message: str, file: str | None = None, line: int | None = None):
        self.file = file
        self.line = line
        ctx = ""
        if file is not None:
            ctx = f" [{file}" + (f":{line}" if line is not None else "") + "]"
        super().__init__(message + ctx)


def parse_value(text: str, kind: str, *, file: str | None = None, line: int | None = None) -> Value:
    """Parse one CSV cell according to its declared kind. Empty cell -> None."""
    if text == "":
        return None
    try:
        if kind == "integer":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "boolean":
            low = text.lower()
            if low in ("true", "1"):
                return True
            if low in ("false", "0"):
                return False
            raise ValueError(text)
        if kind == "string":
            return text
    except ValueError:
        raise DatasetError(f"cannot parse {text!r} as {kind}", file=file, line=line) from None
    raise DatasetError(f"unknown value kind {kind!r}", file=file, line=line)


def render_value(value: Value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


@dataclass(frozen=True)
class Relation:
    """A named bag of tuples. Duplicate rows are permitted."""

    name: str
    schema: tuple[tuple[str, str], ...]  # (column name, value kind)
    rows: tuple[tuple[Value, ...], ...]

    def __post_init__(self):
        for i, row in enumerate(self.rows):
            if len(row) != len(self.schema):
                raise DatasetError(
                    f"relation {self.name}: row {i} has arity {len(row)}, schema has {len(self.schema)}"
                )

    @property
    def columns(self) -> tuple[str, ...]:
        return tuple(c for c, _ in self.schema)

    def column_index(self, name: str) -> int:
        for i, (c, _) in enumerate(self.schema):
            if c == name:
                return i
        raise KeyError(name)

    def __len__(self) -> int:
        return len(self.rows)


# Cell kinds for graph relations: vertex reference, edge reference, or atomic value.
REF_VERTEX = "vertex"
REF_EDGE = "edge"
REF_VALUE = "value"


@dataclass(frozen=True)
class GraphRelation:
    """A bag of tuples whose cells may reference vertices or edges."""

    schema: tuple[tuple[str, str], ...]  # (attribute name, kind in {vertex, edge, value})
    rows: tuple[tuple[Value, ...], ...]

    @property
    def columns(self) -> tuple[str, ...]:
        return tuple(c for c, _ in self.schema)

    def column_index(self, name: str) -> int:
        for i, (c, _) in enumerate(self.schema):
            if c == name:
                return i
        raise KeyError(name)

    def __len__(self) -> int:
        return len(self.rows)


@dataclass(frozen=True)
class JoinablePair:
    """An entity match between a vertex property and a table column."""

    label: str
    prop: str
    table: str
    column: str


@dataclass(frozen=True)
class Catalog:
    """Statistics shared by the planner, explorer, and featurizer.

    ``edge_counts`` keys are (source label, edge type, target label); they back
    the expansion-cardinality estimates of the embedded graph engine.
    """

    label_counts: dict[str, int]
    table_rowcounts: dict[str, int]
    property_index: dict[tuple[str, str], int]  # (label, property) -> distinct non-null values
    joinable_pairs: tuple[JoinablePair, ...]
    edge_counts: dict[tuple[str, str, str], int] = field(default_factory=dict)

    def pairs_for_table(self, table: str) -> list[JoinablePair]:
        return [p for p in self.joinable_pairs if p.table == table]

    def is_joinable(self, label: str, prop: str, table: str, column: str) -> bool:
        return any(
            p.label == label and p.prop == prop and p.table == table and p.column == column
            for p in self.joinable_pairs
        )


class PropertyGraph:
    """In-memory property graph with label and adjacency indexes.

    Vertex/edge ids are opaque integers assigned at load time; they are stable
    within one loaded dataset but not across regenerations. Each vertex keeps a
    non-empty label set; label membership is set containment.
    """

    def __init__(self):
        self.vertices: set[int] = set()
        self.edges: set[int] = set()
        self.endpoints: dict[int, tuple[int, int]] = {}
        self.vertex_labels: dict[int, frozenset[str]] = {}
        self.edge_labels: dict[int, frozenset[str]] = {}
        self.vertex_props: dict[int, dict[str, Value]] = {}
        self.edge_props: dict[int, dict[str, Value]] = {}
        self.label_vocab: set[str] = set()
        self.edge_type_vocab: set[str] = set()
        # label -> sorted vertex ids; built once at load
        self._by_label: dict[str, list[int]] = {}
        self._out_adj: dict[int, list[int]] = {}
        self._in_adj: dict[int, list[int]] = {}
        # Serialization metadata: per-label property schemas and edge specs,
        # mirroring the manifest this graph was loaded from.
        self.meta: dict = {}

    # -- construction -------------------------------------------------------

    def add_vertex(self, vid: int, labels: frozenset[str], props: dict[str, Value]) -> None:
        if not labels:
            raise DatasetError(f"vertex {vid} has an empty label set")
        self.vertices.add(vid)
        self.vertex_labels[vid] = labels
        self.vertex_props[vid] = props
        self.label_vocab.update(labels)

    def add_edge(self, eid: int, src: int, dst: int, labels: frozenset[str],
                 props: dict[str, Value]) -> None:
        if src not in self.vertices or dst not in self.vertices:
            raise DatasetError(f"edge {eid} references unknown vertex {src if src not in self.vertices else dst}")
        if not labels:
            raise DatasetError(f"edge {eid} has an empty label set")
        self.edges.add(eid)
        self.endpoints[eid] = (src, dst)
        self.edge_labels[eid] = labels
        self.edge_props[eid] = props
        self.edge_type_vocab.update(labels)

    def freeze(self) -> None:
        """Build the label and adjacency indexes; call once after loading."""
        by_label: dict[str, list[int]] = {}
        for vid in sorted(self.vertices):
            for lab in self.vertex_labels[vid]:
                by_label.setdefault(lab, []).append(vid)
        self._by_label = by_label
        out_adj: dict[int, list[int]] = {}
        in_adj: dict[int, list[int]] = {}
        for eid in sorted(self.edges):
            src, dst = self.endpoints[eid]
            out_adj.setdefault(src, []).append(eid)
            in_adj.setdefault(dst, []).append(eid)
        self._out_adj = out_adj
        self._in_adj = in_adj

    # -- queries ------------------------------------------------------------

    def vertices_with_label(self, label: str) -> list[int]:
        return self._by_label.get(label, [])

    def out_edges(self, vid: int) -> list[int]:
        return self._out_adj.get(vid, [])

    def in_edges(self, vid: int) -> list[int]:
        return self._in_adj.get(vid, [])

    def has_label(self, vid: int, label: str) -> bool:
        return label in self.vertex_labels.get(vid, frozenset())


def vertex_property(g: PropertyGraph, vid: int, prop: str) -> Value:
    """Stored value of ``prop`` on vertex ``vid``, or None when unset."""
    if vid not in g.vertices:
        raise DatasetError(f"unknown vertex id {vid}")
    return g.vertex_props[vid].get(prop)


# ---------------------------------------------------------------------------
# Dataset directory loading / saving
# ---------------------------------------------------------------------------

def _read_csv(path: str, expected_header: list[str]):
    if not os.path.exists(path):
        raise DatasetError("file not found", file=path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError("missing header row", file=path) from None
        if header != expected_header:
            raise DatasetError(
                f"header mismatch: expected {expected_header}, found {header}", file=path, line=1
            )
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(expected_header):
                raise DatasetError(
                    f"row has {len(row)} cells, expected {len(expected_header)}",
                    file=path, line=lineno,
                )
            yield lineno, row


def load_dataset(manifest_path: str) -> tuple[PropertyGraph, dict[str, Relation], Catalog]:
    """Load a dataset directory from its ``manifest.json``.

    Returns the graph, the named relations, and a catalog whose counts are
    recomputed from the loaded data (never trusted from the manifest).
    """
    if not os.path.exists(manifest_path):
        raise DatasetError("manifest not found", file=manifest_path)
    with open(manifest_path, encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"manifest is not valid JSON: {exc}", file=manifest_path) from None
    base = os.path.dirname(os.path.abspath(manifest_path))

    g = PropertyGraph()
    g.meta = {
        "vertex_labels": manifest.get("vertex_labels", {}),
        "edge_types": manifest.get("edge_types", []),
        "tables": manifest.get("tables", {}),
        "joinable_pairs": manifest.get("joinable_pairs", []),
    }

    # Vertices: ids in the file are scoped per label; internal ids are global.
    next_vid = 0
    key_to_vid: dict[tuple[str, Value], int] = {}
    for label in sorted(manifest.get("vertex_labels", {})):
        spec = manifest["vertex_labels"][label]
        if label.startswith(TEMP_LABEL_PREFIX):
            raise DatasetError(f"label {label!r} uses the reserved temp prefix", file=manifest_path)
        props = [(str(n), str(k)) for n, k in spec["properties"]]
        path = os.path.join(base, spec["file"])
        header = ["id"] + [n for n, _ in props]
        id_kind = spec.get("id_kind", "integer")
        for lineno, row in _read_csv(path, header):
            raw_id = parse_value(row[0], id_kind, file=path, line=lineno)
            if raw_id is None:
                raise DatasetError("vertex id cell is empty", file=path, line=lineno)
            if (label, raw_id) in key_to_vid:
                raise DatasetError(f"duplicate vertex id {raw_id!r} for label {label}", file=path, line=lineno)
            values: dict[str, Value] = {"id": raw_id}
            for (name, kind), cell in zip(props, row[1:]):
                val = parse_value(cell, kind, file=path, line=lineno)
                if val is not None:
                    values[name] = val
            g.add_vertex(next_vid, frozenset([label]), values)
            key_to_vid[(label, raw_id)] = next_vid
            next_vid += 1

    # Edges reference the per-label file ids of their endpoints.
    next_eid = 0
    for spec in manifest.get("edge_types", []):
        etype = spec["type"]
        src_label, dst_label = spec["source"], spec["target"]
        props = [(str(n), str(k)) for n, k in spec.get("properties", [])]
        path = os.path.join(base, spec["file"])
        header = ["src", "dst"] + [n for n, _ in props]
        src_kind = manifest["vertex_labels"].get(src_label, {}).get("id_kind", "integer")
        dst_kind = manifest["vertex_labels"].get(dst_label, {}).get("id_kind", "integer")
        for lineno, row in _read_csv(path, header):
            src_id = parse_value(row[0], src_kind, file=path, line=lineno)
            dst_id = parse_value(row[1], dst_kind, file=path, line=lineno)
            src = key_to_vid.get((src_label, src_id))
            dst = key_to_vid.get((dst_label, dst_id))
            if src is None:
                raise DatasetError(f"dangling edge endpoint {src_label}:{src_id!r}", file=path, line=lineno)
            if dst is None:
                raise DatasetError(f"dangling edge endpoint {dst_label}:{dst_id!r}", file=path, line=lineno)
            values = {}
            for (name, kind), cell in zip(props, row[2:]):
                val = parse_value(cell, kind, file=path, line=lineno)
                if val is not None:
                    values[name] = val
            g.add_edge(next_eid, src, dst, frozenset([etype]), values)
            next_eid += 1
    g.freeze()

    tables: dict[str, Relation] = {}
    for name in sorted(manifest.get("tables", {})):
        spec = manifest["tables"][name]
        cols = [(str(c), str(k)) for c, k in spec["columns"]]
        path = os.path.join(base, spec["file"])
        rows = []
        for lineno, row in _read_csv(path, [c for c, _ in cols]):
            rows.append(tuple(parse_value(cell, kind, file=path, line=lineno)
                              for cell, (_, kind) in zip(row, cols)))
        tables[name] = Relation(name=name, schema=tuple(cols), rows=tuple(rows))

    catalog = build_catalog(g, tables, manifest.get("joinable_pairs", []),
                            manifest_path=manifest_path)
    return g, tables, catalog


def build_catalog(g: PropertyGraph, tables: dict[str, Relation],
                  joinable_pairs: list[dict], manifest_path: str | None = None) -> Catalog:
    """Recount all statistics from the loaded data."""
    label_counts = {lab: len(g.vertices_with_label(lab)) for lab in sorted(g.label_vocab)}
    table_rowcounts = {name: len(rel.rows) for name, rel in tables.items()}

    distinct: dict[tuple[str, str], set] = {}
    for vid in g.vertices:
        for lab in g.vertex_labels[vid]:
            for prop, val in g.vertex_props[vid].items():
                if val is not None:
                    distinct.setdefault((lab, prop), set()).add(val)
    property_index = {k: len(v) for k, v in distinct.items()}

    edge_counts: dict[tuple[str, str, str], int] = {}
    # seed every declared edge spec so empty-but-valid types stay known
    for spec in (g.meta.get("edge_types") or []):
        edge_counts[(spec["source"], spec["type"], spec["target"])] = 0
    for eid in g.edges:
        src, dst = g.endpoints[eid]
        for etype in g.edge_labels[eid]:
            for sl in g.vertex_labels[src]:
                for dl in g.vertex_labels[dst]:
                    key = (sl, etype, dl)
                    edge_counts[key] = edge_counts.get(key, 0) + 1

    pairs = []
    for entry in joinable_pairs:
        jp = JoinablePair(entry["label"], entry["property"], entry["table"], entry["column"])
        if jp.label not in g.label_vocab:
            raise DatasetError(f"joinable pair references unknown label {jp.label!r}", file=manifest_path)
        if jp.table not in tables:
            raise DatasetError(f"joinable pair references unknown table {jp.table!r}", file=manifest_path)
        if jp.column not in tables[jp.table].columns:
            raise DatasetError(
                f"joinable pair references unknown column {jp.table}.{jp.column}", file=manifest_path
            )
        pairs.append(jp)

    return Catalog(
        label_counts=label_counts,
        table_rowcounts=table_rowcounts,
        property_index=property_index,
        joinable_pairs=tuple(pairs),
        edge_counts=edge_counts,
    )


def save_dataset(g: PropertyGraph, tables: dict[str, Relation], out_dir: str) -> str:
    """Write the dataset directory layout; returns the manifest path.

    Uses ``g.meta`` for per-label property schemas and edge specs, so a graph
    loaded by :func:`load_dataset` round-trips exactly.
    """
    os.makedirs(out_dir, exist_ok=True)
    meta = g.meta
    vid_to_key: dict[int, Value] = {v: g.vertex_props[v]["id"] for v in g.vertices}

    for label in sorted(meta["vertex_labels"]):
        spec = meta["vertex_labels"][label]
        props = [(str(n), str(k)) for n, k in spec["properties"]]
        path = os.path.join(out_dir, spec["file"])
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id"] + [n for n, _ in props])
            for vid in g.vertices_with_label(label):
                values = g.vertex_props[vid]
                writer.writerow([render_value(values["id"])]
                                + [render_value(values.get(n)) for n, _ in props])

    edges_by_spec: dict[int, list[int]] = {i: [] for i in range(len(meta["edge_types"]))}
    spec_index = {(s["source"], s["type"], s["target"]): i for i, s in enumerate(meta["edge_types"])}
    for eid in sorted(g.edges):
        src, dst = g.endpoints[eid]
        etype = next(iter(g.edge_labels[eid]))
        sl = next(iter(g.vertex_labels[src]))
        dl = next(iter(g.vertex_labels[dst]))
        idx = spec_index.get((sl, etype, dl))
        if idx is None:
            raise DatasetError(f"edge {eid} ({sl})-[{etype}]->({dl}) matches no edge spec in meta")
        edges_by_spec[idx].append(eid)
    for i, spec in enumerate(meta["edge_types"]):
        props = [(str(n), str(k)) for n, k in spec.get("properties", [])]
        path = os.path.join(out_dir, spec["file"])
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["src", "dst"] + [n for n, _ in props])
            for eid in edges_by_spec[i]:
                src, dst = g.endpoints[eid]
                values = g.edge_props[eid]
                writer.writerow([render_value(vid_to_key[src]), render_value(vid_to_key[dst])]
                                + [render_value(values.get(n)) for n, _ in props])

    for name in sorted(tables):
        rel = tables[name]
        spec = meta["tables"][name]
        path = os.path.join(out_dir, spec["file"])
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(list(rel.columns))
            for row in rel.rows:
                writer.writerow([render_value(v) for v in row])

    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path
