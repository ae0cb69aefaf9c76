import os

import pytest

from cmgrj.datamodel import (
    Catalog,
    DatasetError,
    Relation,
    load_dataset,
    parse_value,
    save_dataset,
    vertex_property,
)

from conftest import MICRO_FILES, write_micro_dataset


def test_micro_counts(micro):
    g, tables, catalog = micro
    assert catalog.label_counts == {"Forum": 1, "Post": 3, "Person": 2, "University": 2}
    assert catalog.table_rowcounts == {"p": 3, "un": 2, "ci": 2, "co": 2, "tg": 3}
    assert catalog.property_index[("Post", "id")] == 3
    assert catalog.property_index[("University", "department")] == 2
    assert catalog.edge_counts[("Forum", "CONTAINS", "Post")] == 3
    assert catalog.edge_counts[("Person", "KNOWS", "Person")] == 1
    assert len(g.vertices) == 8
    assert len(g.edges) == 9


def test_adjacency_indexes(micro):
    g, _, _ = micro
    forum = g.vertices_with_label("Forum")[0]
    assert len(g.out_edges(forum)) == 3
    assert g.in_edges(forum) == []
    # every out-edge of the forum lands on a Post
    for eid in g.out_edges(forum):
        _, dst = g.endpoints[eid]
        assert g.has_label(dst, "Post")


def test_vertex_property_null_and_missing(micro):
    g, _, _ = micro
    post = g.vertices_with_label("Post")[0]
    assert vertex_property(g, post, "id") == 1
    assert vertex_property(g, post, "no_such_prop") is None
    with pytest.raises(DatasetError):
        vertex_property(g, 10_000, "id")


def test_joinable_pairs(micro):
    _, _, catalog = micro
    assert catalog.is_joinable("Post", "id", "p", "id")
    assert not catalog.is_joinable("Post", "id", "un", "name")
    assert [p.table for p in catalog.pairs_for_table("un")] == ["un"]


def test_round_trip(tmp_path, micro):
    g, tables, catalog = micro
    out = tmp_path / "copy"
    manifest_path = save_dataset(g, tables, str(out))
    g2, tables2, catalog2 = load_dataset(manifest_path)

    def vkey(graph, vid):
        label = next(iter(graph.vertex_labels[vid]))
        return (label, graph.vertex_props[vid]["id"])

    orig_vertices = {vkey(g, v): g.vertex_props[v] for v in g.vertices}
    copy_vertices = {vkey(g2, v): g2.vertex_props[v] for v in g2.vertices}
    assert orig_vertices == copy_vertices

    def edge_multiset(graph):
        out = []
        for eid in graph.edges:
            src, dst = graph.endpoints[eid]
            out.append((vkey(graph, src), next(iter(graph.edge_labels[eid])), vkey(graph, dst)))
        return sorted(out)

    assert edge_multiset(g) == edge_multiset(g2)
    assert tables == tables2
    assert catalog == catalog2


def test_empty_cell_is_null(tmp_path):
    files = dict(MICRO_FILES)
    files["nodes_University.csv"] = "id,name,department\n1,u1,\n2,u2,bio\n"
    d = tmp_path / "nulls"
    manifest = write_micro_dataset(str(d))
    with open(d / "nodes_University.csv", "w", encoding="utf-8") as fh:
        fh.write(files["nodes_University.csv"])
    g, _, catalog = load_dataset(manifest)
    u1 = g.vertices_with_label("University")[0]
    assert vertex_property(g, u1, "department") is None
    # null values do not count towards distinct-value statistics
    assert catalog.property_index[("University", "department")] == 1


def test_dangling_edge_reports_file_and_line(tmp_path):
    d = tmp_path / "bad"
    manifest = write_micro_dataset(str(d))
    with open(d / "edges_CONTAINS.csv", "w", encoding="utf-8") as fh:
        fh.write("src,dst\n1,1\n1,99\n")
    with pytest.raises(DatasetError) as exc:
        load_dataset(manifest)
    assert "edges_CONTAINS.csv" in str(exc.value)
    assert ":3" in str(exc.value)


def test_header_mismatch(tmp_path):
    d = tmp_path / "badheader"
    manifest = write_micro_dataset(str(d))
    with open(d / "table_p.csv", "w", encoding="utf-8") as fh:
        fh.write("id,tag\n1,#a\n")
    with pytest.raises(DatasetError, match="header mismatch"):
        load_dataset(manifest)


def test_unparsable_cell(tmp_path):
    d = tmp_path / "badcell"
    manifest = write_micro_dataset(str(d))
    with open(d / "table_un.csv", "w", encoding="utf-8") as fh:
        fh.write("name,rank,city\nu1,not-a-number,c1\n")
    with pytest.raises(DatasetError, match="not-a-number"):
        load_dataset(manifest)


def test_duplicate_vertex_id(tmp_path):
    d = tmp_path / "dup"
    manifest = write_micro_dataset(str(d))
    with open(d / "nodes_Post.csv", "w", encoding="utf-8") as fh:
        fh.write("id,name\n1,post-a\n1,post-b\n")
    with pytest.raises(DatasetError, match="duplicate vertex id"):
        load_dataset(manifest)


def test_relation_arity_check():
    with pytest.raises(DatasetError, match="arity"):
        Relation(name="r", schema=(("a", "integer"),), rows=((1, 2),))


def test_parse_value_kinds():
    assert parse_value("42", "integer") == 42
    assert parse_value("2.5", "float") == 2.5
    assert parse_value("true", "boolean") is True
    assert parse_value("false", "boolean") is False
    assert parse_value("", "string") is None
    with pytest.raises(DatasetError):
        parse_value("maybe", "boolean")


def test_catalog_defaults():
    cat = Catalog(label_counts={}, table_rowcounts={}, property_index={}, joinable_pairs=())
    assert cat.edge_counts == {}
