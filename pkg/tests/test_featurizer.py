import math

import numpy as np
import pytest

from cmgrj.engines import plan_graph_query
from cmgrj.featurizer import (
    FeatureConfig,
    FeaturizeError,
    OP_VOCAB,
    build_structures,
    card_bounds,
    dump_features,
    encode_structures,
    feature_config_from_catalog,
    featurize,
    load_features,
    log_card,
)
from cmgrj.frontend import parse_query, translate

from conftest import MICRO_QUERY_TEXT


def micro_parts(micro, movement):
    g, tables, catalog = micro
    q = parse_query(MICRO_QUERY_TEXT, catalog, name="micro")
    cols = {n: r.columns for n, r in tables.items()}
    plan = translate(q, movement, catalog, cols)
    raw = translate(q, frozenset(), catalog, cols)
    estimated = plan_graph_query(raw.graph_expr, catalog)
    return catalog, plan, estimated


def test_vocab_and_width():
    assert len(OP_VOCAB) == 10
    assert len(set(OP_VOCAB)) == 10
    cfg = FeatureConfig(tables=("a", "b"), labels=("X", "Y", "Z"), bounds=(0.0, 1.0))
    assert cfg.width == 10 + 2 + 2 + 3


def test_log_card():
    assert log_card(None) is None
    assert log_card(0) == 0.0
    assert log_card(1) == 0.0
    assert log_card(math.e) == pytest.approx(1.0)


def test_raw_tree_unmodified(micro):
    catalog, plan, estimated = micro_parts(micro, frozenset())
    ps = build_structures(plan, estimated, catalog)
    ops = [n.op for n in ps.tree]
    assert "NodeFromRelation" not in ops
    assert "NodeHashJoin" not in ops
    assert ps.tree[0].op == "Produce"


@pytest.mark.parametrize("movement,k", [
    (frozenset({"p"}), 1), (frozenset({"un"}), 1), (frozenset({"p", "un"}), 2),
])
def test_insertion_adds_two_nodes_per_movement(micro, movement, k):
    catalog, plan, estimated = micro_parts(micro, movement)
    base = build_structures(micro_parts(micro, frozenset())[1], estimated, catalog)
    ps = build_structures(plan, estimated, catalog)
    assert len(ps.tree) == len(base.tree) + 2 * k
    ops = [n.op for n in ps.tree]
    assert ops.count("NodeFromRelation") == k
    assert ops.count("NodeHashJoin") == k


def test_inserted_join_sits_above_the_joined_label(micro):
    catalog, plan, estimated = micro_parts(micro, frozenset({"p"}))
    ps = build_structures(plan, estimated, catalog)
    joins = [i for i, n in enumerate(ps.tree) if n.op == "NodeHashJoin"]
    assert len(joins) == 1
    join = ps.tree[joins[0]]
    left, right = join.children
    assert ps.tree[right].op == "NodeFromRelation"
    assert ps.tree[right].card == 3.0  # table rowcount, not shipped rows
    assert ps.tree[right].tables == {"p"}
    assert join.card is None  # unknown output cardinality
    assert "Post" in ps.tree[left].labels  # grafted above the Post-visiting node


def test_bitmaps_union_over_descendants(micro):
    catalog, plan, estimated = micro_parts(micro, frozenset({"p", "un"}))
    ps = build_structures(plan, estimated, catalog)
    root = ps.tree[0]
    # component "un" spans three tables; its payload ships all of them
    assert root.tables == {"p", "un", "ci", "co"}
    assert root.labels == {"Forum", "Post", "Person", "University"}
    for node in ps.tree:
        for ci in node.children:
            if ci >= 0:
                assert ps.tree[ci].tables <= node.tables
                assert ps.tree[ci].labels <= node.labels


def test_join_graph_star_shape(micro):
    catalog, plan, estimated = micro_parts(micro, frozenset())
    ps = build_structures(plan, estimated, catalog)
    ops = [n.op for n in ps.graph]
    assert ops.count("Neo4jResult") == 1
    assert ops.count("Join") == 4          # one per unmoved table occurrence
    assert ops.count("TableScan") == 4
    assert ps.graph[0].op == "Neo4jResult"
    # every edge touches a Join; the center never links directly to a scan
    for a, b in ps.graph_edges:
        assert "Join" in (ps.graph[a].op, ps.graph[b].op)
    degree0 = sum(1 for a, b in ps.graph_edges if 0 in (a, b))
    assert degree0 == 4


def test_join_graph_shrinks_with_movement(micro):
    catalog, plan, estimated = micro_parts(micro, frozenset({"p"}))
    ps = build_structures(plan, estimated, catalog)
    ops = [n.op for n in ps.graph]
    assert ops.count("Join") == 3  # the three-table component stayed behind
    left = {t for n in ps.graph if n.op == "TableScan" for t in n.tables}
    assert left == {"un", "ci", "co"}
    catalog, plan, estimated = micro_parts(micro, frozenset({"p", "un"}))
    ps = build_structures(plan, estimated, catalog)
    assert [n.op for n in ps.graph] == ["Neo4jResult"]
    assert ps.graph_edges == ()


def test_center_summarizes_whole_tree(micro):
    catalog, plan, estimated = micro_parts(micro, frozenset({"p"}))
    ps = build_structures(plan, estimated, catalog)
    assert ps.graph[0].tables == ps.tree[0].tables
    assert ps.graph[0].labels == ps.tree[0].labels


def test_join_cards_are_input_sums(micro):
    catalog, plan, estimated = micro_parts(micro, frozenset())
    ps = build_structures(plan, estimated, catalog)
    center = ps.graph[0]
    for i, node in enumerate(ps.graph):
        if node.op == "Join":
            scan = ps.graph[i - 1]
            assert node.card == center.card + scan.card


def test_minmax_closed_form():
    lo_v, hi_v = 4.0, 400.0
    cfg = FeatureConfig(tables=(), labels=(),
                        bounds=(math.log(lo_v), math.log(hi_v)))
    from cmgrj.featurizer import RawNode, PlanStructures
    mk = lambda c: RawNode("Filter", c, frozenset(), frozenset(), (-1, -1))
    ps = PlanStructures("x", (), (mk(lo_v), mk(hi_v), mk(math.sqrt(lo_v * hi_v)),
                                 mk(8000.0), mk(None)), (), ())
    pf = encode_structures(ps, cfg)
    col = len(OP_VOCAB)
    assert pf.tree[0, col] == pytest.approx(0.0)
    assert pf.tree[1, col] == pytest.approx(1.0)
    assert pf.tree[2, col] == pytest.approx(0.5)
    assert pf.tree[3, col] == 1.0  # clamped above the corpus max
    assert pf.tree[4, col] == 0.0 and pf.tree[4, col + 1] == 1.0  # unknown
    assert pf.tree[0, col + 1] == 0.0


def test_card_bounds_over_corpus(micro):
    catalog, plan0, estimated = micro_parts(micro, frozenset())
    catalog, plan1, _ = micro_parts(micro, frozenset({"p"}))
    structs = [build_structures(plan0, estimated, catalog),
               build_structures(plan1, estimated, catalog)]
    lo, hi = card_bounds(structs)
    assert lo <= hi
    known = [log_card(n.card) for ps in structs for n in ps.tree + ps.graph
             if n.card is not None]
    assert lo == min(known) and hi == max(known)


def test_featurize_deterministic(micro):
    catalog, plan, estimated = micro_parts(micro, frozenset({"p"}))
    cfg = feature_config_from_catalog(catalog, (0.0, 10.0))
    a = featurize(plan, estimated, catalog, cfg)
    b = featurize(plan, estimated, catalog, cfg)
    assert np.array_equal(a.tree, b.tree)
    assert np.array_equal(a.graph, b.graph)
    assert np.array_equal(a.tree_children, b.tree_children)


def test_featurize_leaves_estimated_untouched(micro):
    catalog, plan, estimated = micro_parts(micro, frozenset({"p", "un"}))
    from cmgrj.engines import plan_text
    before = plan_text(estimated)
    build_structures(plan, estimated, catalog)
    assert plan_text(estimated) == before


def test_mismatched_estimated_plan_rejected(micro):
    g, tables, catalog = micro
    q = parse_query(MICRO_QUERY_TEXT, catalog, name="micro")
    cols = {n: r.columns for n, r in tables.items()}
    plan = translate(q, frozenset({"p"}), catalog, cols)
    other = parse_query(
        "MATCH (u:University) RETURN u.department AS f\n;\nSELECT g.f FROM neo4j g",
        catalog)
    other_est = plan_graph_query(translate(other, frozenset(), catalog, cols).graph_expr,
                                 catalog)
    with pytest.raises(FeaturizeError, match="unbound"):
        build_structures(plan, other_est, catalog)


def test_dump_and_load_round_trip(tmp_path, micro):
    catalog, plan, estimated = micro_parts(micro, frozenset({"p"}))
    cfg = feature_config_from_catalog(catalog, (0.0, 8.0))
    feats = [featurize(plan, estimated, catalog, cfg),
             featurize(micro_parts(micro, frozenset())[1], estimated, catalog, cfg)]
    path = str(tmp_path / "f.jsonl")
    dump_features(path, cfg, feats)
    cfg2, loaded = load_features(path)
    assert cfg2 == cfg
    assert len(loaded) == 2
    for a, b in zip(feats, loaded):
        assert a.movement == b.movement
        assert np.allclose(a.tree, b.tree)
        assert np.allclose(a.graph, b.graph)
        assert np.array_equal(a.graph_edges, b.graph_edges)


def test_load_rejects_missing_header(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"record": "plan"}\n')
    with pytest.raises(FeaturizeError, match="header"):
        load_features(str(path))
