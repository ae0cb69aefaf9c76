import math

import numpy as np
import pytest

from cmgrj.baselines import (
    BaselineConfig,
    RegressionSample,
    predict_log_latency,
    regression_loss_and_gradients,
    scan_labels,
    select_fvn,
    select_rlm,
    select_ts,
    train_rlm,
)
from cmgrj.cmlero import ModelError, TrainHyper, gradient_check, init_weights
from cmgrj.datamodel import PropertyGraph, Relation, build_catalog
from cmgrj.engines import plan_graph_query
from cmgrj.explorer import enumerate_candidates
from cmgrj.featurizer import FeatureConfig, PlanFeatures
from cmgrj.frontend import parse_query

from conftest import MICRO_QUERY_TEXT

WIDTH = FeatureConfig(tables=(), labels=(), bounds=(0.0, 1.0)).width


def micro_space(micro):
    g, tables, catalog = micro
    q = parse_query(MICRO_QUERY_TEXT, catalog)
    return catalog, enumerate_candidates(q, catalog, tables)


def sized_instance(sizes):
    """One label, one table per entry of ``sizes`` with that many rows."""
    g = PropertyGraph()
    for i in range(4):
        g.add_vertex(i, frozenset(["L"]), {"id": i})
    g.freeze()
    tables, pairs = {}, []
    for t, n in enumerate(sizes):
        name = f"t{t}"
        rows = tuple((i, f"w{i}") for i in range(n))
        tables[name] = Relation(name=name, schema=(("id", "integer"), ("w", "string")),
                                rows=rows)
        pairs.append({"label": "L", "property": "id", "table": name, "column": "id"})
    catalog = build_catalog(g, tables, pairs)
    froms = ", ".join(["neo4j g"] + list(tables))
    conds = " AND ".join(f"g.x = {name}.id" for name in tables)
    text = f"MATCH (a:L) RETURN a.id AS x\n;\nSELECT g.x FROM {froms} WHERE {conds}"
    q = parse_query(text, catalog)
    return catalog, enumerate_candidates(q, catalog, tables)


def test_config_validation():
    cfg = BaselineConfig(ts_threshold=5000)
    assert cfg.rlm_hyper.epochs == TrainHyper().epochs
    with pytest.raises(ValueError, match="positive"):
        BaselineConfig(ts_threshold=0)
    with pytest.raises(ValueError, match="positive"):
        BaselineConfig(ts_threshold=-3)


# -- threshold rule ---------------------------------------------------------

def test_ts_thresholds_on_micro(micro):
    # rowcounts: p=3; the {un, ci, co} component's tables hold 2 rows each
    catalog, space = micro_space(micro)
    assert select_ts(space, catalog, 1) is space.candidates[0]
    assert select_ts(space, catalog, 2) is space.candidates[0]
    assert set(select_ts(space, catalog, 3).movement) == {"un"}
    assert set(select_ts(space, catalog, 4).movement) == {"p", "un"}
    assert select_ts(space, catalog, 10**6) is space.candidates[3]
    with pytest.raises(ValueError):
        select_ts(space, catalog, 0)


def test_ts_splits_unequal_tables():
    catalog, space = sized_instance([1000, 10000])
    picked = select_ts(space, catalog, 5000)
    assert set(picked.movement) == {"t0"}
    assert picked is space.candidates[1]


def test_ts_monotone_in_threshold():
    catalog, space = sized_instance([7, 2, 19, 4])
    previous = frozenset()
    for t in range(1, 25):
        movement = frozenset(select_ts(space, catalog, t).movement)
        assert previous <= movement
        previous = movement
    assert previous == {"t0", "t1", "t2", "t3"}


# -- first-visited-label rule -----------------------------------------------

def raw_graph_plan(space, catalog):
    return plan_graph_query(space.candidates[0].graph_expr, catalog)


def test_fvn_keeps_non_anchor_tables_local(micro):
    # the chain anchors at Forum (one vertex); p and un join Post/University
    catalog, space = micro_space(micro)
    estimated = raw_graph_plan(space, catalog)
    assert scan_labels(estimated) == {"Forum"}
    assert select_fvn(space, estimated) is space.candidates[0]


def test_fvn_moves_tables_joining_the_scanned_label():
    catalog, space = sized_instance([5, 6])
    estimated = raw_graph_plan(space, catalog)
    assert scan_labels(estimated) == {"L"}
    picked = select_fvn(space, estimated)
    assert set(picked.movement) == {"t0", "t1"}


def test_fvn_single_table():
    catalog, space = sized_instance([5])
    picked = select_fvn(space, raw_graph_plan(space, catalog))
    assert picked is space.candidates[1]


# -- latency regressor ------------------------------------------------------

def card_feature(x, name="c"):
    vec = np.zeros((1, WIDTH))
    vec[0, 2] = 1.0
    vec[0, 10] = x
    return PlanFeatures(name=name, movement=(),
                        tree=vec.copy(),
                        tree_children=-np.ones((1, 2), dtype=np.int64),
                        graph=vec.copy(),
                        graph_edges=np.zeros((0, 2), dtype=np.int64))


def test_regression_sample_validation():
    f = card_feature(0.5)
    RegressionSample(f, 0.01)
    for bad in (0.0, -1.0, float("nan"), float("inf")):
        with pytest.raises(ValueError, match="latency"):
            RegressionSample(f, bad)


def test_regression_gradients_match_finite_differences():
    rng = np.random.default_rng(9)
    w = init_weights(WIDTH, (0.0, 1.0), seed=4)
    samples = [RegressionSample(card_feature(rng.uniform(0.05, 0.95), name=f"s{i}"),
                                float(rng.uniform(0.5, 20.0)))
               for i in range(4)]
    err = gradient_check(w, samples, samples_per_param=10, seed=2,
                         loss_fn=regression_loss_and_gradients)
    assert err < 1e-4


def test_regressor_learns_log_latency():
    rng = np.random.default_rng(41)
    xs = rng.uniform(0, 1, size=100)
    samples = [RegressionSample(card_feature(x, name=f"s{i}"), math.exp(2 * x - 1))
               for i, x in enumerate(xs)]
    fc = FeatureConfig(tables=(), labels=(), bounds=(0.0, 1.0))
    w = train_rlm(samples, TrainHyper(lr=0.05, epochs=120, batch=16, seed=3), fc)
    test_xs = [0.1, 0.4, 0.6, 0.9]
    errs = [abs(predict_log_latency(card_feature(x), w) - (2 * x - 1))
            for x in test_xs]
    assert max(errs) < 0.15


class FakeSpace:
    def __init__(self, candidates):
        self.candidates = candidates


def test_select_rlm_prefers_predicted_fastest():
    rng = np.random.default_rng(13)
    xs = rng.uniform(0, 1, size=120)
    samples = [RegressionSample(card_feature(x, name=f"s{i}"), math.exp(3 * x))
               for i, x in enumerate(xs)]
    fc = FeatureConfig(tables=(), labels=(), bounds=(0.0, 1.0))
    w = train_rlm(samples, TrainHyper(lr=0.05, epochs=100, batch=16, seed=5), fc)
    cand_xs = [0.8, 0.3, 0.95, 0.1, 0.6]
    feats = [card_feature(x) for x in cand_xs]
    space = FakeSpace([f"plan{i}" for i in range(len(cand_xs))])
    assert select_rlm(space, feats, w) == "plan3"  # x = 0.1 is cheapest


def test_select_rlm_shape_checks():
    w = init_weights(WIDTH, (0.0, 1.0), seed=0)
    space = FakeSpace(["raw"])
    assert select_rlm(space, [card_feature(0.3)], w) == "raw"
    with pytest.raises(ModelError, match="candidates"):
        select_rlm(FakeSpace(["a", "b"]), [card_feature(0.3)], w)
