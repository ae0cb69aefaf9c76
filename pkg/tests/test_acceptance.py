"""End-to-end checks over the whole pipeline, one verdict line each.

Every test here exercises a released behavior from the outside: plan-space
shape, engine/reference agreement, generator invariants, comparator algebra
and training, optimizer quality against the baselines, the pruning and
bandwidth studies, and the per-query inference budget.  Each test prints a
single ``PASS``/``FAIL`` line so a log scrape can tally the suite.

The heavier tests share one synthesized corpus: a six-label graph with one
table per label, and 210 queries enumerated from (pattern shape, joined-table
subset) combinations.  Prequeries there carry no filters, so a moved payload
is always a whole table and the outcome of every movement is determined by
what the features can actually see; the 50 held-out queries use shape/subset
combinations never seen in training.
"""

import dataclasses
import itertools
import math
import os
import sys
import time

import numpy as np
import pytest

from cmgrj.algebra import bag_equal, evaluate
from cmgrj.baselines import train_rlm
from cmgrj.benchgen import (EdgeSpec, GenConfig, LabelSpec, TableSpec,
                            generate_dataset, generate_workload, preset_config,
                            table_name)
from cmgrj.cmlero import (TrainHyper, compare, gradient_check, init_weights,
                          rank_plans, train)
from cmgrj.datamodel import load_dataset
from cmgrj.engines import (DEFAULT_UNIT_COSTS, CostModelConfig, mbps,
                           plan_graph_query, run_candidate)
from cmgrj.explorer import enumerate_candidates, pruned_variant
from cmgrj.frontend import parse_query
from cmgrj.harness import (CollectConfig, build_pairs, build_spaces, collect,
                           evaluate as score_selections, load_workload,
                           optimal_selections, query_features,
                           regression_samples, select_index, select_with_model,
                           study_training_size)

from conftest import MICRO_QUERY_TEXT
from test_cmlero import leaf_features
from test_explorer import star_instance


def _verdict(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    print(line, file=sys.__stdout__, flush=True)
    assert ok, line


# ---------------------------------------------------------------------------
# Shared corpora
# ---------------------------------------------------------------------------

_CORPUS_EDGES = (
    EdgeSpec("AB", "A", "B", 2.0), EdgeSpec("BC", "B", "C", 1.5),
    EdgeSpec("CD", "C", "D", 1.5), EdgeSpec("DE", "D", "E", 2.0),
    EdgeSpec("AC", "A", "C", 1.0), EdgeSpec("BD", "B", "D", 1.0),
    EdgeSpec("CE", "C", "E", 1.5), EdgeSpec("AA", "A", "A", 1.0),
    EdgeSpec("EF", "E", "F", 2.0), EdgeSpec("DF", "D", "F", 1.0),
)

CORPUS_CFG = GenConfig(
    labels=(LabelSpec("A", 60), LabelSpec("B", 45), LabelSpec("C", 50),
            LabelSpec("D", 40), LabelSpec("E", 55), LabelSpec("F", 35)),
    edges=_CORPUS_EDGES,
    tables=(TableSpec("A", 40, 0.50), TableSpec("B", 30, 0.40),
            TableSpec("C", 55, 0.30), TableSpec("D", 25, 0.60),
            TableSpec("E", 45, 0.35), TableSpec("F", 20, 0.45)),
    seed=17,
)

CHAIN_CFG = GenConfig(
    labels=(LabelSpec("A", 30), LabelSpec("B", 20), LabelSpec("C", 25)),
    edges=(EdgeSpec("AB", "A", "B", 1.5), EdgeSpec("BC", "B", "C", 1.5),
           EdgeSpec("AA", "A", "A", 1.0)),
    tables=(TableSpec("A", 20, 0.5), TableSpec("B", 12, 0.3),
            TableSpec("C", 40, 0.4)),
    seed=3,
)


def _pattern_shapes(max_hops: int = 3):
    """All label paths of 1..max_hops edges over the corpus edge types."""
    by_source = {}
    for e in _CORPUS_EDGES:
        by_source.setdefault(e.source, []).append(e)
    shapes = []

    def walk(labels, types):
        if 1 <= len(types) <= max_hops:
            shapes.append((tuple(labels), tuple(types)))
        if len(types) == max_hops:
            return
        for e in by_source.get(labels[-1], ()):
            walk(labels + [e.target], types + [e.etype])

    for spec in CORPUS_CFG.labels:
        walk([spec.name], [])
    return shapes


def _shape_combos():
    """(shape, joined-label subset) pairs; each one becomes one query."""
    combos = []
    for labels, types in _pattern_shapes():
        first_var = {}
        for i, lab in enumerate(labels):
            first_var.setdefault(lab, i)
        for r in (1, 2, 3):
            for sub in itertools.combinations(sorted(first_var), r):
                combos.append((labels, types, sub, dict(first_var)))
    return combos


def _combo_query_text(labels, types, joinset, first_var) -> str:
    pattern = f"(v0:{labels[0]})"
    for i, etype in enumerate(types):
        pattern += f"-[:{etype}]->(v{i + 1}:{labels[i + 1]})"
    ret_vars = sorted({first_var[lab] for lab in joinset} | {0})
    ret = ", ".join(f"v{i}.id AS c{i}" for i in ret_vars)
    froms = ", ".join(["neo4j g"] + [table_name(lab) for lab in joinset])
    conds = " AND ".join(f"g.c{first_var[lab]} = {table_name(lab)}.id"
                         for lab in joinset)
    return f"MATCH {pattern} RETURN {ret}\n;\nSELECT g.c0 FROM {froms} WHERE {conds}"


def _scaled_units(factor: float = 2000.0) -> dict:
    # default per-row costs model a server-grade engine; desk-sized graphs
    # need them scaled up before graph work is worth trading against transfers
    return {op: unit * factor for op, unit in DEFAULT_UNIT_COSTS.items()}


def _corpus_cost(bandwidth_mbps: float = 1e6, rtt: float = 1e-4) -> CostModelConfig:
    return CostModelConfig(mode="synthetic", bandwidth=mbps(bandwidth_mbps),
                           rtt=rtt, per_row_overhead=1e-6,
                           unit_costs=_scaled_units())


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    manifest = generate_dataset(CORPUS_CFG, str(out))
    g, tables, cat = load_dataset(manifest)
    combos = _shape_combos()
    order = np.random.default_rng(29).permutation(len(combos))
    picked = [combos[i] for i in order[:210]]
    queries = {}
    for k, combo in enumerate(picked):
        name = f"s{k:03d}"
        queries[name] = parse_query(_combo_query_text(*combo), cat, name=name)
    names = sorted(queries)
    return {"g": g, "tables": tables, "cat": cat, "queries": queries,
            "train": names[:160], "test": names[160:]}


@pytest.fixture(scope="module")
def corpus_run(corpus):
    res = collect(corpus["queries"], corpus["g"], corpus["tables"],
                  corpus["cat"], CollectConfig(cost=_corpus_cost()))
    spaces = build_spaces(corpus["queries"], corpus["cat"], corpus["tables"])
    return res, spaces


# latency = floor + bytes-moved term + graph-result-rows term; monotone in
# both, and balanced so roughly half the corpus prefers some movement
PRICE_PER_BYTE = 1.0 / 150.0
PRICE_PER_ROW = 0.03
PRICE_FLOOR = 0.05


def _priced(record):
    latency = (PRICE_FLOOR + PRICE_PER_BYTE * record.bytes_moved
               + PRICE_PER_ROW * record.rows_back)
    return dataclasses.replace(record, latency=latency,
                               breakdown={"priced": latency})


@pytest.fixture(scope="module")
def priced_records(corpus_run):
    res, _ = corpus_run
    return [_priced(r) for r in res.records]


@pytest.fixture(scope="module")
def chain_instance(tmp_path_factory):
    out = tmp_path_factory.mktemp("chain")
    manifest = generate_dataset(CHAIN_CFG, str(out))
    generate_workload(manifest, count=60, seed=11)
    g, tables, cat = load_dataset(manifest)
    queries, _split = load_workload(os.path.join(str(out), "workload"), cat)
    return {"g": g, "tables": tables, "cat": cat, "queries": queries,
            "manifest": manifest}


# ---------------------------------------------------------------------------
# 1. plan-space shape
# ---------------------------------------------------------------------------

def test_movement_plan_space_is_binary_counter(micro):
    t0 = time.perf_counter()
    for n in range(6):
        g, tables, cat, q = star_instance(n)
        space = enumerate_candidates(q, cat, tables)
        assert len(space.candidates) == 2 ** n
        assert len({s.movement for s in space.candidates}) == 2 ** n

    g, tables, cat = micro
    q = parse_query(MICRO_QUERY_TEXT, cat)
    space = enumerate_candidates(q, cat, tables)
    n = len(space.joinable)
    # per movable component three strategies exist (keep, move the payload,
    # export the joined label's vertices); enumeration keeps the first two,
    # and the third stays constructible on demand for every component
    for comp in space.joinable:
        label = q.var_label(
            q.return_aliases[next(iter(q.components[comp].cross)).graph_column][0])
        variant = pruned_variant(q, label, cat, tables)
        assert variant.pruned_vertex_movement == label
    elapsed = time.perf_counter() - t0
    ok = (n == 2 and len(space.candidates) == 4 and 3 ** n == 9
          and elapsed < 1.0)
    _verdict("plan-space size", ok,
             f"2^n candidates for n=0..5; motivating fixture keeps "
             f"{len(space.candidates)} of 3^{n}={3 ** n} per-component "
             f"strategies ({elapsed * 1000:.0f} ms)")


# ---------------------------------------------------------------------------
# 2. engine vs. reference evaluator
# ---------------------------------------------------------------------------

def test_engine_agrees_with_reference_evaluator(corpus, chain_instance):
    cost = CostModelConfig(mode="synthetic")
    t0 = time.perf_counter()
    queries_checked = 0
    plans_checked = 0
    for inst in (chain_instance, corpus):
        g, tables, cat = inst["g"], inst["tables"], inst["cat"]
        assert len(g.vertex_props) <= 50_000
        for q in inst["queries"].values():
            space = enumerate_candidates(q, cat, tables)
            for plan in space.candidates:
                out = run_candidate(plan, g, tables, cat, cost)
                oracle = evaluate(plan.combined_expr, g, tables)
                assert bag_equal(out.result.columns, out.result.rows,
                                 oracle.columns, oracle.rows), \
                    f"{q.name} movement {sorted(plan.movement)}"
                plans_checked += 1
            queries_checked += 1
    elapsed = time.perf_counter() - t0
    ok = queries_checked >= 100 and elapsed < 600.0
    _verdict("engine/reference agreement", ok,
             f"{plans_checked} candidate plans over {queries_checked} queries "
             f"match as bags ({elapsed:.1f} s)")


# ---------------------------------------------------------------------------
# 3. generator join-cardinality invariant
# ---------------------------------------------------------------------------

def test_generated_tables_hit_exact_join_cardinality(corpus, chain_instance):
    tables_checked = 0
    for inst, cfg in ((chain_instance, CHAIN_CFG), (corpus, CORPUS_CFG)):
        g, tables, cat = inst["g"], inst["tables"], inst["cat"]
        label_counts = {spec.name: spec.count for spec in cfg.labels}
        for tspec in cfg.tables:
            rel = tables[table_name(tspec.label)]
            id_idx = [c for c, _ in rel.schema].index("id")
            table_ids = {row[id_idx] for row in rel.rows}
            graph_ids = {g.vertex_props[v]["id"]
                         for v in g.vertices_with_label(tspec.label)}
            expected = math.floor(label_counts[tspec.label] * tspec.true_ratio)
            assert expected >= 1  # configs here never trigger the floor clamp
            assert len(table_ids & graph_ids) == expected, tspec.label
            tables_checked += 1
    _verdict("benchmark join cardinality", True,
             f"{tables_checked} generated tables match "
             "floor(vertices * true-ratio) exactly")


# ---------------------------------------------------------------------------
# 4. comparator output algebra
# ---------------------------------------------------------------------------

def test_comparator_probabilities_are_antisymmetric():
    rng = np.random.default_rng(41)
    worst = 0.0
    for draw in range(1000):
        w = init_weights(12, bounds=(0.0, 10.0), seed=1000 + draw)
        fi = leaf_features(rng, n_tree=int(rng.integers(1, 4)),
                           n_graph=int(rng.integers(1, 4)))
        fj = leaf_features(rng, n_tree=int(rng.integers(1, 4)),
                           n_graph=int(rng.integers(1, 4)))
        y_ij = compare(fi, fj, w)
        y_ji = compare(fj, fi, w)
        worst = max(worst, abs((y_ij + y_ji) - 1.0))
        assert abs((y_ij + y_ji) - 1.0) <= 1e-12
        assert compare(fi, fi, w) == 0.5
    _verdict("comparator antisymmetry", True,
             f"1000 draws: max |p(i,j)+p(j,i)-1| = {worst:.2e}; "
             "self-comparison is exactly 0.5")


# ---------------------------------------------------------------------------
# 5. gradient correctness
# ---------------------------------------------------------------------------

def test_analytic_gradients_match_finite_differences():
    from cmgrj.cmlero import TrainingPair

    rng = np.random.default_rng(53)
    total_pairs = 0
    worst = 0.0
    for group_seed in (0, 1, 2, 3):
        pairs = []
        for _ in range(6):
            fi = leaf_features(rng, n_tree=int(rng.integers(1, 4)),
                               n_graph=int(rng.integers(1, 3)))
            fj = leaf_features(rng, n_tree=int(rng.integers(1, 4)),
                               n_graph=int(rng.integers(1, 3)))
            pairs.append(TrainingPair(features_i=fi, features_j=fj,
                                      label=int(rng.integers(0, 2))))
        w = init_weights(12, bounds=(0.0, 10.0), seed=60 + group_seed)
        # step large enough that roundoff on near-zero entries stays below
        # the bar, small enough not to cross any ReLU kink
        err = gradient_check(w, pairs, samples_per_param=5, eps=3e-4,
                             seed=group_seed)
        worst = max(worst, err)
        assert err < 1e-4
        total_pairs += len(pairs)
    _verdict("gradient correctness", total_pairs >= 20,
             f"{total_pairs} random plan pairs: max relative error "
             f"{worst:.2e} < 1e-4")


# ---------------------------------------------------------------------------
# 6. learnability on a transparent cost function
# ---------------------------------------------------------------------------

def test_comparator_learns_transparent_cost_ranking(corpus, corpus_run,
                                                    priced_records):
    res, spaces = corpus_run
    train_recs = [r for r in priced_records if r.query in corpus["train"]]
    test_recs = [r for r in priced_records if r.query in corpus["test"]]
    moved_best = sum(1 for q, i in optimal_selections(test_recs).items() if i)

    pairs = build_pairs(train_recs, res.features, t1=60.0)
    weights = train(pairs, TrainHyper(lr=0.1, epochs=200, batch=64, seed=0),
                    res.feature_config)
    selections = {}
    for name in corpus["test"]:
        feats = query_features(name, spaces[name], res.features)
        selections[name] = rank_plans(feats, weights)[0]
    report = score_selections({"cmlero": selections}, test_recs, t1=60.0,
                              top_n=(1, 3))
    m = report.metrics["cmlero"]
    ok = (len(corpus["test"]) == 50 and m.top_hr[1] >= 0.9 and m.avg_q <= 1.2)
    _verdict("comparator learnability", ok,
             f"50 held-out queries ({moved_best} prefer movement): "
             f"Top-1-HR {m.top_hr[1]:.2f} >= 0.9, AvgQ {m.avg_q:.4f} <= 1.2 "
             f"after 200 epochs")


# ---------------------------------------------------------------------------
# 7. optimizer quality ordering on a measured run
# ---------------------------------------------------------------------------

def test_optimizer_quality_ordering_on_measured_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("social")
    cfg = preset_config("t1", scale=0.003, seed=5)
    manifest = generate_dataset(cfg, str(out))
    generate_workload(manifest, count=140, seed=9)
    g, tables, cat = load_dataset(manifest)
    queries, split = load_workload(os.path.join(str(out), "workload"), cat)

    # The row cap sits above the largest result any plan is forced to return
    # (~19k rows here) and below the runaway expansions, mirroring at desk
    # scale what a wall-clock collection timeout does on a real link.
    cost = CostModelConfig(mode="measured", bandwidth=mbps(0.25), rtt=0.05,
                           per_row_overhead=1e-6, transfer_cap_rows=25_000)
    spaces = build_spaces(queries, cat, tables)
    t1 = 60.0
    threshold = float(np.median(list(cat.table_rowcounts.values())))

    per_run = {"cmlero": [], "rlm": [], "ts": [], "fvn": []}
    top3 = {"cmlero": [], "rlm": [], "ts": [], "fvn": []}
    for seed in (0, 1, 2):
        res = collect(queries, g, tables, cat, CollectConfig(cost=cost))
        train_recs = [r for r in res.records if r.query in split["train"]]
        test_recs = [r for r in res.records if r.query in split["test"]]
        pairs = build_pairs(train_recs, res.features, t1,
                            near_tie_fraction=0.03)
        samples = regression_samples(train_recs, res.features)
        hyper = TrainHyper(lr=0.05, epochs=300, batch=64, seed=seed)
        w_cmp = train(pairs, hyper, res.feature_config)
        w_reg = train_rlm(samples, hyper, res.feature_config)
        selections = {}
        for opt in ("cmlero", "rlm", "ts", "fvn"):
            picks = {}
            for name in split["test"]:
                space = spaces[name]
                feats = query_features(name, space, res.features)
                if opt in ("cmlero", "rlm"):
                    w = w_cmp if opt == "cmlero" else w_reg
                    picks[name] = select_index(opt, space, cat, features=feats,
                                               weights=w)
                else:
                    picks[name] = select_index(opt, space, cat,
                                               ts_threshold=threshold)
            selections[opt] = picks
        report = score_selections(selections, test_recs, t1, top_n=(1, 3))
        for opt in per_run:
            per_run[opt].append(report.metrics[opt].avg_q)
            top3[opt].append(report.metrics[opt].top_hr[3])

    med = {opt: float(np.median(v)) for opt, v in per_run.items()}
    med3 = {opt: float(np.median(v)) for opt, v in top3.items()}
    heur = max(med["ts"], med["fvn"])
    ok = (med["cmlero"] <= med["rlm"] <= heur
          and all(med3["cmlero"] >= med3[o] for o in ("rlm", "ts", "fvn")))
    _verdict("optimizer ordering", ok,
             f"median AvgQ cmlero {med['cmlero']:.3f} <= rlm {med['rlm']:.3f} "
             f"<= max(ts,fvn) {heur:.3f}; Top-3-HR cmlero {med3['cmlero']:.2f} "
             f"vs rlm {med3['rlm']:.2f} ts {med3['ts']:.2f} fvn {med3['fvn']:.2f}")


# ---------------------------------------------------------------------------
# 8. sample efficiency against the regression baseline
# ---------------------------------------------------------------------------

TARGET_TOP1 = 0.65
STUDY_SIZES = (10, 25, 60, 120)


def _smallest_size_reaching(rows, target):
    for row in rows:
        if row["metrics"].top_hr.get(1, 0.0) >= target:
            return row["size"]
    return math.inf


def test_comparator_needs_fewer_examples_than_regressor(corpus, corpus_run,
                                                        priced_records):
    res, spaces = corpus_run
    hyper = TrainHyper(lr=0.1, epochs=80, batch=64, seed=0)
    votes = 0
    details = []
    for seed in (0, 1, 2):
        sizes = {}
        for model in ("cmlero", "rlm"):
            rows = study_training_size(
                STUDY_SIZES, seed, model, corpus["train"], corpus["test"],
                spaces, priced_records, res.features, res.feature_config,
                hyper, t1=60.0, top_n=(1,))
            sizes[model] = _smallest_size_reaching(rows, TARGET_TOP1)
        details.append(f"seed {seed}: cmlero@{sizes['cmlero']} "
                       f"rlm@{sizes['rlm']}")
        if sizes["cmlero"] <= sizes["rlm"]:
            votes += 1
    ok = votes >= 2
    _verdict("sample efficiency", ok,
             f"comparator reaches Top-1-HR {TARGET_TOP1} at a size <= the "
             f"regressor's in {votes}/3 seeds ({'; '.join(details)})")


# ---------------------------------------------------------------------------
# 9. retained plans vs. vertex-export variants
# ---------------------------------------------------------------------------

def test_retained_plans_match_vertex_export_variants(corpus, corpus_run):
    _, spaces = corpus_run
    g, tables, cat = corpus["g"], corpus["tables"], corpus["cat"]
    cost = _corpus_cost(bandwidth_mbps=0.25)
    within = 0
    comparisons = 0
    for name in corpus["test"]:
        q = corpus["queries"][name]
        space = spaces[name]
        labels = sorted({q.var_label(q.return_aliases[c.graph_column][0])
                         for comp in space.joinable
                         for c in q.components[comp].cross if c.op == "="})
        for label in labels:
            variant = pruned_variant(q, label, cat, tables)
            retained = space.candidates[space.index_of(variant.movement)]
            lat_variant = run_candidate(variant, g, tables, cat, cost,
                                        keep_result=False).latency
            lat_retained = run_candidate(retained, g, tables, cat, cost,
                                         keep_result=False).latency
            comparisons += 1
            # allow 10% of the variant's runtime, or a small absolute slack
            # matching a few seconds at full scale
            if lat_retained <= max(1.10 * lat_variant, lat_variant + 0.05):
                within += 1
    frac = within / comparisons
    ok = comparisons >= 50 and frac >= 0.95
    _verdict("vertex-export pruning", ok,
             f"retained plan at least matches the vertex-export variant in "
             f"{within}/{comparisons} comparisons ({frac:.1%} >= 95%)")


# ---------------------------------------------------------------------------
# 10. costlier movement shifts selection toward fewer bytes
# ---------------------------------------------------------------------------

BANDWIDTH_LADDER = ((0.25, 1e-4), (0.0025, 3e-4), (0.000025, 1e-3))


def test_costlier_movement_selects_fewer_moved_bytes(corpus):
    g, tables, cat = corpus["g"], corpus["tables"], corpus["cat"]
    selected_bytes = []
    for bw, rtt in BANDWIDTH_LADDER:
        res = collect(corpus["queries"], g, tables, cat,
                      CollectConfig(cost=_corpus_cost(bw, rtt)))
        spaces = build_spaces(corpus["queries"], cat, tables)
        train_recs = [r for r in res.records if r.query in corpus["train"]]
        pairs = build_pairs(train_recs, res.features, t1=60.0)
        weights = train(pairs, TrainHyper(lr=0.1, epochs=120, batch=64, seed=0),
                        res.feature_config)
        by_plan = {(r.query, r.plan_index): r for r in res.records}
        picked = {}
        for name in corpus["test"]:
            feats = query_features(name, spaces[name], res.features)
            idx = rank_plans(feats, weights)[0]
            picked[name] = by_plan[(name, idx)].bytes_moved
        selected_bytes.append(picked)

    reference = selected_bytes[0]
    fractions = [sum(1 for n in sel if sel[n] < reference[n]) / len(sel)
                 for sel in selected_bytes]
    totals = [sum(sel.values()) for sel in selected_bytes]
    ok = fractions[0] == 0.0 and 0.0 < fractions[1] < fractions[2]
    _verdict("bandwidth adaptation", ok,
             f"queries moving fewer bytes than under the cheapest setting: "
             f"{fractions[0]:.2f} -> {fractions[1]:.2f} -> {fractions[2]:.2f} "
             f"(total bytes {totals[0]} -> {totals[1]} -> {totals[2]})")


# ---------------------------------------------------------------------------
# 11. per-query inference budget
# ---------------------------------------------------------------------------

def test_candidate_scoring_fits_inference_budget(corpus, corpus_run):
    res, spaces = corpus_run
    cat = corpus["cat"]
    weights = init_weights(res.feature_config.width, res.feature_config.bounds,
                           res.feature_config.tables, res.feature_config.labels,
                           seed=0)
    slowest = 0.0
    for name in corpus["test"]:
        space = spaces[name]
        estimated = plan_graph_query(space.candidates[0].graph_expr, cat)
        _idx, seconds = select_with_model(space, estimated, cat, weights)
        slowest = max(slowest, seconds)
    ok = slowest <= 2.0
    _verdict("inference budget", ok,
             f"featurize+score all candidates: worst query "
             f"{slowest * 1000:.1f} ms <= 2 s")
