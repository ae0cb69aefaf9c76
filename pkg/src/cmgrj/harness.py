"""Experiment orchestration: run every candidate of every workload query,
prune runaway plans with a count probe, turn the latency log into training
data, and score selection policies against the best plan each query had.

The latency log and the feature sidecar are both line-delimited JSON so runs
can be frozen, diffed, and re-evaluated without touching the engines again.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import baselines, cmlero, featurizer
from .datamodel import Catalog, PropertyGraph, Relation
from .engines import (
    CostModelConfig,
    EngineError,
    ProbeTimeout,
    plan_graph_query,
    run_candidate,
)
from .explorer import PlanSpace, enumerate_candidates
from .featurizer import FeatureConfig, PlanFeatures
from .frontend import Query, parse_query

log = logging.getLogger(__name__)

#: Sentinel latencies, ordered worst-first.  They mark plans the collector
#: refused to finish: the count probe timed out, or the counted result was too
#: large to ship.  They act as ranks, never as regression targets.
EXTREME_LARGE_QUERY = "EXTREME_LARGE_QUERY"
LARGE_QUERY = "LARGE_QUERY"
SENTINELS = (LARGE_QUERY, EXTREME_LARGE_QUERY)

#: Numeric stand-ins, as multiples of the probe timeout, used when a metric
#: needs a duration for a plan that never ran to completion.
EXTREME_FACTOR = 3.0
LARGE_FACTOR = 1.5


class HarnessError(Exception):
    """Raised for malformed logs, inconsistent inputs, or bad study setups."""


@dataclass
class LatencyRecord:
    """One execution (or refusal) of one candidate plan."""

    query: str
    plan_index: int
    movement: tuple[str, ...]
    latency: float | str  # seconds, or one of the sentinel names
    breakdown: dict[str, float]
    mode: str  # "measured" | "synthetic"
    rows_moved: int = 0
    bytes_moved: int = 0
    rows_back: int = 0
    bytes_back: int = 0
    error: str | None = None

    def __post_init__(self) -> None:
        if isinstance(self.latency, str):
            if self.latency not in SENTINELS:
                raise ValueError(f"unknown sentinel {self.latency!r}")
        else:
            self.latency = float(self.latency)
            total = sum(self.breakdown.values())
            if self.error is None and not math.isclose(
                    total, self.latency, rel_tol=1e-9, abs_tol=1e-9):
                raise ValueError(
                    f"breakdown sums to {total!r} but latency is {self.latency!r}")

    @property
    def is_sentinel(self) -> bool:
        return isinstance(self.latency, str)

    def to_json(self) -> str:
        doc = {
            "query": self.query,
            "plan_index": self.plan_index,
            "movement": list(self.movement),
            "latency": self.latency,
            "breakdown": self.breakdown,
            "mode": self.mode,
            "rows_moved": self.rows_moved,
            "bytes_moved": self.bytes_moved,
            "rows_back": self.rows_back,
            "bytes_back": self.bytes_back,
            "error": self.error,
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "LatencyRecord":
        doc = json.loads(line)
        try:
            return cls(
                query=doc["query"],
                plan_index=int(doc["plan_index"]),
                movement=tuple(doc["movement"]),
                latency=doc["latency"],
                breakdown={k: float(v) for k, v in doc["breakdown"].items()},
                mode=doc["mode"],
                rows_moved=int(doc.get("rows_moved", 0)),
                bytes_moved=int(doc.get("bytes_moved", 0)),
                rows_back=int(doc.get("rows_back", 0)),
                bytes_back=int(doc.get("bytes_back", 0)),
                error=doc.get("error"),
            )
        except KeyError as exc:
            raise HarnessError(f"latency record missing field {exc}") from exc


def write_records(path: str, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_records(path: str) -> list[LatencyRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(LatencyRecord.from_json(line))
    return out


def ordering_key(latency: float | str) -> tuple[int, float]:
    """Comparable key: any measured duration < LARGE < EXTREME."""
    if latency == EXTREME_LARGE_QUERY:
        return (2, 0.0)
    if latency == LARGE_QUERY:
        return (1, 0.0)
    return (0, float(latency))


def rank_value(latency: float | str, t1: float) -> float:
    """Duration stand-in for metrics; sentinels map to multiples of ``t1``."""
    if latency == EXTREME_LARGE_QUERY:
        return EXTREME_FACTOR * t1
    if latency == LARGE_QUERY:
        return LARGE_FACTOR * t1
    return float(latency)


# ---------------------------------------------------------------------------
# Workload loading
# ---------------------------------------------------------------------------

def load_workload(workload_dir: str, cat: Catalog):
    """Parse every ``*.cmq`` file plus ``split.json``.

    Returns ``(queries, split)`` where queries maps file name to the parsed
    query and split holds the ``train``/``test`` name lists.
    """
    names = sorted(n for n in os.listdir(workload_dir) if n.endswith(".cmq"))
    if not names:
        raise HarnessError(f"no .cmq files under {workload_dir}")
    queries: dict[str, Query] = {}
    for fname in names:
        with open(os.path.join(workload_dir, fname), encoding="utf-8") as fh:
            queries[fname] = parse_query(fh.read(), cat, name=fname)
    split_path = os.path.join(workload_dir, "split.json")
    if os.path.exists(split_path):
        with open(split_path, encoding="utf-8") as fh:
            split = json.load(fh)
    else:
        split = {"train": names, "test": []}
    unknown = (set(split.get("train", ())) | set(split.get("test", ()))) - set(names)
    if unknown:
        raise HarnessError(f"split.json names absent from workload: {sorted(unknown)}")
    return queries, split


# ---------------------------------------------------------------------------
# Latency collection with runtime pruning
# ---------------------------------------------------------------------------

@dataclass
class CollectConfig:
    cost: CostModelConfig = field(default_factory=lambda: CostModelConfig(mode="synthetic"))
    use_pruning: bool = True
    warmup_runs: int = 1  # measured mode: discarded before timing
    repeats: int = 3      # measured mode: median over this many runs
    max_movable: int | None = None

    def __post_init__(self) -> None:
        if self.repeats < 1:
            raise ValueError("repeats must be at least 1")
        if self.warmup_runs < 0:
            raise ValueError("warmup_runs cannot be negative")


@dataclass
class CollectResult:
    records: list[LatencyRecord]
    features: list[PlanFeatures]  # one per record, same order
    feature_config: FeatureConfig
    wall_seconds: float

    @property
    def sentinel_count(self) -> int:
        return sum(1 for r in self.records if r.is_sentinel)


def _probe(plan, g, tables, cat, cfg: CostModelConfig):
    """Count-only dry run of the graph half.

    Returns ``(sentinel, partial)``: the sentinel to record (or ``None`` to
    go ahead with the full execution) and the partial run carrying the
    counted result size.  In measured mode the probe runs under a wall-clock
    deadline and a breach surfaces as :class:`ProbeTimeout`; in synthetic
    mode the same budget is applied to the deterministic cost instead.
    """
    deadline = None
    if cfg.mode == "measured":
        deadline = time.perf_counter() + cfg.probe_timeout
    partial = run_candidate(plan, g, tables, cat, cfg, deadline=deadline,
                            keep_result=False, stop_after_graph=True)
    if cfg.mode == "synthetic" and partial.latency > cfg.probe_timeout:
        return EXTREME_LARGE_QUERY, partial
    if partial.rows_back > cfg.transfer_cap_rows:
        return LARGE_QUERY, partial
    return None, partial


def _timed_run(plan, g, tables, cat, config: CollectConfig):
    cfg = config.cost
    if cfg.mode == "synthetic":
        return run_candidate(plan, g, tables, cat, cfg, keep_result=False)
    for _ in range(config.warmup_runs):
        run_candidate(plan, g, tables, cat, cfg, keep_result=False)
    runs = [run_candidate(plan, g, tables, cat, cfg, keep_result=False)
            for _ in range(config.repeats)]
    runs.sort(key=lambda r: r.latency)
    return runs[(len(runs) - 1) // 2]


def _run_one(name, idx, plan, g, tables, cat, config: CollectConfig) -> LatencyRecord:
    cfg = config.cost
    base = dict(query=name, plan_index=idx, movement=plan.movement, mode=cfg.mode)
    try:
        if config.use_pruning:
            sentinel, partial = _probe(plan, g, tables, cat, cfg)
            if sentinel is not None:
                return LatencyRecord(latency=sentinel, breakdown={},
                                     rows_moved=partial.rows_moved,
                                     bytes_moved=partial.bytes_moved,
                                     rows_back=partial.rows_back,
                                     bytes_back=partial.bytes_back, **base)
        out = _timed_run(plan, g, tables, cat, config)
    except ProbeTimeout:
        return LatencyRecord(latency=EXTREME_LARGE_QUERY, breakdown={}, **base)
    except EngineError as exc:
        log.warning("plan %d of %s failed: %s", idx, name, exc)
        return LatencyRecord(latency=EXTREME_LARGE_QUERY, breakdown={},
                             error=str(exc), **base)
    return LatencyRecord(latency=out.latency, breakdown=out.breakdown,
                         rows_moved=out.rows_moved, bytes_moved=out.bytes_moved,
                         rows_back=out.rows_back, bytes_back=out.bytes_back,
                         **base)


def build_spaces(queries: dict[str, Query], cat: Catalog,
                 tables: dict[str, Relation],
                 max_movable: int | None = None) -> dict[str, PlanSpace]:
    kwargs = {} if max_movable is None else {"max_movable": max_movable}
    return {name: enumerate_candidates(queries[name], cat, tables, **kwargs)
            for name in sorted(queries)}


def collect(queries: dict[str, Query], g: PropertyGraph,
            tables: dict[str, Relation], cat: Catalog,
            config: CollectConfig | None = None) -> CollectResult:
    """Run the whole plan space of every query and featurize each candidate.

    Every candidate yields exactly one record; failures and pruned plans get
    sentinel latencies instead of aborting the collection.  Feature scaling
    bounds come from the collected corpus itself, so features and records
    must travel together.
    """
    config = config or CollectConfig()
    for key, q in queries.items():
        if q.name != key:
            raise HarnessError(
                f"query dict key {key!r} does not match parsed name {q.name!r}")
    t0 = time.perf_counter()
    spaces = build_spaces(queries, cat, tables, config.max_movable)
    estimated = {name: plan_graph_query(spaces[name].candidates[0].graph_expr, cat)
                 for name in spaces}

    structures = []
    for name in sorted(spaces):
        for plan in spaces[name].candidates:
            structures.append(featurizer.build_structures(plan, estimated[name], cat))
    bounds = featurizer.card_bounds(structures)
    fcfg = featurizer.feature_config_from_catalog(cat, bounds)
    features = [featurizer.encode_structures(ps, fcfg) for ps in structures]

    records = []
    for name in sorted(spaces):
        for idx, plan in enumerate(spaces[name].candidates):
            records.append(_run_one(name, idx, plan, g, tables, cat, config))
    return CollectResult(records=records, features=features, feature_config=fcfg,
                         wall_seconds=time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# Training data out of the log
# ---------------------------------------------------------------------------

def _feature_map(features) -> dict[tuple[str, frozenset], PlanFeatures]:
    return {(f.name, frozenset(f.movement)): f for f in features}


def _lookup(fmap, record: LatencyRecord) -> PlanFeatures:
    try:
        return fmap[(record.query, frozenset(record.movement))]
    except KeyError:
        raise HarnessError(
            f"no features for {record.query} movement {sorted(record.movement)}")


def build_pairs(records, features, t1: float,
                near_tie_fraction: float = 0.01,
                queries=None) -> list[cmlero.TrainingPair]:
    """All unordered candidate pairs per query, labeled by latency order.

    Pairs whose measured latencies differ by less than ``near_tie_fraction``
    of the smaller one carry no usable signal and are dropped, as are pairs
    of identical sentinels.  ``queries`` restricts to a subset of query
    names (e.g. the training split).
    """
    if not records:
        raise HarnessError("empty latency log")
    fmap = _feature_map(features)
    wanted = None if queries is None else set(queries)
    by_query: dict[str, list[LatencyRecord]] = {}
    for rec in records:
        if wanted is None or rec.query in wanted:
            by_query.setdefault(rec.query, []).append(rec)

    pairs = []
    for name in sorted(by_query):
        recs = sorted(by_query[name], key=lambda r: r.plan_index)
        for ri, rj in combinations(recs, 2):
            ki, kj = ordering_key(ri.latency), ordering_key(rj.latency)
            if ki == kj:
                continue
            if ki[0] == 0 and kj[0] == 0:
                lo, hi = sorted((ki[1], kj[1]))
                if hi - lo < near_tie_fraction * lo:
                    continue
            li, lj = rank_value(ri.latency, t1), rank_value(rj.latency, t1)
            label = 1 if ki < kj else 0
            if (li < lj) != bool(label):  # sentinel stand-in disagrees: omit
                li = lj = None
            pairs.append(cmlero.TrainingPair(_lookup(fmap, ri), _lookup(fmap, rj),
                                             label, latency_i=li, latency_j=lj))
    return pairs


def regression_samples(records, features, queries=None) -> list:
    """Measured rows as (features, latency) pairs; sentinels are dropped."""
    fmap = _feature_map(features)
    wanted = None if queries is None else set(queries)
    out = []
    for rec in records:
        if wanted is not None and rec.query not in wanted:
            continue
        if rec.is_sentinel or rec.error is not None:
            continue
        if not rec.latency > 0:
            log.warning("skipping %s plan %d: non-positive latency %r",
                        rec.query, rec.plan_index, rec.latency)
            continue
        out.append(baselines.RegressionSample(_lookup(fmap, rec), rec.latency))
    return out


# ---------------------------------------------------------------------------
# Plan selection
# ---------------------------------------------------------------------------

OPTIMIZERS = ("raw", "ts", "fvn", "rlm", "cmlero")


def select_index(optimizer: str, space: PlanSpace, cat: Catalog,
                 features=None, weights=None, ts_threshold: int | None = None) -> int:
    """Index into ``space.candidates`` chosen by the named policy."""
    if optimizer == "raw":
        return 0
    if optimizer == "ts":
        if ts_threshold is None:
            raise HarnessError("ts optimizer needs a threshold")
        picked = baselines.select_ts(space, cat, ts_threshold)
        return space.index_of(frozenset(picked.movement))
    if optimizer == "fvn":
        estimated = plan_graph_query(space.candidates[0].graph_expr, cat)
        picked = baselines.select_fvn(space, estimated)
        return space.index_of(frozenset(picked.movement))
    if optimizer in ("cmlero", "rlm"):
        if weights is None or features is None:
            raise HarnessError(f"{optimizer} optimizer needs weights and features")
        if len(features) != len(space.candidates):
            raise HarnessError(
                f"{len(features)} feature rows for {len(space.candidates)} candidates")
        if optimizer == "cmlero":
            return cmlero.rank_plans(features, weights)[0]
        scores = [baselines.predict_log_latency(f, weights) for f in features]
        return min(range(len(scores)), key=lambda i: (scores[i], i))
    raise HarnessError(f"unknown optimizer {optimizer!r}")


def query_features(name: str, space: PlanSpace, features) -> list[PlanFeatures]:
    """The stored feature rows of one query, in candidate order."""
    fmap = _feature_map(features)
    out = []
    for plan in space.candidates:
        key = (name, frozenset(plan.movement))
        if key not in fmap:
            raise HarnessError(f"no features for {name} movement {sorted(plan.movement)}")
        out.append(fmap[key])
    return out


def select_with_model(space: PlanSpace, estimated, cat: Catalog,
                      weights: cmlero.ModelWeights):
    """Featurize every candidate and rank them; returns (index, seconds).

    This is the full inference path a deployment would pay per query, so its
    wall time is what the overhead budget is measured against.
    """
    fcfg = FeatureConfig(tables=weights.tables, labels=weights.labels,
                         bounds=weights.bounds)
    t0 = time.perf_counter()
    feats = [featurizer.featurize(plan, estimated, cat, fcfg)
             for plan in space.candidates]
    best = cmlero.rank_plans(feats, weights)[0]
    return best, time.perf_counter() - t0


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class OptimizerMetrics:
    optimizer: str
    n_queries: int
    total_runtime: float  # sum of selected-plan durations (stand-ins for sentinels)
    avg_q: float
    q90: float
    q95: float
    top_hr: dict[int, float]


@dataclass
class MetricsReport:
    metrics: dict[str, OptimizerMetrics]
    missing: tuple[str, ...]  # queries without ground truth, excluded

    def text(self) -> str:
        ns = sorted({n for m in self.metrics.values() for n in m.top_hr})
        header = ["optimizer", "queries", "runtime_s", "avg_q", "q90", "q95"]
        header += [f"top{n}_hr" for n in ns]
        rows = [header]
        for name in sorted(self.metrics):
            m = self.metrics[name]
            row = [name, str(m.n_queries), f"{m.total_runtime:.4f}",
                   f"{m.avg_q:.3f}", f"{m.q90:.3f}", f"{m.q95:.3f}"]
            row += [f"{m.top_hr.get(n, float('nan')):.3f}" for n in ns]
            rows.append(row)
        widths = [max(len(r[c]) for r in rows) for c in range(len(header))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip()
                 for r in rows]
        if self.missing:
            lines.append(f"excluded (no ground truth): {', '.join(self.missing)}")
        return "\n".join(lines)

    def csv(self) -> str:
        ns = sorted({n for m in self.metrics.values() for n in m.top_hr})
        lines = [",".join(["optimizer", "queries", "runtime_s", "avg_q", "q90", "q95"]
                          + [f"top{n}_hr" for n in ns])]
        for name in sorted(self.metrics):
            m = self.metrics[name]
            cells = [name, str(m.n_queries), repr(m.total_runtime), repr(m.avg_q),
                     repr(m.q90), repr(m.q95)]
            cells += [repr(m.top_hr.get(n, float("nan"))) for n in ns]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def evaluate(selections: dict[str, dict[str, int]], records,
             t1: float, top_n=(1, 3, 5)) -> MetricsReport:
    """Score selected plans against the best each query's space contained.

    For every query the ground truth is the smallest collected duration; the
    quality ratio is selected over ground truth, so 1.0 is unimprovable.  A
    selection counts as a top-N hit when its duration does not exceed the
    N-th smallest — ties share the rank.
    """
    by_query: dict[str, dict[int, float | str]] = {}
    for rec in records:
        by_query.setdefault(rec.query, {})[rec.plan_index] = rec.latency

    metrics = {}
    missing: set[str] = set()
    for optimizer, choices in selections.items():
        qs, runtimes, hits = [], [], {n: 0 for n in top_n}
        n_scored = 0
        for qname in sorted(choices):
            if qname not in by_query or choices[qname] not in by_query[qname]:
                missing.add(qname)
                continue
            lats = by_query[qname]
            values = sorted(rank_value(v, t1) for v in lats.values())
            gt = values[0]
            st = rank_value(lats[choices[qname]], t1)
            qs.append(st / max(gt, 1e-12) if gt > 0 or st > 0 else 1.0)
            runtimes.append(st)
            n_scored += 1
            for n in top_n:
                cutoff = values[min(n, len(values)) - 1]
                if st <= cutoff:
                    hits[n] += 1
        if not qs:
            metrics[optimizer] = OptimizerMetrics(optimizer, 0, 0.0,
                                                  float("nan"), float("nan"),
                                                  float("nan"), {n: float("nan")
                                                                 for n in top_n})
            continue
        arr = np.array(qs)
        metrics[optimizer] = OptimizerMetrics(
            optimizer=optimizer,
            n_queries=n_scored,
            total_runtime=float(sum(runtimes)),
            avg_q=float(arr.mean()),
            q90=float(np.percentile(arr, 90)),
            q95=float(np.percentile(arr, 95)),
            top_hr={n: hits[n] / n_scored for n in top_n},
        )
    return MetricsReport(metrics=metrics, missing=tuple(sorted(missing)))


def optimal_selections(records, queries=None) -> dict[str, int]:
    """The ground-truth choice per query: lowest latency, earliest index."""
    by_query: dict[str, list[LatencyRecord]] = {}
    wanted = None if queries is None else set(queries)
    for rec in records:
        if wanted is None or rec.query in wanted:
            by_query.setdefault(rec.query, []).append(rec)
    return {
        name: min(recs, key=lambda r: (ordering_key(r.latency), r.plan_index)).plan_index
        for name, recs in by_query.items()
    }


# ---------------------------------------------------------------------------
# Studies
# ---------------------------------------------------------------------------

def _evaluate_model(model: str, weights, spaces, features, records,
                    test_queries, t1: float, top_n) -> OptimizerMetrics:
    choices = {}
    for qname in test_queries:
        feats = query_features(qname, spaces[qname], features)
        choices[qname] = select_index(model, spaces[qname], cat=None,
                                      features=feats, weights=weights)
    report = evaluate({model: choices}, records, t1, top_n)
    return report.metrics[model]


def study_training_size(sizes, seed: int, model: str,
                        train_queries, test_queries, spaces,
                        records, features, feature_config: FeatureConfig,
                        hyper: cmlero.TrainHyper, t1: float,
                        top_n=(1, 3)) -> list[dict]:
    """Retrain on nested subsets of the training queries and score each.

    Returns one row per size with the subset's pair/sample count and the
    test-set metrics of the retrained model.
    """
    train_sorted = sorted(train_queries)
    if model not in ("cmlero", "rlm"):
        raise HarnessError(f"study supports cmlero|rlm, not {model!r}")
    order = list(np.random.default_rng(seed).permutation(train_sorted))
    rows = []
    for size in sizes:
        if size <= 0:
            raise HarnessError(f"training size must be positive, got {size}")
        if size > len(train_sorted):
            raise HarnessError(
                f"training size {size} exceeds the {len(train_sorted)} "
                "available training queries")
        subset = sorted(order[:size])
        if model == "cmlero":
            data = build_pairs(records, features, t1, queries=subset)
            weights = cmlero.train(data, hyper, feature_config)
        else:
            data = regression_samples(records, features, queries=subset)
            weights = baselines.train_rlm(data, hyper, feature_config)
        m = _evaluate_model(model, weights, spaces, features, records,
                            test_queries, t1, top_n)
        rows.append({"size": size, "examples": len(data), "metrics": m})
    return rows


def study_text(rows) -> str:
    lines = ["size  examples  runtime_s  avg_q  top1_hr"]
    for row in rows:
        m = row["metrics"]
        top1 = m.top_hr.get(1, float("nan"))
        lines.append(f"{row['size']:<5} {row['examples']:<9} "
                     f"{m.total_runtime:<10.4f} {m.avg_q:<6.3f} {top1:.3f}")
    return "\n".join(lines)


def study_pruning(queries, g, tables, cat, config: CollectConfig) -> dict:
    """Collect the same workload with and without the count probe."""
    import dataclasses

    pruned = collect(queries, g, tables, cat,
                     dataclasses.replace(config, use_pruning=True))
    unpruned = collect(queries, g, tables, cat,
                       dataclasses.replace(config, use_pruning=False))
    agree = sum(
        1 for a, b in zip(pruned.records, unpruned.records)
        if ordering_key(a.latency)[0] == ordering_key(b.latency)[0])
    return {
        "pruned_seconds": pruned.wall_seconds,
        "unpruned_seconds": unpruned.wall_seconds,
        "pruned_sentinels": pruned.sentinel_count,
        "unpruned_sentinels": unpruned.sentinel_count,
        "records": len(pruned.records),
        "class_agreement": agree / max(len(pruned.records), 1),
    }
