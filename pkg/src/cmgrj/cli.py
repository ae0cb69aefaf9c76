"""Command-line front door: dataset generation, latency collection, model
training, plan selection, and the evaluation/ablation reports.

Every subcommand reads defaults from an optional JSON config file
(``--config``); explicit flags always win.  The file may hold flat keys
applied wherever a flag of that name exists, plus per-subcommand sections::

    {"probe-timeout": 30, "collect": {"mode": "measured"}}
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

from . import baselines, benchgen, cmlero, featurizer, harness
from .datamodel import DatasetError, load_dataset
from .engines import (
    CostModelConfig,
    EngineError,
    mbps,
    plan_graph_query,
    plan_text,
    run_candidate,
)
from .explorer import ExplorerError, enumerate_candidates
from .featurizer import FeatureConfig, FeaturizeError
from .frontend import ParseError, ValidationError, parse_query
from .harness import CollectConfig, HarnessError


def _cost_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--mode", choices=["synthetic", "measured"],
                        default="synthetic", help="latency accounting mode")
    parser.add_argument("--bandwidth-mbps", type=float, default=50.0,
                        help="simulated link rate between the engines")
    parser.add_argument("--rtt", type=float, default=0.05,
                        help="seconds of latency per transfer batch")
    parser.add_argument("--per-row-overhead", type=float, default=1e-6,
                        help="seconds of serialization cost per shipped row")
    parser.add_argument("--probe-timeout", type=float, default=60.0,
                        help="count-probe budget in seconds (T1)")
    parser.add_argument("--transfer-cap-rows", type=int, default=1_000_000,
                        help="result rows beyond which a plan is marked LARGE")


def _cost_config(args) -> CostModelConfig:
    return CostModelConfig(
        mode=args.mode,
        bandwidth=mbps(args.bandwidth_mbps),
        rtt=args.rtt,
        per_row_overhead=args.per_row_overhead,
        probe_timeout=args.probe_timeout,
        transfer_cap_rows=args.transfer_cap_rows,
    )


def _hyper_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--lr", type=float, default=0.01)
    parser.add_argument("--epochs", type=int, default=100)
    parser.add_argument("--batch", type=int, default=64)
    parser.add_argument("--train-seed", type=int, default=0)


def _hyper(args) -> cmlero.TrainHyper:
    return cmlero.TrainHyper(lr=args.lr, epochs=args.epochs, batch=args.batch,
                             seed=args.train_seed)


def _load_log(args):
    records = harness.read_records(args.log)
    fcfg, features = featurizer.load_features(args.features)
    return records, features, fcfg


def _split_names(workload_dir: str, which: str, queries) -> list[str]:
    if which == "all":
        return sorted(queries)
    path = os.path.join(workload_dir, "split.json")
    if not os.path.exists(path):
        raise HarnessError(f"--use {which} needs {path}")
    with open(path, encoding="utf-8") as fh:
        split = json.load(fh)
    return sorted(split[which])


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = benchgen.preset_config(args.profile, scale=args.scale, seed=args.seed)
    manifest = benchgen.generate_dataset(cfg, args.out)
    print(f"dataset: {manifest}")
    if args.queries > 0:
        wl_seed = args.seed if args.workload_seed is None else args.workload_seed
        paths = benchgen.generate_workload(
            manifest, args.queries, seed=wl_seed,
            min_nonempty=args.min_nonempty,
            var_length_fraction=args.var_length_fraction)
        print(f"workload: {len(paths)} queries under "
              f"{os.path.dirname(paths[0]) if paths else args.out}")
    return 0


def cmd_collect(args) -> int:
    g, tables, cat = load_dataset(args.dataset)
    queries, _ = harness.load_workload(args.workload, cat)
    config = CollectConfig(cost=_cost_config(args),
                           use_pruning=not args.no_pruning,
                           warmup_runs=args.warmup, repeats=args.repeats)
    res = harness.collect(queries, g, tables, cat, config)
    harness.write_records(args.log, res.records)
    featurizer.dump_features(args.features, res.feature_config, res.features)
    print(f"collected {len(res.records)} records over {len(queries)} queries "
          f"in {res.wall_seconds:.2f}s ({res.sentinel_count} pruned)")
    print(f"log: {args.log}\nfeatures: {args.features}")
    return 0


def cmd_train(args) -> int:
    records, features, fcfg = _load_log(args)
    names = None
    if args.split_dir is not None:
        queries = {r.query for r in records}
        names = _split_names(args.split_dir, args.use, queries)
    hyper = _hyper(args)
    losses: list[float] = []
    callback = lambda epoch, loss: losses.append(loss)  # noqa: E731
    if args.model == "cmlero":
        pairs = harness.build_pairs(records, features, t1=args.probe_timeout,
                                    queries=names)
        if not pairs:
            raise HarnessError("no usable training pairs in the log")
        weights = cmlero.train(pairs, hyper, fcfg, callback=callback)
        print(f"trained comparator on {len(pairs)} pairs")
    else:
        samples = harness.regression_samples(records, features, queries=names)
        if not samples:
            raise HarnessError("no measured rows to regress on")
        weights = baselines.train_rlm(samples, hyper, fcfg, callback=callback)
        print(f"trained regressor on {len(samples)} samples")
    cmlero.save_weights(args.out, weights)
    if losses:
        print(f"final epoch loss: {losses[-1]:.6f}")
    print(f"weights: {args.out}")
    return 0


def cmd_select(args) -> int:
    g, tables, cat = load_dataset(args.dataset)
    with open(args.query, encoding="utf-8") as fh:
        q = parse_query(fh.read(), cat, name=os.path.basename(args.query))
    space = enumerate_candidates(q, cat, tables)
    seconds = None
    if args.optimizer in ("cmlero", "rlm"):
        if args.weights is None:
            raise HarnessError(f"--weights is required for {args.optimizer}")
        w = cmlero.load_weights(args.weights)
        fcfg = FeatureConfig(tables=w.tables, labels=w.labels, bounds=w.bounds)
        estimated = plan_graph_query(space.candidates[0].graph_expr, cat)
        t0 = time.perf_counter()
        feats = [featurizer.featurize(p, estimated, cat, fcfg)
                 for p in space.candidates]
        idx = harness.select_index(args.optimizer, space, cat,
                                   features=feats, weights=w)
        seconds = time.perf_counter() - t0
    else:
        idx = harness.select_index(args.optimizer, space, cat,
                                   ts_threshold=args.ts_threshold)
    picked = space.candidates[idx]
    moved = ", ".join(sorted(picked.movement)) or "(none)"
    print(f"query: {q.name}")
    print(f"candidates: {len(space.candidates)}")
    print(f"selected: index {idx}, moving {moved}")
    if seconds is not None:
        print(f"inference: {seconds * 1000:.1f} ms")
    if args.show_plan:
        print(plan_text(plan_graph_query(picked.graph_expr, cat)))
    if args.execute:
        out = run_candidate(picked, g, tables, cat, _cost_config(args))
        print(f"latency: {out.latency:.4f}s "
              f"({out.rows_moved} rows out, {out.rows_back} rows back, "
              f"{len(out.result.rows)} result rows)")
    return 0


def _eval_selections(args, records, features, fcfg, spaces, cat, names):
    selections: dict[str, dict[str, int]] = {}
    for optimizer in args.optimizers.split(","):
        optimizer = optimizer.strip()
        if not optimizer:
            continue
        if optimizer == "optimal":
            selections["optimal"] = harness.optimal_selections(records, queries=names)
            continue
        weights = None
        if optimizer in ("cmlero", "rlm"):
            path = args.weights_cmlero if optimizer == "cmlero" else args.weights_rlm
            if path is None:
                raise HarnessError(f"--weights-{optimizer} is required to "
                                   f"evaluate {optimizer}")
            weights = cmlero.load_weights(path, expect_width=fcfg.width)
        choices = {}
        for qname in names:
            feats = None
            if weights is not None:
                feats = harness.query_features(qname, spaces[qname], features)
            choices[qname] = harness.select_index(
                optimizer, spaces[qname], cat, features=feats, weights=weights,
                ts_threshold=args.ts_threshold)
        selections[optimizer] = choices
    return selections


def cmd_eval(args) -> int:
    g, tables, cat = load_dataset(args.dataset)
    queries, split = harness.load_workload(args.workload, cat)
    records, features, fcfg = _load_log(args)
    names = sorted(split[args.use]) if args.use != "all" else sorted(queries)
    spaces = harness.build_spaces({n: queries[n] for n in names}, cat, tables)
    selections = _eval_selections(args, records, features, fcfg, spaces, cat, names)
    top_n = tuple(int(n) for n in args.top_n.split(","))
    report = harness.evaluate(selections, records, t1=args.probe_timeout,
                              top_n=top_n)
    print(report.text())
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(report.csv())
        print(f"csv: {args.csv}")
    return 0


def cmd_study_size(args) -> int:
    g, tables, cat = load_dataset(args.dataset)
    queries, split = harness.load_workload(args.workload, cat)
    records, features, fcfg = _load_log(args)
    spaces = harness.build_spaces(queries, cat, tables)
    sizes = [int(s) for s in args.sizes.split(",")]
    rows = harness.study_training_size(
        sizes, seed=args.seed, model=args.model,
        train_queries=split["train"], test_queries=split["test"],
        spaces=spaces, records=records, features=features,
        feature_config=fcfg, hyper=_hyper(args), t1=args.probe_timeout)
    print(harness.study_text(rows))
    return 0


def cmd_study_pruning(args) -> int:
    g, tables, cat = load_dataset(args.dataset)
    queries, _ = harness.load_workload(args.workload, cat)
    config = CollectConfig(cost=_cost_config(args),
                           warmup_runs=args.warmup, repeats=args.repeats)
    out = harness.study_pruning(queries, g, tables, cat, config)
    print(f"records per pass:   {out['records']}")
    print(f"with probe:         {out['pruned_seconds']:.2f}s, "
          f"{out['pruned_sentinels']} sentinels")
    print(f"without probe:      {out['unpruned_seconds']:.2f}s, "
          f"{out['unpruned_sentinels']} sentinels")
    print(f"class agreement:    {out['class_agreement']:.3f}")
    return 0


# ---------------------------------------------------------------------------
# Parser assembly
# ---------------------------------------------------------------------------

def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="cmgrj",
        description="Graph/relational middleware with learned data movement")
    parser.add_argument("--config", help="JSON file with flag defaults")
    sub = parser.add_subparsers(dest="command", required=True)
    subs: dict[str, argparse.ArgumentParser] = {}

    p = subs["gen"] = sub.add_parser("gen", help="generate a dataset and workload")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--profile", choices=["t1", "t2"], default="t1")
    p.add_argument("--scale", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--queries", type=int, default=20,
                   help="workload size; 0 skips workload generation")
    p.add_argument("--workload-seed", type=int, default=None)
    p.add_argument("--min-nonempty", type=float, default=0.5)
    p.add_argument("--var-length-fraction", type=float, default=0.1)
    p.set_defaults(func=cmd_gen)

    p = subs["collect"] = sub.add_parser("collect", help="run every candidate plan")
    p.add_argument("--dataset", required=True, help="manifest.json path")
    p.add_argument("--workload", required=True, help="directory of .cmq files")
    p.add_argument("--log", required=True, help="latency log to write (JSONL)")
    p.add_argument("--features", required=True, help="feature sidecar to write")
    p.add_argument("--no-pruning", action="store_true")
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--repeats", type=int, default=3)
    _cost_flags(p)
    p.set_defaults(func=cmd_collect)

    p = subs["train"] = sub.add_parser("train", help="fit a plan ranker on a log")
    p.add_argument("--log", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True, help="weights file to write")
    p.add_argument("--model", choices=["cmlero", "rlm"], default="cmlero")
    p.add_argument("--split-dir", default=None,
                   help="workload directory holding split.json")
    p.add_argument("--use", choices=["train", "test", "all"], default="train")
    p.add_argument("--probe-timeout", type=float, default=60.0,
                   help="T1 used for sentinel stand-in durations")
    _hyper_flags(p)
    p.set_defaults(func=cmd_train)

    p = subs["select"] = sub.add_parser("select", help="pick a plan for one query")
    p.add_argument("--dataset", required=True)
    p.add_argument("--query", required=True, help="a .cmq file")
    p.add_argument("--optimizer", choices=["raw", "ts", "fvn", "rlm", "cmlero"],
                   default="cmlero")
    p.add_argument("--weights", default=None)
    p.add_argument("--ts-threshold", type=int, default=None)
    p.add_argument("--show-plan", action="store_true")
    p.add_argument("--execute", action="store_true")
    _cost_flags(p)
    p.set_defaults(func=cmd_select)

    p = subs["eval"] = sub.add_parser("eval", help="score optimizers on a log")
    p.add_argument("--dataset", required=True)
    p.add_argument("--workload", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--optimizers", default="raw,ts,fvn,cmlero,optimal")
    p.add_argument("--weights-cmlero", default=None)
    p.add_argument("--weights-rlm", default=None)
    p.add_argument("--ts-threshold", type=int, default=5000)
    p.add_argument("--top-n", default="1,3,5")
    p.add_argument("--use", choices=["train", "test", "all"], default="test")
    p.add_argument("--probe-timeout", type=float, default=60.0)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_eval)

    p = subs["study-size"] = sub.add_parser(
        "study-size", help="retrain at several training-set sizes")
    p.add_argument("--dataset", required=True)
    p.add_argument("--workload", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--sizes", required=True, help="comma-separated query counts")
    p.add_argument("--model", choices=["cmlero", "rlm"], default="cmlero")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probe-timeout", type=float, default=60.0)
    _hyper_flags(p)
    p.set_defaults(func=cmd_study_size)

    p = subs["study-pruning"] = sub.add_parser(
        "study-pruning", help="collection cost with and without the count probe")
    p.add_argument("--dataset", required=True)
    p.add_argument("--workload", required=True)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--repeats", type=int, default=3)
    _cost_flags(p)
    p.set_defaults(func=cmd_study_pruning)

    return parser, subs


def _apply_config(path: str, command: str,
                  subparser: argparse.ArgumentParser) -> None:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise HarnessError("config file must hold a JSON object")
    section = doc.pop(command, {})
    if not isinstance(section, dict):
        raise HarnessError(f"config section {command!r} must be an object")
    known = {a.dest for a in subparser._actions}
    merged = {}
    for source in (doc, section):
        for key, value in source.items():
            dest = key.replace("-", "_")
            if dest in known:
                merged[dest] = value
            elif source is section:
                raise HarnessError(f"config key {key!r} unknown to {command!r}")
            # flat keys not used by this subcommand are other commands' defaults
    subparser.set_defaults(**merged)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    command = next((a for a in argv if a in subs), None)
    config_path = None
    for i, arg in enumerate(argv):
        if arg == "--config" and i + 1 < len(argv):
            config_path = argv[i + 1]
        elif arg.startswith("--config="):
            config_path = arg.split("=", 1)[1]
    try:
        if config_path is not None and command is not None:
            _apply_config(config_path, command, subs[command])
        args = parser.parse_args(argv)
        return args.func(args)
    except (HarnessError, EngineError, ExplorerError, FeaturizeError,
            DatasetError, ParseError, ValidationError, benchgen.GenError,
            cmlero.ModelError, cmlero.TrainingError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
