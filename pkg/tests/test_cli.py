import json
import os

import pytest

from cmgrj.cli import main
from cmgrj.cmlero import load_weights
from cmgrj.harness import read_records

from conftest import MICRO_QUERY_TEXT, write_micro_dataset


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A generated dataset + workload with a collected log and trained weights."""
    root = tmp_path_factory.mktemp("cli")
    d = str(root / "data")
    log = str(root / "log.jsonl")
    feats = str(root / "features.jsonl")
    assert main(["gen", "--out", d, "--profile", "t1", "--scale", "0.002",
                 "--seed", "1", "--queries", "8"]) == 0
    assert main(["collect", "--dataset", f"{d}/manifest.json",
                 "--workload", f"{d}/workload",
                 "--log", log, "--features", feats]) == 0
    return {"root": str(root), "data": d, "log": log, "features": feats,
            "manifest": f"{d}/manifest.json", "workload": f"{d}/workload"}


def test_gen_and_collect_outputs(workdir):
    assert os.path.exists(workdir["manifest"])
    assert os.path.exists(os.path.join(workdir["workload"], "split.json"))
    records = read_records(workdir["log"])
    queries = {r.query for r in records}
    assert len(queries) == 8
    assert all(not r.is_sentinel for r in records)


def test_train_select_eval_cycle(workdir, capsys):
    w = os.path.join(workdir["root"], "w.json")
    wr = os.path.join(workdir["root"], "wr.json")
    assert main(["train", "--log", workdir["log"], "--features",
                 workdir["features"], "--out", w,
                 "--split-dir", workdir["workload"],
                 "--epochs", "5", "--lr", "0.05"]) == 0
    assert main(["train", "--log", workdir["log"], "--features",
                 workdir["features"], "--out", wr, "--model", "rlm",
                 "--split-dir", workdir["workload"],
                 "--epochs", "4", "--lr", "0.02"]) == 0
    assert load_weights(w).width == load_weights(wr).width
    capsys.readouterr()

    query = os.path.join(workdir["workload"], "q000.cmq")
    assert main(["select", "--dataset", workdir["manifest"], "--query", query,
                 "--optimizer", "cmlero", "--weights", w, "--execute"]) == 0
    out = capsys.readouterr().out
    assert "selected: index" in out
    assert "inference:" in out and "latency:" in out

    assert main(["eval", "--dataset", workdir["manifest"],
                 "--workload", workdir["workload"],
                 "--log", workdir["log"], "--features", workdir["features"],
                 "--optimizers", "raw,ts,fvn,cmlero,rlm,optimal",
                 "--weights-cmlero", w, "--weights-rlm", wr,
                 "--ts-threshold", "100"]) == 0
    table = capsys.readouterr().out
    for name in ("raw", "ts", "fvn", "cmlero", "rlm", "optimal"):
        assert name in table
    assert "avg_q" in table and "top3_hr" in table


def test_eval_writes_csv(workdir, tmp_path, capsys):
    csv_path = str(tmp_path / "report.csv")
    assert main(["eval", "--dataset", workdir["manifest"],
                 "--workload", workdir["workload"],
                 "--log", workdir["log"], "--features", workdir["features"],
                 "--optimizers", "raw,optimal", "--csv", csv_path]) == 0
    capsys.readouterr()
    lines = open(csv_path).read().strip().splitlines()
    assert lines[0].startswith("optimizer,")
    assert len(lines) == 3


def test_study_commands(workdir, capsys):
    assert main(["study-size", "--dataset", workdir["manifest"],
                 "--workload", workdir["workload"], "--log", workdir["log"],
                 "--features", workdir["features"], "--sizes", "2,4",
                 "--epochs", "3", "--lr", "0.05"]) == 0
    out = capsys.readouterr().out
    assert "size" in out and "top1_hr" in out
    assert main(["study-pruning", "--dataset", workdir["manifest"],
                 "--workload", workdir["workload"],
                 "--probe-timeout", "0.001"]) == 0
    out = capsys.readouterr().out
    assert "class agreement" in out
    assert "with probe" in out


def test_select_rule_based_with_config(tmp_path, capsys):
    manifest = write_micro_dataset(str(tmp_path / "micro"))
    qfile = str(tmp_path / "m.cmq")
    with open(qfile, "w", encoding="utf-8") as fh:
        fh.write(MICRO_QUERY_TEXT)
    conf = str(tmp_path / "conf.json")
    with open(conf, "w", encoding="utf-8") as fh:
        json.dump({"ts-threshold": 3, "select": {"optimizer": "ts"}}, fh)
    assert main(["--config", conf, "select", "--dataset", manifest,
                 "--query", qfile]) == 0
    assert "moving un" in capsys.readouterr().out
    # an explicit flag beats the config value
    assert main(["--config", conf, "select", "--dataset", manifest,
                 "--query", qfile, "--ts-threshold", "1"]) == 0
    assert "moving (none)" in capsys.readouterr().out


def test_config_rejects_unknown_key(tmp_path, capsys):
    conf = str(tmp_path / "conf.json")
    with open(conf, "w", encoding="utf-8") as fh:
        json.dump({"select": {"no-such-flag": 1}}, fh)
    assert main(["--config", conf, "select", "--dataset", "x", "--query", "y"]) == 2
    assert "no-such-flag" in capsys.readouterr().err


def test_missing_dataset_is_reported(workdir, capsys):
    code = main(["select", "--dataset", "/nonexistent/m.json",
                 "--query", os.path.join(workdir["workload"], "q000.cmq"),
                 "--optimizer", "raw"])
    assert code == 2
    assert "error:" in capsys.readouterr().err
