import csv
import json
import subprocess
import sys

import pytest

from gpn.cli import main

SPEC = """\
depth = 5
branching = 2.0, 2.6
feature_dim = 5
samples_per_class = 40
n_train_classes = 20
n_test_classes = 5
close_dist_range = 1, 2
far_dist_range = 3, 8
seed = 4
"""

CONFIG = """\
tau_total = 10
hidden_dims = 8
embed_dim = 4
heads = 2
query_per_class = 5
aux_batch = 16
k_n = 2
seed = 1
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.txt").write_text(SPEC)
    (root / "train.txt").write_text(CONFIG)
    assert main(["gen", "--spec", str(root / "spec.txt"), "--out", str(root / "bench")]) == 0
    assert main(["train", "--bench", str(root / "bench"), "--config", str(root / "train.txt"),
                 "--out", str(root / "ckpt")]) == 0
    return root


def test_gen_writes_the_benchmark_layout(workspace):
    names = sorted(p.name for p in (workspace / "bench").iterdir())
    assert names == ["features.csv", "spec.txt", "split_close.txt", "split_far.txt", "taxonomy.edges"]


def test_gen_is_byte_reproducible(workspace, tmp_path):
    assert main(["gen", "--spec", str(workspace / "spec.txt"), "--out", str(tmp_path / "again")]) == 0
    for f in (workspace / "bench").iterdir():
        assert (tmp_path / "again" / f.name).read_bytes() == f.read_bytes()


def test_gen_rejects_shallow_spec(tmp_path, capsys):
    (tmp_path / "bad.txt").write_text("depth = 1\n")
    assert main(["gen", "--spec", str(tmp_path / "bad.txt"), "--out", str(tmp_path / "o")]) == 2
    assert "depth must be >= 3" in capsys.readouterr().err


def test_train_outputs_and_smoke_log(workspace):
    ckpt = workspace / "ckpt"
    assert {"params.bin", "memory.bin", "train.jsonl", "config.txt"} <= {p.name for p in ckpt.iterdir()}
    lines = (ckpt / "train.jsonl").read_text().splitlines()
    assert len(lines) == 10
    rec = json.loads(lines[0])
    assert {"episode", "branch", "loss", "lambda", "lr", "task_classes"} <= set(rec)


def test_train_is_byte_reproducible(workspace, tmp_path):
    assert main(["train", "--bench", str(workspace / "bench"), "--config", str(workspace / "train.txt"),
                 "--out", str(tmp_path / "ck")]) == 0
    for name in ("params.bin", "memory.bin", "train.jsonl"):
        assert (tmp_path / "ck" / name).read_bytes() == (workspace / "ckpt" / name).read_bytes()


def test_train_usage_errors(workspace, tmp_path):
    args = ["train", "--bench", str(tmp_path / "missing"), "--config", str(workspace / "train.txt"),
            "--out", str(tmp_path / "o")]
    assert main(args) == 2
    (tmp_path / "bad.txt").write_text("tau_total = 10\nnot_a_field = 3\n")
    assert main(["train", "--bench", str(workspace / "bench"), "--config", str(tmp_path / "bad.txt"),
                 "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "bad2.txt").write_text("tau_total 10\n")
    assert main(["train", "--bench", str(workspace / "bench"), "--config", str(tmp_path / "bad2.txt"),
                 "--out", str(tmp_path / "o")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_numeric_abort_exits_3(workspace, tmp_path):
    (tmp_path / "hot.txt").write_text(CONFIG + "lr = 1e308\naux_mode = always\n")
    code = main(["train", "--bench", str(workspace / "bench"), "--config", str(tmp_path / "hot.txt"),
                 "--out", str(tmp_path / "o")])
    assert code == 3
    assert json.loads((tmp_path / "o" / "abort.json").read_text())["branch"] == "aux"


def eval_args(ws, *extra):
    return ["eval", "--bench", str(ws / "bench"), "--ckpt", str(ws / "ckpt"), *extra]


def test_eval_single_task_report(workspace, capsys):
    assert main(eval_args(workspace, "--mode", "protonet", "--tasks", "1")) == 0
    out = capsys.readouterr()
    rep = json.loads(out.out)
    assert len(rep["accuracies"]) == 1 and rep["mode"] == "ProtoNet"
    assert "accuracy" in out.err


def test_eval_gpn_at_lambda_one_equals_protonet(workspace, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(eval_args(workspace, "--mode", "gpn", "--lambda", "1", "--tasks", "30", "--out", str(a))) == 0
    assert main(eval_args(workspace, "--mode", "protonet", "--tasks", "30", "--out", str(b))) == 0
    ra, rb = json.loads(a.read_text()), json.loads(b.read_text())
    assert ra["mean"] == rb["mean"] and ra["accuracies"] == rb["accuracies"]


def test_eval_schema_and_csv(workspace, tmp_path):
    out, per_task = tmp_path / "r.json", tmp_path / "t.csv"
    assert main(eval_args(workspace, "--mode", "gpn+", "--regime", "far", "--sampling", "snowball",
                          "--tasks", "12", "--out", str(out), "--csv", str(per_task))) == 0
    rep = json.loads(out.read_text())
    assert {"mean", "ci95", "accuracies", "config"} <= set(rep)
    assert len(per_task.read_text().splitlines()) == 13


def test_eval_mismatch_exits_2(workspace, tmp_path):
    assert main(["eval", "--bench", str(workspace / "bench"), "--ckpt", str(tmp_path), "--tasks", "1"]) == 2
    (tmp_path / "t0.txt").write_text(CONFIG + "t_steps = 0\n")
    assert main(["train", "--bench", str(workspace / "bench"), "--config", str(tmp_path / "t0.txt"),
                 "--out", str(tmp_path / "ck0")]) == 0
    base = ["eval", "--bench", str(workspace / "bench"), "--ckpt", str(tmp_path / "ck0"), "--tasks", "1"]
    assert main(base + ["--mode", "gpn"]) == 2
    assert main(base + ["--mode", "protonet"]) == 0
    assert main(eval_args(workspace, "--mode", "nonsense")) == 2


def test_ablate_direction_and_heads(workspace, tmp_path):
    args = ["ablate", "--bench", str(workspace / "bench"), "--config", str(workspace / "train.txt"),
            "--tasks", "5", "--out", str(tmp_path)]
    assert main(args + ["--axis", "direction"]) == 0
    with open(tmp_path / "ablation_direction.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["variant"] for r in rows] == ["N->C", "F->C", "C->C", "B->P", "M->P"]
    assert all(0.0 <= float(r["mean"]) <= 1.0 and float(r["ci95"]) >= 0.0 for r in rows)
    assert main(args + ["--axis", "heads"]) == 0
    with open(tmp_path / "ablation_heads.csv") as fh:
        assert [r["variant"] for r in csv.DictReader(fh)] == ["k=1", "k=5"]
    assert main(args + ["--axis", "depth"]) == 2


def test_module_entry_point(workspace):
    proc = subprocess.run([sys.executable, "-m", "gpn", "eval", "--bench", str(workspace / "bench"),
                           "--ckpt", str(workspace / "ckpt"), "--mode", "gpn", "--tasks", "2"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["mode"] == "GPN"
    proc = subprocess.run([sys.executable, "-m", "gpn"], capture_output=True, text=True)
    assert proc.returncode == 2
