"""End-to-end command tests: exit codes, files produced, stdout contracts."""

import csv
import json
import math
import os

import numpy as np
import pytest

from chartlm.cli import dispatch, parse_config_file
from chartlm.trees import format_sexpr, read_tree_file

MODEL_CFG = """\
layers = 1
compose_depth = 1
transformer_depth = 1
d = 8
heads = 2
vocab_size = 12
m = 2
parser_dim = 6
parser_hidden = 6
parser_layers = 1
dtype = float64
"""

TRAIN_CFG = """\
epochs = 1
batch_tokens = 8
max_steps = 2
seed = 0
"""


@pytest.fixture
def workdir(tmp_path):
    words = ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k"]
    (tmp_path / "vocab.txt").write_text(
        "[MASK] 0\n" + "".join(f"{w} {i + 1}\n" for i, w in enumerate(words)))
    (tmp_path / "corpus.txt").write_text(
        "a b c d\nb c a\nd e c b a\na\nc d b\n")
    (tmp_path / "config.txt").write_text(MODEL_CFG + TRAIN_CFG)
    return tmp_path


def _p(tmp_path, name):
    return str(tmp_path / name)


# ---------------------------------------------------------------------------
# dispatch and config plumbing
# ---------------------------------------------------------------------------

def test_help_exits_zero(capsys):
    assert dispatch(["--help"]) == 0
    assert "chartlm" in capsys.readouterr().out


def test_unknown_command_is_usage_error(capsys):
    assert dispatch(["frobnicate"]) == 2


def test_missing_file_is_usage_error(tmp_path, capsys):
    rc = dispatch(["parse", "--ckpt", _p(tmp_path, "none.ckpt"),
                   "--input", _p(tmp_path, "none.txt"),
                   "--out", _p(tmp_path, "o.txt")])
    assert rc == 2
    assert "missing file" in capsys.readouterr().err


def test_config_file_parsing(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("d = 16  # comment\nheads = 4\n\nepochs = 7\nphase = fast\n")
    mcfg, tcfg = parse_config_file(str(path))
    assert mcfg.d == 16 and mcfg.heads == 4
    assert tcfg.epochs == 7 and tcfg.phase == "fast"


def test_unknown_config_key_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("bogus = 1\n")
    rc = dispatch(["gradcheck", "--config", str(cfg)])
    assert rc == 2
    assert "unknown config key" in capsys.readouterr().err


def test_bad_config_value_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("d = banana\n")
    assert dispatch(["gradcheck", "--config", str(cfg)]) == 2
    assert "bad value for d" in capsys.readouterr().err


def test_invalid_config_combination_is_numeric_error(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("d = 10\nheads = 4\n")  # not divisible
    assert dispatch(["gradcheck", "--config", str(cfg)]) == 3


# ---------------------------------------------------------------------------
# pretrain / parse / eval round trip
# ---------------------------------------------------------------------------

def test_pretrain_parse_eval_roundtrip(workdir, capsys):
    out = _p(workdir, "run")
    rc = dispatch(["pretrain", "--corpus", _p(workdir, "corpus.txt"),
                   "--vocab", _p(workdir, "vocab.txt"),
                   "--config", _p(workdir, "config.txt"), "--out", out])
    assert rc == 0
    assert "trained 2 steps" in capsys.readouterr().out
    assert os.path.exists(os.path.join(out, "model.ckpt"))

    metrics = [json.loads(l) for l in open(os.path.join(out, "metrics.jsonl"))]
    assert [m["step"] for m in metrics] == [0, 1]

    manifest = json.load(open(os.path.join(out, "manifest.json")))
    assert manifest["command"] == "pretrain"
    assert manifest["config"]["model"]["d"] == 8
    assert len(manifest["inputs"]) == 3  # corpus, vocab, config hashes

    # resume against the finished checkpoint has nothing left to do
    rc = dispatch(["pretrain", "--corpus", _p(workdir, "corpus.txt"),
                   "--resume", os.path.join(out, "model.ckpt"),
                   "--out", _p(workdir, "run2")])
    assert rc == 0
    assert "nothing to do" in capsys.readouterr().out

    # parse the corpus with the trained model, both chart modes
    for mode in ("full", "fast"):
        tree_path = _p(workdir, f"trees_{mode}.txt")
        rc = dispatch(["parse", "--ckpt", os.path.join(out, "model.ckpt"),
                       "--input", _p(workdir, "corpus.txt"),
                       "--mode", mode, "--out", tree_path])
        assert rc == 0
        trees = read_tree_file(tree_path)
        assert len(trees) == 5
        assert format_sexpr(trees[3]) == "(a)"  # single-token line

    # predicted against themselves: perfect score
    capsys.readouterr()
    rc = dispatch(["eval-f1", "--pred", _p(workdir, "trees_full.txt"),
                   "--gold", _p(workdir, "trees_full.txt")])
    assert rc == 0
    assert capsys.readouterr().out.splitlines()[0] == "F1 100.00"


def test_pretrain_without_config_is_usage_error(workdir, capsys):
    rc = dispatch(["pretrain", "--corpus", _p(workdir, "corpus.txt"),
                   "--out", _p(workdir, "run")])
    assert rc == 2
    assert "needs --config" in capsys.readouterr().err


def test_pretrain_vocab_size_mismatch(workdir, capsys):
    cfg = workdir / "bad.txt"
    cfg.write_text(MODEL_CFG.replace("vocab_size = 12", "vocab_size = 13") + TRAIN_CFG)
    rc = dispatch(["pretrain", "--corpus", _p(workdir, "corpus.txt"),
                   "--vocab", _p(workdir, "vocab.txt"),
                   "--config", str(cfg), "--out", _p(workdir, "run")])
    assert rc == 3
    assert "does not match" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# baselines and scoring
# ---------------------------------------------------------------------------

def test_export_trees_baselines(workdir):
    for baseline, third_line in (("left", "(X (X c d) b)"),
                                 ("right", "(X c (X d b))")):
        path = _p(workdir, f"{baseline}.txt")
        rc = dispatch(["export-trees", "--input", _p(workdir, "corpus.txt"),
                       "--out", path, "--baseline", baseline])
        assert rc == 0
        lines = open(path).read().splitlines()
        assert len(lines) == 5
        assert lines[3] == "(a)"
        assert lines[4] == third_line


def test_export_random_trees_deterministic(workdir):
    a, b = _p(workdir, "r1.txt"), _p(workdir, "r2.txt")
    for path in (a, b):
        rc = dispatch(["export-trees", "--input", _p(workdir, "corpus.txt"),
                       "--out", path, "--baseline", "random", "--seed", "5"])
        assert rc == 0
    assert open(a).read() == open(b).read()


def test_eval_f1_mismatched_trees(workdir, capsys):
    left, right = _p(workdir, "l.txt"), _p(workdir, "r.txt")
    dispatch(["export-trees", "--input", _p(workdir, "corpus.txt"),
              "--out", left, "--baseline", "left"])
    short = workdir / "short.txt"
    short.write_text("a b\n")
    dispatch(["export-trees", "--input", str(short), "--out", right,
              "--baseline", "left"])
    capsys.readouterr()
    assert dispatch(["eval-f1", "--pred", left, "--gold", right]) == 3


def test_eval_f1_reports_label_recall(workdir, capsys):
    gold = workdir / "gold.txt"
    gold.write_text("(S (NP a b) (VP c (NP d e)))\n")
    pred = workdir / "pred.txt"
    pred.write_text("(X (X a b) (X c (X d e)))\n")
    assert dispatch(["eval-f1", "--pred", str(pred), "--gold", str(gold)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "F1 100.00"
    assert "NP 100.00" in out and "VP 100.00" in out
    assert not any(line.startswith("X ") for line in out)


# ---------------------------------------------------------------------------
# bench and gradcheck
# ---------------------------------------------------------------------------

def test_bench_csv_bounds(workdir):
    out = _p(workdir, "bench.csv")
    rc = dispatch(["bench", "--lengths", "4..16", "--m", "2", "--out", out])
    assert rc == 0
    rows = list(csv.DictReader(open(out)))
    assert [int(r["n"]) for r in rows] == [4, 8, 16]
    for r in rows:
        n, m = int(r["n"]), int(r["m"])
        assert int(r["cells"]) <= 2 * m * n
        assert int(r["inside_steps"]) <= (m - 1) + 2 * math.ceil(math.log2(n))
        assert int(r["pairs_composed"]) > 0 and float(r["wall_ms"]) >= 0


def test_bench_thread_pool_matches_serial(workdir):
    serial, pooled = _p(workdir, "s.csv"), _p(workdir, "p.csv")
    assert dispatch(["bench", "--lengths", "4,6,8", "--m", "2", "--out", serial]) == 0
    assert dispatch(["bench", "--lengths", "4,6,8", "--m", "2",
                     "--threads", "3", "--out", pooled]) == 0
    strip = lambda path: [{k: v for k, v in row.items() if k != "wall_ms"}
                          for row in csv.DictReader(open(path))]
    assert strip(serial) == strip(pooled)


def test_bench_bad_lengths(workdir, capsys):
    assert dispatch(["bench", "--lengths", "x,y", "--m", "2"]) == 2
    assert dispatch(["bench", "--lengths", "9..4", "--m", "2"]) == 2


def test_gradcheck_passes_on_small_config(workdir, capsys):
    rc = dispatch(["gradcheck", "--config", _p(workdir, "config.txt"),
                   "--seed", "0"])
    out = capsys.readouterr().out
    assert rc == 0, out
    assert "gradcheck passed" in out
