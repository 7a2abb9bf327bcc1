"""Command-line surface: pretrain, parse, eval-f1, bench, export-trees,
gradcheck.

Exit codes are a stable contract: 0 success, 2 usage errors (bad flags,
missing files, malformed config), 3 numeric or validation failures.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .autodiff import Tensor, gradient_check, no_grad
from .evaluation import corpus_f1, label_recalls
from .inside_outside import CioStack, EngineStats, plan_engine, run_stack
from .model import ChartLM, ReCatConfig
from .pruning import build_cell_batches, prune_schedule, split_order
from .synthetic import balanced_scores
from .training import (TrainConfig, Trainer, Vocab, forbidden_boundaries,
                       load_model, read_corpus)
from .trees import (format_sexpr, leaves, left_branching, random_binary,
                    read_tree_file, right_branching, write_tree_file)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config files: flat "key = value" lines covering both config dataclasses
# ---------------------------------------------------------------------------

def _coerce(value: str, default) -> object:
    if isinstance(default, bool):
        low = value.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise UsageError(f"expected a boolean, got {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def parse_config_file(path: str) -> tuple[ReCatConfig, TrainConfig]:
    model_defaults = ReCatConfig()
    train_defaults = TrainConfig()
    mdict: dict = {}
    tdict: dict = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{line_no}: expected key = value")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            try:
                if hasattr(model_defaults, key):
                    mdict[key] = _coerce(value, getattr(model_defaults, key))
                elif hasattr(train_defaults, key):
                    tdict[key] = _coerce(value, getattr(train_defaults, key))
                else:
                    raise UsageError(f"{path}:{line_no}: unknown config key {key!r}")
            except (ValueError, UsageError) as exc:
                if isinstance(exc, UsageError):
                    raise
                raise UsageError(f"{path}:{line_no}: bad value for {key}: {exc}") from None
    return ReCatConfig.from_dict(mdict), TrainConfig.from_dict(tdict)


def blob_sha1(path: str) -> str:
    """Git-style blob hash of a file's contents."""
    data = open(path, "rb").read()
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_pretrain(args) -> int:
    corpus = read_corpus(args.corpus)
    if args.resume:
        trainer = Trainer.resume(args.resume, corpus, out_dir=args.out)
    else:
        if not args.config or not args.vocab:
            raise UsageError("pretrain needs --config and --vocab (or --resume)")
        mcfg, tcfg = parse_config_file(args.config)
        if args.seed is not None:
            tcfg.seed = args.seed
        vocab = Vocab.from_file(args.vocab)
        if mcfg.vocab_size != len(vocab):
            raise ValueError(f"config vocab_size {mcfg.vocab_size} does not match "
                             f"vocabulary size {len(vocab)}")
        model = ChartLM(mcfg, np.random.default_rng(tcfg.seed))
        trainer = Trainer(model, tcfg, corpus, vocab, out_dir=args.out)

    os.makedirs(args.out, exist_ok=True)
    manifest = {
        "command": "pretrain",
        "seed": trainer.cfg.seed,
        "config": {"model": trainer.model.cfg.to_dict(),
                   "train": trainer.cfg.to_dict()},
        "inputs": {os.path.abspath(p): blob_sha1(p)
                   for p in (args.corpus, args.vocab, args.config, args.resume) if p},
        "layout": {"checkpoint": "model.ckpt", "metrics": "metrics.jsonl",
                   "manifest": "manifest.json"},
    }
    with open(os.path.join(args.out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")

    records = trainer.train(metrics_path=os.path.join(args.out, "metrics.jsonl"))
    if records:
        last = records[-1]
        print(f"trained {trainer.step} steps; final mlm_loss {last['mlm_loss']:.4f} "
              f"parser_loss {last['parser_loss']:.4f}")
    else:
        print(f"nothing to do: checkpoint already at step {trainer.step}")
    return 0


def _cmd_parse(args) -> int:
    model, vocab, _ = load_model(args.ckpt)
    sentences = read_corpus(args.input)
    trees = []
    with no_grad():
        for tokens in sentences:
            ids = vocab.encode(tokens)
            forbidden = forbidden_boundaries(tokens)
            if args.mode == "fast":
                out = model.fast_encode(ids, forbidden=forbidden, token_strs=tokens)
            else:
                out = model.forward_pretrain(ids, forbidden=forbidden, token_strs=tokens)
            trees.append(out.tree)
    write_tree_file(args.out, trees)
    print(f"wrote {len(trees)} trees to {args.out}")
    return 0


def _cmd_eval_f1(args) -> int:
    preds = read_tree_file(args.pred)
    golds = read_tree_file(args.gold)
    pieces = []
    for tree in preds:
        toks = [l.token or "" for l in leaves(tree)]
        pieces.append(toks if any(t.startswith("##") for t in toks) else None)
    mean = corpus_f1(preds, golds, pieces, threads=args.threads)
    print(f"F1 {mean:.2f}")
    for label, recall in label_recalls(preds, golds).items():
        if label != "X":
            print(f"{label} {recall:.2f}")
    return 0


def _parse_lengths(spec: str) -> list[int]:
    if ".." in spec:
        lo_s, hi_s = spec.split("..", 1)
        lo, hi = int(lo_s), int(hi_s)
        if lo < 2 or hi < lo:
            raise UsageError(f"bad length range {spec!r}")
        out = []
        n = lo
        while n <= hi:  # doubling ladder, the usual scaling plot
            out.append(n)
            n *= 2
        return out
    try:
        return [int(s) for s in spec.split(",") if s]
    except ValueError:
        raise UsageError(f"bad length list {spec!r}") from None


def _bench_one(n: int, m: int, seed: int) -> dict:
    order = split_order(balanced_scores(n), n)
    schedule = build_cell_batches(prune_schedule(n, m, order))
    rng = np.random.default_rng([seed, n])
    d = 32
    stack = CioStack("cio", layers=1, d=d, heads=4, depth=1, share=True,
                     rng=rng, dtype=np.float32)
    plan = plan_engine(schedule)
    x = Tensor(rng.standard_normal((n, d)).astype(np.float32))
    stats = EngineStats()
    t0 = time.perf_counter()
    with no_grad():
        run_stack(x, stack, plan, stats)
    wall = (time.perf_counter() - t0) * 1000.0
    return {"n": n, "m": m, "cells": schedule.cell_count(),
            "inside_steps": stats.inside_steps,
            "pairs_composed": stats.pairs_composed,
            "batched_calls": stats.batched_calls,
            "wall_ms": round(wall, 3)}


def _cmd_bench(args) -> int:
    lengths = _parse_lengths(args.lengths)
    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            rows = list(pool.map(lambda n: _bench_one(n, args.m, args.seed), lengths))
    else:
        rows = [_bench_one(n, args.m, args.seed) for n in lengths]
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(out, fieldnames=["n", "m", "cells", "inside_steps",
                                                 "pairs_composed", "batched_calls",
                                                 "wall_ms"])
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if args.out:
            out.close()
    return 0


def _cmd_export_trees(args) -> int:
    sentences = read_corpus(args.input)
    rng = np.random.default_rng(args.seed)
    builders = {"random": lambda toks: random_binary(toks, rng),
                "left": left_branching, "right": right_branching}
    build = builders[args.baseline]
    trees = []
    for tokens in sentences:
        if len(tokens) == 1:
            trees.append(left_branching(tokens))
        else:
            trees.append(build(tokens))
    write_tree_file(args.out, trees)
    print(f"wrote {len(trees)} {args.baseline}-baseline trees to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    mcfg, tcfg = parse_config_file(args.config)
    mcfg.dtype = "float64"  # finite differences need the headroom
    mcfg.validate()
    rng = np.random.default_rng(args.seed)
    model = ChartLM(mcfg, rng)
    for p in model.parameters():  # move zero-initialized taps off the origin
        if not np.abs(p.data).sum():
            p.data = rng.standard_normal(p.data.shape) * 0.05

    n = 5
    sentence = rng.integers(0, mcfg.vocab_size, size=n)
    masked = sentence.copy()
    positions = np.array([1, 3])
    targets = sentence[positions]
    masked[positions] = rng.integers(0, mcfg.vocab_size, size=2)

    def build_loss():
        out = model.forward_pretrain(sentence, masked=masked,
                                     target_positions=positions, target_ids=targets)
        return out.parser_loss + out.mlm_loss

    report = gradient_check(build_loss, model.parameters(), rng, samples_per_param=3)
    worst_name = max(report, key=report.get)
    worst = report[worst_name]
    print(f"max relative error {worst:.3e} ({worst_name})")
    if worst >= 1e-3:
        print("gradcheck FAILED", file=sys.stderr)
        return 3
    print("gradcheck passed")
    return 0


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="chartlm",
                                  description="chart language model toolkit")
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run masked pretraining")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("parse", help="write induced trees for a token file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--mode", choices=["full", "fast"], default="full")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_parse)

    p = sub.add_parser("eval-f1", help="bracket F1 and per-label recall")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_cmd_eval_f1)

    p = sub.add_parser("bench", help="efficiency counters over sentence lengths")
    p.add_argument("--lengths", required=True,
                   help="doubling range lo..hi or comma list")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("export-trees", help="baseline trees for a token file")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--baseline", choices=["random", "left", "right"], required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_export_trees)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    return top


def dispatch(argv: list[str]) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse handles its own usage printing
        return 0 if exc.code == 0 else 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename}", file=sys.stderr)
        return 2
    except (ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
