"""Pretraining loop: vocabulary, masking, length-bucketed batching, Adam with
decoupled weight decay, and deterministic resume.

Determinism comes from stateless rng derivation rather than rng serialization:
step s always draws from default_rng([seed, s]) and epoch e shuffles batch
order with default_rng([seed, 10**6 + e]). Resuming at step s therefore
replays exactly what an uninterrupted run would have done.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, asdict

import numpy as np

from .autodiff import Parameter, Tensor
from .checkpoint import (apply_parameters, collect_parameters, load_checkpoint,
                         save_checkpoint)
from .inside_outside import EngineStats
from .model import ChartLM, ReCatConfig

MASK_TOKEN = "[MASK]"


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

class Vocab:
    """Token/id table; ids are dense and fixed by construction order."""

    def __init__(self, tokens: list[str]):
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def mask_id(self) -> int:
        if MASK_TOKEN not in self.index:
            raise ValueError(f"vocabulary has no {MASK_TOKEN} token")
        return self.index[MASK_TOKEN]

    def encode(self, tokens: list[str]) -> np.ndarray:
        try:
            return np.array([self.index[t] for t in tokens], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"unknown token {exc.args[0]!r}") from None

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    @classmethod
    def from_file(cls, path: str) -> "Vocab":
        pairs: list[tuple[str, int]] = []
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 2:
                    raise ValueError(f"{path}:{line_no}: expected 'token id'")
                pairs.append((parts[0], int(parts[1])))
        ids = sorted(i for _, i in pairs)
        if ids != list(range(len(pairs))):
            raise ValueError("vocabulary ids must be dense, starting at 0")
        tokens = [""] * len(pairs)
        for tok, i in pairs:
            tokens[i] = tok
        return cls(tokens)

    def to_file(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, tok in enumerate(self.tokens):
                fh.write(f"{tok} {i}\n")


def read_corpus(path: str) -> list[list[str]]:
    """One sentence per line, whitespace-tokenized; blank lines skipped."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            toks = line.split()
            if toks:
                out.append(toks)
    return out


def forbidden_boundaries(tokens: list[str]) -> set[int]:
    """Boundaries inside '##'-continued word pieces; the parser may not split
    a word. Boundary k separates tokens k and k+1 (1-based)."""
    return {k for k in range(1, len(tokens)) if tokens[k].startswith("##")}


def mask_tokens(ids: np.ndarray, rate: float, rng: np.random.Generator,
                mask_id: int, vocab_size: int
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """BERT-style corruption: each position is picked independently with
    probability `rate`; picked positions become the mask token 80% of the
    time, a uniform random token 10%, and stay unchanged 10%. Returns the
    corrupted ids, the picked positions, and the original ids there."""
    if not 0.0 < rate < 1.0:
        raise ValueError("mask rate must lie in (0, 1)")
    ids = np.asarray(ids)
    picked = np.flatnonzero(rng.random(ids.size) < rate).astype(np.intp)
    x = ids.copy()
    for p in picked:
        roll = rng.random()
        if roll < 0.8:
            x[p] = mask_id
        elif roll < 0.9:
            x[p] = int(rng.integers(0, vocab_size))
    return x, picked, ids[picked]


def batches_by_length(lengths: list[int], budget: int) -> list[list[int]]:
    """Greedy length-sorted batching. Sentences are never split and each
    batch holds at most `budget` tokens."""
    order = sorted(range(len(lengths)), key=lambda i: (lengths[i], i))
    batches: list[list[int]] = []
    cur: list[int] = []
    cur_tokens = 0
    for i in order:
        if lengths[i] > budget:
            raise ValueError(f"sentence {i} has {lengths[i]} tokens, over the batch budget {budget}")
        if cur and cur_tokens + lengths[i] > budget:
            batches.append(cur)
            cur, cur_tokens = [], 0
        cur.append(i)
        cur_tokens += lengths[i]
    if cur:
        batches.append(cur)
    return batches


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay; state keyed by parameter name so it
    survives checkpoints."""

    def __init__(self, params: list[Parameter], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names in optimizer group")
        self.params = list(params)
        self.lr = float(lr)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = p.grad
            if g is None:
                continue
            m, v = self.m[p.name], self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_tensors(self, prefix: str) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for p in self.params:
            out[f"{prefix}.m.{p.name}"] = self.m[p.name]
            out[f"{prefix}.v.{p.name}"] = self.v[p.name]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], prefix: str,
                           t: int) -> None:
        for p in self.params:
            for tag, store in (("m", self.m), ("v", self.v)):
                key = f"{prefix}.{tag}.{p.name}"
                if key not in tensors:
                    raise ValueError(f"checkpoint missing optimizer state {key}")
                arr = tensors[key]
                if tuple(arr.shape) != tuple(p.data.shape):
                    raise ValueError(f"shape mismatch for optimizer state {key}")
                store[p.name] = arr.astype(p.data.dtype, copy=True)
        self.t = int(t)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr_model: float = 1e-3
    lr_parser: float = 1e-3
    epochs: int = 5
    batch_tokens: int = 128
    seed: int = 0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    phase: str = "masked"      # "masked": joint chart-search pretraining;
                               # "fast": frozen parser, tree-only encoding
    checkpoint_every: int = 0  # 0: only a final checkpoint
    max_steps: int = 0         # 0: run all epochs

    def validate(self) -> None:
        if self.lr_model < 0 or self.lr_parser < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.batch_tokens < 1:
            raise ValueError("batch token budget must be positive")
        if self.phase not in ("masked", "fast"):
            raise ValueError(f"unknown training phase {self.phase!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


class Trainer:
    """Joint MLM + hard-EM parser training over an in-memory corpus."""

    def __init__(self, model: ChartLM, cfg: TrainConfig,
                 corpus: list[list[str]], vocab: Vocab,
                 out_dir: str | None = None):
        cfg.validate()
        if not corpus:
            raise ValueError("empty corpus")
        self.model = model
        self.cfg = cfg
        self.vocab = vocab
        self.out_dir = out_dir
        self.sentences = [vocab.encode(s) for s in corpus]
        self.forbidden = [forbidden_boundaries(s) or None for s in corpus]
        self.batches = batches_by_length([len(s) for s in self.sentences],
                                         cfg.batch_tokens)
        betas = (cfg.beta1, cfg.beta2)
        self.opt_model = AdamW(model.model_parameters(), cfg.lr_model, betas,
                               cfg.adam_eps, cfg.weight_decay)
        self.opt_parser = AdamW(model.parser_parameters(), cfg.lr_parser, betas,
                                cfg.adam_eps, cfg.weight_decay)
        self.step = 0

    def _epoch_order(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng([self.cfg.seed, 10 ** 6 + epoch])
        return rng.permutation(len(self.batches))

    def train_step(self, batch: list[int]) -> dict:
        """One forward/backward/update over a batch of sentence indices."""
        t0 = time.perf_counter()
        rng = np.random.default_rng([self.cfg.seed, self.step])
        self.opt_model.zero_grad()
        self.opt_parser.zero_grad()
        stats = EngineStats()
        fast = self.cfg.phase == "fast"

        parser_terms: list[Tensor] = []
        mlm_terms: list[tuple[Tensor, int]] = []
        for idx in batch:
            ids = self.sentences[idx]
            x, positions, targets = mask_tokens(ids, self.model.cfg.mask_rate, rng,
                                                self.vocab.mask_id, len(self.vocab))
            if fast:
                out = self.model.fast_encode(ids, masked=x, target_positions=positions,
                                             target_ids=targets, stats=stats,
                                             forbidden=self.forbidden[idx])
            else:
                out = self.model.forward_pretrain(ids, masked=x,
                                                  target_positions=positions,
                                                  target_ids=targets, stats=stats,
                                                  forbidden=self.forbidden[idx])
            for name, val in (("parser", out.parser_loss), ("mlm", out.mlm_loss)):
                if not np.isfinite(val.data):
                    raise FloatingPointError(
                        f"non-finite {name} loss at step {self.step} on sentence "
                        f"{idx}: ids={np.asarray(ids).tolist()}")
            parser_terms.append(out.parser_loss)
            mlm_terms.append((out.mlm_loss, len(positions)))

        parser_loss = _mean(parser_terms)
        mlm_loss = _weighted_mean(mlm_terms)  # per-masked-token cross entropy
        loss = mlm_loss if fast else mlm_loss + parser_loss
        loss.backward()
        self.opt_model.step()
        if not fast:
            self.opt_parser.step()

        metrics = {
            "step": self.step,
            "mlm_loss": float(mlm_loss.data),
            "parser_loss": float(parser_loss.data),
            "cells_encoded": stats.cells_encoded,
            "batches": stats.batched_calls,
            "wall_ms": (time.perf_counter() - t0) * 1000.0,
        }
        self.step += 1
        return metrics

    def train(self, metrics_path: str | None = None) -> list[dict]:
        """Run from the current step to the configured horizon; appends one
        JSON record per step to `metrics_path` when given."""
        total = self.cfg.epochs * len(self.batches)
        if self.cfg.max_steps:
            total = min(total, self.cfg.max_steps)
        records: list[dict] = []
        fh = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
        try:
            while self.step < total:
                epoch, pos = divmod(self.step, len(self.batches))
                order = self._epoch_order(epoch)
                metrics = self.train_step(self.batches[int(order[pos])])
                records.append(metrics)
                if fh is not None:
                    fh.write(json.dumps(metrics) + "\n")
                    fh.flush()
                every = self.cfg.checkpoint_every
                if self.out_dir and every and self.step % every == 0 and self.step < total:
                    self.save(os.path.join(self.out_dir, f"step{self.step:06d}.ckpt"))
            if self.out_dir:
                self.save(os.path.join(self.out_dir, "model.ckpt"))
        finally:
            if fh is not None:
                fh.close()
        return records

    # ---- persistence -------------------------------------------------------

    def save(self, path: str) -> None:
        tensors = collect_parameters(self.model)
        tensors.update(self.opt_model.state_tensors("opt_model"))
        tensors.update(self.opt_parser.state_tensors("opt_parser"))
        config = {"model": self.model.cfg.to_dict(), "train": self.cfg.to_dict()}
        extra = {"step": self.step, "opt_model_t": self.opt_model.t,
                 "opt_parser_t": self.opt_parser.t, "vocab": self.vocab.tokens}
        save_checkpoint(path, tensors, config, extra)

    @classmethod
    def resume(cls, path: str, corpus: list[list[str]],
               out_dir: str | None = None) -> "Trainer":
        tensors, config, extra = load_checkpoint(path)
        model, vocab = model_from_checkpoint(tensors, config, extra)
        trainer = cls(model, TrainConfig.from_dict(config["train"]), corpus,
                      vocab, out_dir)
        trainer.opt_model.load_state_tensors(tensors, "opt_model", extra["opt_model_t"])
        trainer.opt_parser.load_state_tensors(tensors, "opt_parser", extra["opt_parser_t"])
        trainer.step = int(extra["step"])
        return trainer


def _mean(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total / float(len(terms))


def _weighted_mean(terms: list[tuple[Tensor, int]]) -> Tensor:
    """Mean weighted by masked-position counts, i.e. per-token cross entropy
    over the whole batch; zero-count sentences contribute nothing."""
    count = sum(k for _, k in terms)
    if count == 0:
        return Tensor(np.zeros((), dtype=terms[0][0].data.dtype))
    total = None
    for t, k in terms:
        if k == 0:
            continue
        piece = t * float(k)
        total = piece if total is None else total + piece
    return total / float(count)


def model_from_checkpoint(tensors: dict[str, np.ndarray], config: dict,
                          extra: dict) -> tuple[ChartLM, Vocab]:
    """Rebuild a model and vocabulary from loaded checkpoint contents."""
    mcfg = ReCatConfig.from_dict(config["model"])
    model = ChartLM(mcfg, np.random.default_rng(0))
    apply_parameters(model, tensors)
    return model, Vocab(list(extra["vocab"]))


def load_model(path: str) -> tuple[ChartLM, Vocab, dict]:
    tensors, config, extra = load_checkpoint(path)
    model, vocab = model_from_checkpoint(tensors, config, extra)
    return model, vocab, config
