"""Full model: parser-driven schedules, chart encoder, multi-grained
self-attention over tree nodes, and the masked-LM head.

The parser always sees the unmasked sentence (it decides structure, not
content); the chart encoder sees the corrupted one. Their parameter sets are
disjoint and their losses do not exchange gradients: the induced tree is a
constant target for the parser loss, and the parser's scores never enter the
representation path.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .chart import Schedule
from .inside_outside import (CioStack, EngineStats, StackResult, induce_order,
                             plan_engine, run_stack)
from .nn import AttentionBlock, Embedding, Linear, Module
from .pruning import (BoundaryScorer, SplitStep, apply_nonsplittable,
                      parser_nll, split_order, tree_from_order, tree_schedule,
                      prune_schedule, build_cell_batches)
from .trees import Node, in_order


@dataclass
class ReCatConfig:
    """Model shape knobs; the [i, j, k] triple is (layers, compose_depth,
    transformer_depth)."""

    layers: int = 2
    compose_depth: int = 1
    transformer_depth: int = 2
    share: bool = True
    d: int = 64
    heads: int = 4
    vocab_size: int = 50
    m: int = 2
    mask_rate: float = 0.15
    max_len: int = 256
    tie_mlm: bool = True
    parser_dim: int = 64
    parser_hidden: int = 64
    parser_layers: int = 1
    dtype: str = "float32"

    def validate(self) -> None:
        positive = ["layers", "compose_depth", "d", "heads", "vocab_size", "m",
                    "max_len", "parser_dim", "parser_hidden", "parser_layers"]
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"config field {name} must be positive")
        if self.transformer_depth < 0:  # 0 = no contextualization over nodes
            raise ValueError("config field transformer_depth must be nonnegative")
        if self.m < 2:
            raise ValueError("pruning window m must be >= 2")
        if not 0.0 < self.mask_rate < 1.0:
            raise ValueError("mask_rate must lie in (0, 1)")
        if self.d % self.heads != 0:
            raise ValueError(f"model dim {self.d} not divisible by {self.heads} heads")
        np.dtype(self.dtype)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ReCatConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class ForwardOutput:
    nodes: Tensor             # (2n-1, d) contextualized node representations
    tree: Node                # induced (or parser) tree
    logits: Tensor            # (n, vocab) MLM logits at terminal nodes
    parser_loss: Tensor
    mlm_loss: Tensor
    result: StackResult
    order: list[SplitStep]    # the tree as split decisions
    schedule: Schedule


class ChartLM(Module):
    """Parser + chart encoder + node transformer + tied MLM head."""

    def __init__(self, cfg: ReCatConfig, rng: np.random.Generator):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        dt = cfg.np_dtype
        self.embedding = self._child(Embedding("model.emb", cfg.vocab_size, cfg.d, rng, dt))
        self.cio = self._child(CioStack("cio", cfg.layers, cfg.d, cfg.heads,
                                        cfg.compose_depth, cfg.share, rng, dt))
        self.encoder = self._child(AttentionBlock("encoder", cfg.d, cfg.heads,
                                                  cfg.transformer_depth, rng, dt))
        self.mlm_bias = self._param("mlm.bias", np.zeros(cfg.vocab_size, dtype=dt))
        self.mlm_head: Linear | None = None
        if not cfg.tie_mlm:
            self.mlm_head = self._child(Linear("mlm.head", cfg.d, cfg.vocab_size, rng, dt))
        self.parser = self._child(BoundaryScorer("parser", cfg.vocab_size, cfg.parser_dim,
                                                 cfg.parser_hidden, cfg.parser_layers,
                                                 rng, dt))

    # ---- parameter groups (hard-EM: optimized by separate losses) ---------

    def parser_parameters(self) -> list[Parameter]:
        return self.parser.parameters()

    def model_parameters(self) -> list[Parameter]:
        parser = {id(p) for p in self.parser.parameters()}
        return [p for p in self.parameters() if id(p) not in parser]

    # ---- forward paths -----------------------------------------------------

    def _check_length(self, ids: np.ndarray) -> int:
        n = int(np.asarray(ids).size)
        if n == 0:
            raise ValueError("empty sentence")
        if n > self.cfg.max_len:
            raise ValueError(f"sentence length {n} exceeds configured max {self.cfg.max_len}")
        return n

    def _parse(self, sentence: np.ndarray, forbidden: set[int] | None
               ) -> tuple[Tensor, list[SplitStep]]:
        scores = self.parser(sentence)
        if forbidden:
            scores = apply_nonsplittable(scores, forbidden)
        return scores, split_order(scores.data, int(np.asarray(sentence).size))

    def forward_pretrain(self, sentence: np.ndarray, masked: np.ndarray | None = None,
                         target_positions: np.ndarray | None = None,
                         target_ids: np.ndarray | None = None,
                         forbidden: set[int] | None = None,
                         schedule: Schedule | None = None,
                         token_strs: list[str] | None = None,
                         stats: "EngineStats | None" = None) -> ForwardOutput:
        """Standard (chart-search) forward pass.

        `sentence` is the uncorrupted id sequence (parser input and schedule
        source); `masked` is what the encoder sees. Targets give original ids
        at corrupted positions; with none, mlm_loss is 0 by convention.
        """
        sentence = np.asarray(sentence)
        n = self._check_length(sentence)
        scores, _ = self._parse(sentence, forbidden)
        if schedule is None:
            schedule = build_cell_batches(
                prune_schedule(n, self.cfg.m, split_order(scores.data, n)))
        plan = plan_engine(schedule)

        x = self.embedding(masked if masked is not None else sentence)
        result = run_stack(x, self.cio, plan, stats)

        z_order = induce_order(result, forbidden)
        strs = token_strs if token_strs is not None else [str(t) for t in sentence]
        tree = tree_from_order(z_order, strs)
        parser_loss = parser_nll(scores, z_order)
        if not isinstance(parser_loss, Tensor):  # n = 1: no decisions
            parser_loss = Tensor(np.zeros((), dtype=x.data.dtype))

        nodes, logits = self._encode_nodes(tree, result)
        mlm_loss = self._mlm_loss(logits, target_positions, target_ids, x.data.dtype)
        return ForwardOutput(nodes=nodes, tree=tree, logits=logits,
                             parser_loss=parser_loss, mlm_loss=mlm_loss,
                             result=result, order=z_order, schedule=schedule)

    def fast_encode(self, sentence: np.ndarray, forbidden: set[int] | None = None,
                    token_strs: list[str] | None = None,
                    masked: np.ndarray | None = None,
                    target_positions: np.ndarray | None = None,
                    target_ids: np.ndarray | None = None,
                    stats: "EngineStats | None" = None) -> ForwardOutput:
        """Trust-the-parser mode: compose along the decoded tree only.

        The schedule degenerates to one split per cell, so each layer costs
        exactly 2(n-1) compositions; everything downstream is unchanged.
        """
        sentence = np.asarray(sentence)
        n = self._check_length(sentence)
        scores, order = self._parse(sentence, forbidden)
        plan = plan_engine(tree_schedule(n, order))

        x = self.embedding(masked if masked is not None else sentence)
        result = run_stack(x, self.cio, plan, stats)

        strs = token_strs if token_strs is not None else [str(t) for t in sentence]
        tree = tree_from_order(order, strs)
        parser_loss = parser_nll(scores, order)
        if not isinstance(parser_loss, Tensor):
            parser_loss = Tensor(np.zeros((), dtype=x.data.dtype))

        nodes, logits = self._encode_nodes(tree, result)
        mlm_loss = self._mlm_loss(logits, target_positions, target_ids, x.data.dtype)
        return ForwardOutput(nodes=nodes, tree=tree, logits=logits,
                             parser_loss=parser_loss, mlm_loss=mlm_loss,
                             result=result, order=order, schedule=plan.schedule)

    # ---- shared tails ------------------------------------------------------

    def _encode_nodes(self, tree: Node, result: StackResult) -> tuple[Tensor, Tensor]:
        """Gather outside reps of the tree's 2n-1 nodes (in-order, so leaves
        stay in token order), contextualize them, and read MLM logits at the
        terminal positions."""
        ordered = in_order(tree)
        n = result.plan.n
        if len(ordered) != 2 * n - 1:
            raise ValueError(f"expected {2 * n - 1} nodes, got {len(ordered)}")
        rows = np.array([result.plan.row_of[node.span] for node in ordered], dtype=np.intp)
        gathered = ad.gather(result.final.outside, rows, axis=0)
        encoded = self.encoder(ad.reshape(gathered, (1,) + gathered.shape))
        encoded = ad.reshape(encoded, gathered.shape)

        term_idx = np.array([p for p, node in enumerate(ordered) if node.is_leaf],
                            dtype=np.intp)
        terminals = ad.gather(encoded, term_idx, axis=0)
        if self.mlm_head is not None:
            logits = self.mlm_head(terminals)
        else:
            logits = ad.matmul(terminals, ad.transpose(self.embedding.table, (1, 0)))
        logits = logits + self.mlm_bias
        return encoded, logits

    def _mlm_loss(self, logits: Tensor, positions: np.ndarray | None,
                  targets: np.ndarray | None, dtype) -> Tensor:
        if positions is None or len(positions) == 0:
            return Tensor(np.zeros((), dtype=dtype))
        positions = np.asarray(positions, dtype=np.intp)
        targets = np.asarray(targets, dtype=np.intp)
        if positions.shape != targets.shape:
            raise ValueError("positions/targets length mismatch")
        rows = ad.gather(logits, positions, axis=0)
        logp = ad.log_softmax(rows, axis=-1)
        picked = ad.take_pairs(logp, np.arange(len(positions)), targets)
        return -ad.tmean(picked)
