"""Split scoring and chart pruning.

A small recurrent scorer assigns one logit per token boundary. Decoding those
logits top down (recursive argmax) yields a binary tree; replaying the same
tree bottom up as a sequence of merges decides which chart cells survive and
which split points each cell keeps, so chart size stays linear in sentence
length for a fixed window m.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .chart import Schedule, Span, parents_from_splits, validate_schedule
from .nn import BiLstm, Embedding, Mlp, Module
from .trees import Node, branch, leaf


@dataclass(frozen=True)
class SplitStep:
    """One top-down decision: `span` was divided at boundary `split`."""

    split: int
    span: Span


SplitOrder = list[SplitStep]


class BoundaryScorer(Module):
    """Bidirectional recurrent encoder with a two-layer head per boundary.

    Scores are produced from unmasked token ids and are consumed in two
    places that must not exchange gradients: tree decoding (no gradient) and
    the tree log-likelihood (gradient to these parameters only).
    """

    def __init__(self, name: str, vocab_size: int, emb_dim: int, hidden: int,
                 layers: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.vocab_size = vocab_size
        self.hidden = hidden
        self.emb = self._child(Embedding(f"{name}.emb", vocab_size, emb_dim, rng, dtype))
        self.rnn = self._child(BiLstm(f"{name}.rnn", emb_dim, hidden, layers, rng, dtype))
        self.head = self._child(Mlp(f"{name}.head", 2 * hidden, hidden, 1, rng, dtype))

    def __call__(self, token_ids: np.ndarray) -> Tensor:
        """Logits for boundaries 1..n-1; shape (n-1,). n = 1 gives shape (0,)."""
        ids = np.asarray(token_ids)
        if ids.ndim != 1 or ids.size == 0:
            raise ValueError("token_ids must be a non-empty 1d array")
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise ValueError(f"token id out of range for vocab size {self.vocab_size}")
        n = ids.size
        if n == 1:
            return Tensor(np.zeros((0,), dtype=self.emb.table.data.dtype))
        states = self.rnn(self.emb(ids))  # (n, 2*hidden)
        h = self.hidden
        # boundary k sits between tokens k and k+1: forward state of the
        # prefix, backward state of the suffix
        feats = ad.concat([states[0:n - 1, 0:h], states[1:n, h:2 * h]], axis=1)
        return self.head(feats).reshape((n - 1,))


def apply_nonsplittable(scores, forbidden: set[int] | frozenset[int]):
    """Force boundaries in `forbidden` (1-based) to -inf.

    Works on a plain array or a taped tensor; taped masking is additive so
    gradients still reach the admissible positions. Raises when nothing
    admissible remains for a multi-token sentence.
    """
    data = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    n_boundaries = data.shape[0]
    if n_boundaries and forbidden >= set(range(1, n_boundaries + 1)):
        raise ValueError("no admissible tree: every boundary is non-splittable")
    bad = [k for k in forbidden if 1 <= k <= n_boundaries]
    if not bad:
        return scores
    mask = np.zeros(n_boundaries, dtype=data.dtype)
    mask[np.asarray(bad) - 1] = -np.inf
    if isinstance(scores, Tensor):
        return scores + Tensor(mask)
    out = data.copy()
    out[np.asarray(bad) - 1] = -np.inf
    return out


def split_order(scores: np.ndarray, n: int) -> SplitOrder:
    """Top-down greedy decoding of boundary scores into an ordered tree.

    The sentence span picks its argmax boundary, then each sub-span does the
    same; decisions are emitted in descending score order (a child's chosen
    score never exceeds its parent's, so this is a global sort). Ties go to
    the smaller boundary index.
    """
    v = np.asarray(scores, dtype=np.float64)
    if v.shape != (n - 1,):
        raise ValueError(f"expected {n - 1} boundary scores, got shape {v.shape}")
    order: SplitOrder = []
    if n == 1:
        return order
    heap: list[tuple[float, int, int, int]] = []

    def push(i: int, j: int) -> None:
        if j > i:
            seg = v[i - 1:j - 1]
            k = i + int(np.argmax(seg))
            heapq.heappush(heap, (-float(seg[k - i]), k, i, j))

    push(1, n)
    while heap:
        _, k, i, j = heapq.heappop(heap)
        order.append(SplitStep(k, (i, j)))
        push(i, k)
        push(k + 1, j)
    return order


def tree_from_order(order: SplitOrder, tokens: list[str]) -> Node:
    """Materialize the binary tree described by a split order."""
    n = len(tokens)
    if n == 1:
        return leaf(tokens[0], 1)
    split_of = {step.span: step.split for step in order}

    def build(i: int, j: int) -> Node:
        if i == j:
            return leaf(tokens[i - 1], i)
        k = split_of[(i, j)]
        return branch([build(i, k), build(k + 1, j)])

    return build(1, n)


def parser_nll(scores, order: SplitOrder) -> Tensor | float:
    """Negative log-likelihood of a split order under boundary scores.

    Each tree node contributes -log softmax over the boundaries inside its
    span; the sum is invariant to the order the nodes are visited in. Spans
    whose boundaries are all -inf (forced single moves) contribute zero.
    """
    taped = isinstance(scores, Tensor)
    data = scores.data if taped else np.asarray(scores, dtype=np.float64)
    terms = []
    total = 0.0
    for step in order:
        i, j = step.span
        seg = data[i - 1:j - 1]
        if not np.isfinite(seg).any():
            continue
        if not np.isfinite(seg[step.split - i]):
            raise ValueError(f"target split {step.split} of span {step.span} is forbidden")
        if taped:
            lp = ad.log_softmax(scores[i - 1:j - 1], axis=0)
            terms.append(-lp[step.split - i])
        else:
            total -= float(seg[step.split - i] - ad.logsumexp_np(seg, axis=0))
    if taped:
        if not terms:
            return Tensor(np.zeros((), dtype=data.dtype))
        out = terms[0]
        for t in terms[1:]:
            out = out + t
        return out
    return total


# ---------------------------------------------------------------------------
# chart pruning
# ---------------------------------------------------------------------------

@dataclass
class PruneResult:
    """Cells in append order, before dependency batching.

    `cells` maps each surviving span to its kept split points, in the order
    the spans were first written. `merge_groups` records which boundaries
    merged simultaneously in each round (tree height order).
    """

    n: int
    window: int
    cells: dict[Span, tuple[int, ...]]
    merge_groups: list[list[int]]

    @property
    def merge_order(self) -> list[int]:
        return [k for group in self.merge_groups for k in group]


def _tree_heights(order: SplitOrder) -> dict[int, int]:
    """Height of each split's tree node: 1 + max over children, leaves 0."""
    height: dict[Span, int] = {}
    for step in sorted(order, key=lambda s: s.span[1] - s.span[0]):
        i, j = step.span
        k = step.split
        left = height.get((i, k), 0)
        right = height.get((k + 1, j), 0)
        height[step.span] = 1 + max(left, right)
    return {step.split: height[step.span] for step in order}


def prune_schedule(n: int, window: int, order: SplitOrder) -> PruneResult:
    """Decide surviving cells and their split points from a decoded tree.

    Starts from all spans of width <= window with full split sets, then
    replays the tree bottom up: boundaries merge in rounds grouped by node
    height, and after each round every newly expressible contiguous group of
    at most window+1 units is encoded with the unit boundaries as its splits.
    The first split set written for a span is the one that is kept.
    """
    if window < 2:
        # one-split cells only arise from a decoded tree; see tree_schedule
        raise ValueError("window must be >= 2")
    if n < 1:
        raise ValueError("n must be >= 1")
    cells: dict[Span, tuple[int, ...]] = {}

    for width in range(2, min(window, n) + 1):
        for i in range(1, n - width + 2):
            cells[(i, i + width - 1)] = tuple(range(i, i + width - 1))

    merge_groups: list[list[int]] = []
    if n > min(window, n):
        units: list[Span] = [(i, i) for i in range(1, n + 1)]
        span_of = {step.split: step.span for step in order}
        heights = _tree_heights(order)
        by_height: dict[int, list[int]] = {}
        for k, h in heights.items():
            by_height.setdefault(h, []).append(k)

        for h in sorted(by_height):
            group = sorted(by_height[h])
            for k in group:
                span = span_of[k]
                first = next(t for t, u in enumerate(units) if u[0] == span[0])
                if units[first][1] != k or units[first + 1] != (k + 1, span[1]):
                    raise ValueError(f"merge at boundary {k} does not cover two units")
                units[first:first + 2] = [span]
            merge_groups.append(group)
            for size in range(2, window + 2):
                for a in range(len(units) - size + 1):
                    span = (units[a][0], units[a + size - 1][1])
                    if span not in cells:
                        cells[span] = tuple(units[t][1] for t in range(a, a + size - 1))

    if (1, n) not in cells and n > 1:
        raise ValueError("pruning never encoded the sentence span")
    return PruneResult(n=n, window=window, cells=cells, merge_groups=merge_groups)


def build_cell_batches(result: PruneResult) -> Schedule:
    """Turn pruned cells into dependency batches for the chart engine.

    A cell whose outputs no other surviving cell reads is dropped (the
    sentence span is exempt); drops cascade. Remaining cells are laid out in
    waves: a cell joins the first batch in which every span its splits touch
    is already available.
    """
    n = result.n
    root: Span = (1, n)
    kept = dict(result.cells)

    changed = True
    while changed:
        changed = False
        referenced: set[Span] = set()
        for (i, j), splits in kept.items():
            for k in splits:
                referenced.add((i, k))
                referenced.add((k + 1, j))
        for span in list(kept):
            if span != root and span not in referenced:
                del kept[span]
                changed = True

    if n > 1 and root not in kept:
        raise ValueError("sentence span missing from pruned cells")

    ready: set[Span] = {(i, i) for i in range(1, n + 1)}
    batches: list[list[Span]] = [sorted(ready)]
    pending = dict(kept)
    while pending:
        wave = [span for span, splits in pending.items()
                if all((span[0], k) in ready and (k + 1, span[1]) in ready for k in splits)]
        if not wave:
            raise ValueError("cyclic or unsatisfiable cell dependencies")
        wave.sort()
        batches.append(wave)
        ready.update(wave)
        for span in wave:
            del pending[span]

    schedule = Schedule(n=n, batches=batches, splits=dict(kept),
                        parents=parents_from_splits(kept))
    validate_schedule(schedule)
    return schedule


def tree_schedule(n: int, order: SplitOrder) -> Schedule:
    """Single-split-per-cell schedule following a decoded tree exactly.

    Used by the fast encoding mode: the chart degenerates to the tree, so
    each layer runs n-1 inside and n-1 outside compositions.
    """
    cells = {step.span: (step.split,) for step in order}
    return build_cell_batches(PruneResult(n=n, window=1, cells=cells, merge_groups=[]))


def schedule_for_tokens(scorer: BoundaryScorer, token_ids: np.ndarray, window: int,
                        forbidden: set[int] | None = None) -> tuple[Schedule, SplitOrder, Tensor]:
    """Score, decode, prune, and batch in one call.

    Returns the engine schedule, the decoded split order (for the tree loss
    and for tree output), and the taped boundary scores.
    """
    n = int(np.asarray(token_ids).size)
    scores = scorer(token_ids)
    if forbidden:
        scores = apply_nonsplittable(scores, forbidden)
    order = split_order(scores.data, n)
    schedule = build_cell_batches(prune_schedule(n, window, order))
    return schedule, order, scores
