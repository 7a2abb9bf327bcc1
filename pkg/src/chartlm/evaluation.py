"""Grammar-induction metrics and efficiency-counter aggregation.

Bracket F1 follows the usual induction conventions: width-1 spans and the
full-sentence span are excluded from both sides, and a sentence where both
bracket sets come out empty (n <= 2) counts as vacuous agreement at 100.
Word-piece trees are collapsed to word-level spans before scoring.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor

from .inside_outside import EngineStats
from .trees import Node, leaves

Span = tuple[int, int]


def _spans_with_labels(root: Node) -> tuple[list[tuple[str, Span]], int]:
    """All internal-node spans (recomputed from leaf order) and the length."""
    found: list[tuple[str, Span]] = []

    def walk(node: Node, start: int) -> int:
        if node.is_leaf:
            return start + 1
        pos = start
        for child in node.children:
            pos = walk(child, pos)
        found.append((node.label, (start, pos - 1)))
        return pos

    n = walk(root, 1) - 1
    return found, n


def bracket_spans(root: Node) -> set[Span]:
    """Non-trivial bracket set: internal spans minus width-1 and (1, n)."""
    found, n = _spans_with_labels(root)
    return {s for _, s in found if s[1] > s[0] and s != (1, n)}


def labeled_spans(root: Node) -> list[tuple[str, Span]]:
    """Non-trivial labeled spans, same exclusions as bracket_spans."""
    found, n = _spans_with_labels(root)
    return [(lab, s) for lab, s in found if s[1] > s[0] and s != (1, n)]


def piece_to_word(pieces: list[str]) -> list[int]:
    """1-based word index per word piece; '##'-prefixed pieces continue a word."""
    out: list[int] = []
    word = 0
    for piece in pieces:
        if word == 0 or not piece.startswith("##"):
            word += 1
        out.append(word)
    return out


def collapse_spans(spans: set[Span], mapping: list[int]) -> set[Span]:
    """Project piece-level spans to word level, dropping spans that become
    trivial (width 1 or the full sentence) after projection."""
    if not mapping:
        return set()
    n_words = mapping[-1]
    out: set[Span] = set()
    for i, j in spans:
        wi, wj = mapping[i - 1], mapping[j - 1]
        if wj > wi and (wi, wj) != (1, n_words):
            out.add((wi, wj))
    return out


def _f1(pred: set[Span], gold: set[Span]) -> float:
    if not pred and not gold:
        return 100.0
    hits = len(pred & gold)
    if hits == 0:
        return 0.0
    precision = hits / len(pred)
    recall = hits / len(gold)
    return 200.0 * precision * recall / (precision + recall)


def sentence_f1(pred: Node, gold: Node, pieces: list[str] | None = None) -> float:
    """Unlabeled bracket F1 in [0, 100]; gold may be n-ary.

    When `pieces` (the word pieces pred was parsed over) is given, pred
    brackets are collapsed to word level and gold is read as word-level.
    """
    pred_spans = bracket_spans(pred)
    n_pred = len(leaves(pred))
    if pieces is not None:
        if len(pieces) != n_pred:
            raise ValueError(f"piece list has {len(pieces)} entries, tree has {n_pred} leaves")
        mapping = piece_to_word(pieces)
        pred_spans = collapse_spans(pred_spans, mapping)
        n_pred = mapping[-1] if mapping else 0
    n_gold = len(leaves(gold))
    if n_pred != n_gold:
        raise ValueError(f"length mismatch: pred has {n_pred} words, gold has {n_gold}")
    return _f1(pred_spans, bracket_spans(gold))


def corpus_f1(preds: list[Node], golds: list[Node],
              pieces: list[list[str]] | None = None, threads: int = 1) -> float:
    """Mean sentence F1. Sentence scores are independent, so the corpus can be
    scored with a thread pool; results merge in input order."""
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predicted trees vs {len(golds)} gold trees")
    if not preds:
        raise ValueError("empty corpus")
    piece_lists: list[list[str] | None] = pieces if pieces is not None else [None] * len(preds)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scores = list(pool.map(sentence_f1, preds, golds, piece_lists))
    else:
        scores = [sentence_f1(p, g, w) for p, g, w in zip(preds, golds, piece_lists)]
    return float(sum(scores) / len(scores))


def constituent_recall(preds: list[Node], golds: list[Node], label: str) -> float:
    """Fraction (in %) of gold spans carrying `label` found in the predicted
    bracket sets. Only non-trivial gold spans can ever match, so the
    denominator uses the same exclusions as bracket_spans."""
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predicted trees vs {len(golds)} gold trees")
    total = 0
    hit = 0
    for pred, gold in zip(preds, golds):
        pred_spans = bracket_spans(pred)
        for lab, span in labeled_spans(gold):
            if lab == label:
                total += 1
                hit += span in pred_spans
    if total == 0:
        warnings.warn(f"no gold spans labeled {label!r}; recall defined as 0", stacklevel=2)
        return 0.0
    return 100.0 * hit / total


def label_recalls(preds: list[Node], golds: list[Node]) -> dict[str, float]:
    """Constituent recall for every label present in the gold trees."""
    labels = sorted({lab for g in golds for lab, _ in labeled_spans(g)})
    return {lab: constituent_recall(preds, golds, lab) for lab in labels}


def efficiency_counters(records: list[tuple[int, EngineStats, float]]) -> list[dict]:
    """Aggregate (length, stats, wall_ms) records into per-length report rows.

    Merge order is deterministic: rows are grouped by sentence length and
    counters summed in input order, independent of how records were produced.
    """
    buckets: dict[int, dict] = {}
    for n, stats, wall_ms in records:
        row = buckets.setdefault(n, {
            "n": n, "sentences": 0, "pairs_composed": 0, "batched_calls": 0,
            "inside_steps": 0, "cells_encoded": 0, "wall_ms": 0.0,
        })
        row["sentences"] += 1
        row["pairs_composed"] += stats.pairs_composed
        row["batched_calls"] += stats.batched_calls
        row["inside_steps"] += stats.inside_steps
        row["cells_encoded"] += stats.cells_encoded
        row["wall_ms"] += wall_ms
    return [buckets[n] for n in sorted(buckets)]
