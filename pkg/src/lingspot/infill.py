"""Text-infilling corruption over character tokens.

Contiguous runs of alphabetic characters are replaced by a single mask token
each. Digits, punctuation and word boundaries are never touched. Because one
token corresponds to one character, span coordinates are token positions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .vocab import WORD_INITIAL, TokenSequence, Vocabulary

DEFAULT_RATIO = (0.2, 0.4)


@dataclass
class CorruptedPair:
    original: TokenSequence
    corrupted: TokenSequence
    spans: list[tuple[int, int]]
    masked_fraction: float
    # False when no integer mask count lands inside the ratio range
    achievable: bool = True

    @property
    def masked_positions(self) -> list[int]:
        return [p for start, n in self.spans for p in range(start, start + n)]


def _alpha_runs(ids: list[int], vocab: Vocabulary) -> list[list[int]]:
    """Maximal alphabetic runs that stay inside one word."""
    runs: list[list[int]] = []
    cur: list[int] = []
    for pos, tid in enumerate(ids):
        starts_word = vocab.entries[tid].kind == WORD_INITIAL
        if vocab.is_alpha(tid) and not (starts_word and cur):
            cur.append(pos)
            continue
        if cur:
            runs.append(cur)
            cur = []
        if vocab.is_alpha(tid):
            cur = [pos]
    if cur:
        runs.append(cur)
    return runs


def mask_count_bounds(n_alpha: int, ratio: tuple[float, float] = DEFAULT_RATIO) -> tuple[int, int]:
    lo = math.ceil(ratio[0] * n_alpha - 1e-9)
    hi = math.floor(ratio[1] * n_alpha + 1e-9)
    return lo, hi


def nearest_achievable(n_alpha: int, ratio: tuple[float, float] = DEFAULT_RATIO) -> int:
    """Mask count whose fraction is closest to the ratio interval (ties: larger)."""
    def gap(c: int) -> float:
        f = c / n_alpha
        return max(ratio[0] - f, f - ratio[1], 0.0)

    return min(range(n_alpha + 1), key=lambda c: (gap(c), -c))


def apply_spans(
    y: TokenSequence,
    spans: list[tuple[int, int]],
    vocab: Vocabulary,
    ratio: tuple[float, float] | None = DEFAULT_RATIO,
) -> CorruptedPair:
    """Corrupt ``y`` with explicit spans; raises if the masked fraction is out of range."""
    ids = y.content()
    if vocab.mask_id is None:
        raise ValueError("vocabulary has no mask token")
    spans = sorted(spans)
    covered: set[int] = set()
    for start, n in spans:
        if n < 1:
            raise ValueError(f"empty span at {start}")
        for p in range(start, start + n):
            if p >= len(ids) or not vocab.is_alpha(ids[p]):
                raise ValueError(f"span ({start}, {n}) covers non-alphabetic position {p}")
            if p in covered:
                raise ValueError(f"span ({start}, {n}) overlaps another span")
            covered.add(p)
    n_alpha = sum(vocab.is_alpha(t) for t in ids)
    frac = len(covered) / n_alpha if n_alpha else 0.0
    if ratio is not None and spans and not (ratio[0] - 1e-9 <= frac <= ratio[1] + 1e-9):
        raise ValueError(f"masked fraction {frac:.3f} outside [{ratio[0]}, {ratio[1]}]")

    out: list[int] = []
    starts = {s: n for s, n in spans}
    pos = 0
    while pos < len(ids):
        if pos in starts:
            out.append(vocab.mask_id)
            pos += starts[pos]
        else:
            out.append(ids[pos])
            pos += 1
    corrupted = _pad_like(out, y, vocab)
    return CorruptedPair(y, corrupted, list(spans), frac)


def infill_corrupt(
    y: TokenSequence,
    vocab: Vocabulary,
    ratio: tuple[float, float] = DEFAULT_RATIO,
    seed: int | np.random.Generator | None = None,
    span_p: float = 0.5,
) -> CorruptedPair:
    """Mask 20-40% of alphabetic characters as contiguous spans.

    Span lengths follow a geometric law with success probability ``span_p``,
    truncated to the remaining budget; spans never cross a word boundary and
    never touch each other.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ids = y.content()
    runs = _alpha_runs(ids, vocab)
    n_alpha = sum(len(r) for r in runs)
    if n_alpha == 0:
        return CorruptedPair(y, _pad_like(list(ids), y, vocab), [], 0.0)

    lo, hi = mask_count_bounds(n_alpha, ratio)
    achievable = lo <= hi
    if achievable:
        target = int(round(rng.uniform(*ratio) * n_alpha))
        target = min(max(target, lo), hi)
    else:
        target = nearest_achievable(n_alpha, ratio)

    masked = np.zeros(len(ids), dtype=bool)
    remaining = target
    while remaining > 0:
        length = min(int(rng.geometric(span_p)), remaining)
        while True:
            starts = _free_starts(runs, masked, length)
            if starts or length == 1:
                break
            length -= 1
        if not starts:
            # only adjacent slots remain; allow touching spans (they merge)
            starts = [p for r in runs for p in r if not masked[p]]
            length = 1
        start = starts[int(rng.integers(len(starts)))]
        masked[start : start + length] = True
        remaining -= length

    spans = _masked_spans(runs, masked)
    pair = apply_spans(y, spans, vocab, ratio=None)
    pair.achievable = achievable
    return pair


def _free_starts(runs: list[list[int]], masked: np.ndarray, length: int) -> list[int]:
    starts = []
    for run in runs:
        first, last = run[0], run[-1]
        for s in range(first, last - length + 2):
            e = s + length  # exclusive
            if masked[s:e].any():
                continue
            if s > first and masked[s - 1]:
                continue
            if e <= last and masked[e]:
                continue
            starts.append(s)
    return starts


def _masked_spans(runs: list[list[int]], masked: np.ndarray) -> list[tuple[int, int]]:
    spans = []
    for run in runs:
        start = None
        for p in run:
            if masked[p] and start is None:
                start = p
            elif not masked[p] and start is not None:
                spans.append((start, p - start))
                start = None
        if start is not None:
            spans.append((start, run[-1] + 1 - start))
    return spans


def _pad_like(ids: list[int], like: TokenSequence, vocab: Vocabulary) -> TokenSequence:
    length = len(ids)
    if like.max_length is not None:
        ids = ids + [vocab.pad_id] * (like.max_length - length)
    return TokenSequence(ids=ids, length=length, max_length=like.max_length)
