"""Collapse per-token hidden states into one embedding per sample.

The default strategy weights token i (1-based) by i / (L(L+1)/2), so later
tokens count more; with a causal decoder the early hidden states have seen
less of the sequence, and the weighting counters the resulting bias toward
early positions. Uniform mean, last-token-only, and prompt-/answer-span
restrictions cover the ablation variants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PoolsiftError

KINDS = ("weighted", "uniform", "eos_only")
SPANS = ("full", "prompt_only", "label_only")


@dataclass(frozen=True)
class PoolingStrategy:
    kind: str = "weighted"
    span: str = "full"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PoolsiftError(f"unknown pooling kind {self.kind!r} (choose from {KINDS})")
        if self.span not in SPANS:
            raise PoolsiftError(f"unknown pooling span {self.span!r} (choose from {SPANS})")

    @property
    def name(self) -> str:
        return f"{self.kind}/{self.span}"


def position_weights(length: int) -> np.ndarray:
    """Weights [1, 2, ..., L] / (L(L+1)/2); strictly increasing, sums to 1."""
    if length < 1:
        raise PoolsiftError(f"position weights need at least one token, got {length}")
    denom = length * (length + 1) // 2
    return np.arange(1, length + 1, dtype=np.float64) / denom


def _select_span(length: int, spans, strategy: PoolingStrategy, sample_id) -> tuple[int, int]:
    if strategy.span == "full":
        lo, hi = 0, length
    else:
        prompt_span, answer_span = spans
        lo, hi = prompt_span if strategy.span == "prompt_only" else answer_span
    if not (0 <= lo <= hi <= length):
        raise PoolsiftError(f"sample {sample_id}: span ({lo}, {hi}) outside [0, {length}]")
    if lo == hi:
        raise PoolsiftError(
            f"sample {sample_id}: empty {strategy.span} span, nothing to pool"
        )
    return lo, hi


def pool(hidden: np.ndarray, spans, strategy: PoolingStrategy, sample_id="?") -> np.ndarray:
    """Pool an L x dim hidden-state matrix down to one dim-vector.

    `spans` is the (prompt, answer) pair of half-open token spans; positions
    are re-indexed from 1 within the selected span before weighting, so the
    weights always sum to 1 on any span. Returns float32.
    """
    hidden = np.asarray(hidden)
    if hidden.ndim != 2 or hidden.shape[0] < 1:
        raise PoolsiftError(f"sample {sample_id}: hidden states must be a non-empty L x dim matrix")
    lo, hi = _select_span(hidden.shape[0], spans, strategy, sample_id)
    window = hidden[lo:hi].astype(np.float64, copy=False)
    if strategy.kind == "eos_only":
        pooled = window[-1]
    elif strategy.kind == "uniform":
        pooled = window.mean(axis=0)
    else:
        pooled = position_weights(hi - lo) @ window
    return pooled.astype(np.float32)


def pool_records(records, strategy: PoolingStrategy) -> np.ndarray:
    """Pool an iterable of HiddenRecord into a (n, dim) float32 matrix."""
    out = []
    for rec in records:
        out.append(pool(rec.hidden, (rec.prompt_span, rec.answer_span), strategy, rec.pool_index))
    if not out:
        raise PoolsiftError("no hidden-state records to pool")
    return np.stack(out)
