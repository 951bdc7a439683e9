"""Pool-level scoring and query-free selection baselines.

Every selector returns an ordered list of unique pool indices and breaks
score ties toward the lower pool_index, so output never depends on input
record order. Randomized selectors draw from a seeded PCG64 generator and
record the seed in the run manifest.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PoolsiftError
from .store import atomic_write


@dataclass
class ScalarScoreTable:
    method: str
    indices: np.ndarray  # int64 pool indices, one entry per scored sample
    scores: np.ndarray  # float64, finite
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.indices.shape != self.scores.shape:
            raise PoolsiftError("score table indices/scores length mismatch")
        if len(np.unique(self.indices)) != len(self.indices):
            raise PoolsiftError("score table has duplicate pool indices")
        if not np.all(np.isfinite(self.scores)):
            raise PoolsiftError("score table contains non-finite scores")

    def __len__(self) -> int:
        return len(self.indices)


def _rank_desc(indices: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Permutation ordering by score descending, ties by ascending index."""
    return np.lexsort((indices, -scores))


def perplexity_scores(records, span: str = "full") -> ScalarScoreTable:
    """Mean per-token NLL per sample; `span` = full sequence or answer only."""
    if span not in ("full", "answer"):
        raise PoolsiftError(f"unknown perplexity span {span!r}")
    indices, scores = [], []
    for rec in records:
        if span == "full":
            tokens, nll = rec.full_token_count, rec.full_nll_sum
        else:
            tokens, nll = rec.answer_token_count, rec.answer_cond_nll_sum
        if tokens <= 0:
            raise PoolsiftError(f"pool_index {rec.pool_index}: zero token count")
        indices.append(rec.pool_index)
        scores.append(nll / tokens)
    return ScalarScoreTable("perplexity", np.array(indices, dtype=np.int64),
                            np.array(scores), meta={"span": span})


def ifd_scores(records) -> tuple[ScalarScoreTable, list[tuple[int, str]]]:
    """Ratio of answer-given-question NLL to answer-alone NLL.

    The per-token normalizations cancel, so the score is the plain ratio of
    the two sums. Records that cannot be scored are excluded and reported,
    not raised.
    """
    indices, scores, excluded = [], [], []
    for rec in records:
        if not rec.ifd_eligible or rec.answer_token_count <= 0:
            excluded.append((rec.pool_index, "no answer tokens"))
            continue
        if rec.answer_uncond_nll_sum <= 0:
            excluded.append((rec.pool_index, "zero unconditional answer loss"))
            continue
        indices.append(rec.pool_index)
        scores.append(rec.answer_cond_nll_sum / rec.answer_uncond_nll_sum)
    table = ScalarScoreTable("ifd", np.array(indices, dtype=np.int64), np.array(scores),
                             meta={"excluded": len(excluded)})
    return table, excluded


def length_scores(records) -> ScalarScoreTable:
    """Full rendered token count per sample, as a score table."""
    indices = np.array([rec.pool_index for rec in records], dtype=np.int64)
    scores = np.array([rec.full_token_count for rec in records], dtype=np.float64)
    return ScalarScoreTable("length", indices, scores)


def select_top(table: ScalarScoreTable, n: int) -> np.ndarray:
    """The n highest-scoring indices, output ordered by score descending."""
    if n > len(table):
        raise PoolsiftError(f"requested {n} samples but only {len(table)} are scored")
    if n < 0:
        raise PoolsiftError(f"selection size must be >= 0, got {n}")
    order = _rank_desc(table.indices, table.scores)
    return table.indices[order[:n]].copy()


def select_top_ppl(table: ScalarScoreTable, n: int) -> np.ndarray:
    return select_top(table, n)


def select_mid_ppl(table: ScalarScoreTable, n: int) -> np.ndarray:
    """The centered length-n window of the ascending score ordering."""
    if n > len(table):
        raise PoolsiftError(f"requested {n} samples but only {len(table)} are scored")
    order = np.lexsort((table.indices, table.scores))
    offset = (len(table) - n) // 2
    return table.indices[order[offset : offset + n]].copy()


def select_ifd(table: ScalarScoreTable, n: int, filter_ge_one: bool = True) -> np.ndarray:
    """Top-n IFD scores, by default dropping anomalous ratios >= 1 first."""
    indices, scores = table.indices, table.scores
    if filter_ge_one:
        keep = scores < 1.0
        indices, scores = indices[keep], scores[keep]
    if n > len(indices):
        raise PoolsiftError(
            f"requested {n} samples but only {len(indices)} are eligible "
            f"(filter_ge_one={filter_ge_one})"
        )
    order = _rank_desc(indices, scores)
    return indices[order[:n]].copy()


def select_length(table: ScalarScoreTable, n: int) -> np.ndarray:
    """The n longest samples by full token count."""
    return select_top(table, n)


def random_select(pool_size: int, n: int, seed: int) -> np.ndarray:
    """Uniform sample of n indices without replacement (seeded PCG64)."""
    if n > pool_size:
        raise PoolsiftError(f"requested {n} samples from a pool of {pool_size}")
    rng = np.random.default_rng(seed)
    return rng.permutation(pool_size)[:n].astype(np.int64)


def balanced_allocation(source_sizes: dict[str, int], n: int) -> dict[str, int]:
    """Equal per-source budgets with shortfall redistribution.

    Sources smaller than their budget contribute everything; their shortfall
    is split equally among the not-yet-exhausted sources until budgets are
    feasible. Integer remainders go one-by-one to sources in ascending name
    order.
    """
    total = sum(source_sizes.values())
    if n > total:
        raise PoolsiftError(f"requested {n} samples from a pool of {total}")
    alloc = {s: 0 for s in source_sizes}
    active = sorted(s for s in source_sizes if source_sizes[s] > 0)
    remaining = n
    while active and remaining > 0:
        base, rem = divmod(remaining, len(active))
        budget = {s: base + (1 if i < rem else 0) for i, s in enumerate(active)}
        overfull = [s for s in active if source_sizes[s] < budget[s]]
        if not overfull:
            alloc.update(budget)
            break
        for s in overfull:
            alloc[s] = source_sizes[s]
            remaining -= source_sizes[s]
            active.remove(s)
    return alloc


def balanced_random_select(pool, n: int, seed: int) -> tuple[np.ndarray, dict[str, int]]:
    """Per-source uniform sampling under the balanced allocation."""
    members: dict[str, list[int]] = {}
    for sample in pool.samples:
        members.setdefault(sample.source, []).append(sample.pool_index)
    alloc = balanced_allocation({s: len(v) for s, v in members.items()}, n)
    rng = np.random.default_rng(seed)
    chosen = []
    for source in sorted(members):
        take = alloc[source]
        if take == 0:
            continue
        pool_indices = np.array(members[source], dtype=np.int64)
        chosen.append(pool_indices[rng.permutation(len(pool_indices))[:take]])
    counts = {s: c for s, c in alloc.items() if c > 0}
    if not chosen:
        return np.empty(0, dtype=np.int64), counts
    return np.concatenate(chosen), counts


def write_score_tsv(table: ScalarScoreTable, path) -> None:
    """Human-readable score table: pool_index <TAB> score."""
    with atomic_write(path) as tmp:
        with open(tmp, "w", encoding="utf-8") as f:
            f.write("pool_index\tscore\n")
            for idx, score in zip(table.indices, table.scores):
                f.write(f"{int(idx)}\t{float(score)!r}\n")
