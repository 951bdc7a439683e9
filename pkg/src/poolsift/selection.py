"""Query-driven subset construction: round-robin selection and aggregation.

The single-task round robin cycles through queries in query-set order; each
query pops its best not-yet-selected pool index. A selected index is removed
globally, so no index is ever picked twice. The multi-task variant runs the
same loop over per-task score tables built by max-over-query aggregation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ExhaustedError, PoolsiftError
from .store import atomic_write

log = logging.getLogger(__name__)


@dataclass
class TaskScoreTable:
    """Per-task scores: the max over that task's queries, ranked descending.

    Indices absent from the table are semantically minus infinity. best_query
    records which query achieved each max, for audit.
    """

    task_id: str
    indices: np.ndarray  # int64, ordered by (score desc, index asc)
    scores: np.ndarray  # float64
    best_query: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class SelectionManifest:
    method: str
    parameters: dict
    selected_indices: list[int]
    per_source_counts: dict[str, int]
    pool_fingerprint: str
    feature_manifest: str | None = None
    extras: dict = field(default_factory=dict)

    def to_json(self) -> str:
        obj = {
            "method": self.method,
            "parameters": self.parameters,
            "selected_indices": self.selected_indices,
            "per_source_counts": self.per_source_counts,
            "pool_fingerprint": self.pool_fingerprint,
            "feature_manifest": self.feature_manifest,
            "extras": self.extras,
        }
        return json.dumps(obj, sort_keys=True, indent=2) + "\n"

    def save(self, path) -> None:
        with atomic_write(path) as tmp:
            Path(tmp).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SelectionManifest":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            method=obj["method"],
            parameters=obj["parameters"],
            selected_indices=obj["selected_indices"],
            per_source_counts=obj["per_source_counts"],
            pool_fingerprint=obj["pool_fingerprint"],
            feature_manifest=obj.get("feature_manifest"),
            extras=obj.get("extras", {}),
        )


def build_manifest(pool, method: str, parameters: dict, indices,
                   feature_manifest=None, extras=None) -> SelectionManifest:
    """Assemble a manifest from selected indices, with per-source accounting."""
    indices = [int(i) for i in indices]
    if len(set(indices)) != len(indices):
        raise PoolsiftError("selection contains duplicate pool indices")
    counts: dict[str, int] = {}
    for i in indices:
        if not (0 <= i < len(pool)):
            raise PoolsiftError(f"selected pool_index {i} outside pool of {len(pool)}")
        source = pool.samples[i].source
        counts[source] = counts.get(source, 0) + 1
    return SelectionManifest(
        method=method,
        parameters=parameters,
        selected_indices=indices,
        per_source_counts=counts,
        pool_fingerprint=parameters.get("pool_fingerprint", ""),
        feature_manifest=feature_manifest,
        extras=extras or {},
    )


@dataclass
class RoundRobinResult:
    indices: list[int]
    contributions: dict[str, int]  # per query or per task
    skips: dict[str, int]  # stale pops: candidate already selected elsewhere


def _round_robin(ranked, n: int, pool_size: int, removal: str = "global") -> RoundRobinResult:
    """Shared loop for single- and multi-task round robin.

    `ranked` is a list of (id, indices, scores) with entries already ordered
    by score desc / index asc. removal="per_list" reproduces the literal
    one-list-at-a-time invalidation (duplicates possible); it exists only so
    tests can measure the gap to the global-removal reading.
    """
    if removal not in ("global", "per_list"):
        raise PoolsiftError(f"unknown removal mode {removal!r}")
    if n < 1:
        raise PoolsiftError(f"selection size must be >= 1, got {n}")
    n = min(n, pool_size)
    selected_mask = np.zeros(pool_size, dtype=bool)
    cursors = [0] * len(ranked)
    out: list[int] = []
    contributions = {name: 0 for name, _, _ in ranked}
    skips = {name: 0 for name, _, _ in ranked}
    while len(out) < n:
        progressed = False
        for li, (name, indices, _scores) in enumerate(ranked):
            cur = cursors[li]
            if removal == "global":
                while cur < len(indices) and selected_mask[indices[cur]]:
                    skips[name] += 1
                    cur += 1
            if cur >= len(indices):
                raise ExhaustedError(
                    f"{name} exhausted its {len(indices)} candidates after "
                    f"{len(out)}/{n} selections; rerun top-k with a larger k"
                )
            pick = int(indices[cur])
            cursors[li] = cur + 1
            selected_mask[pick] = True
            out.append(pick)
            contributions[name] += 1
            progressed = True
            if len(out) >= n:
                break
        if not progressed:
            raise ExhaustedError("round robin made no progress")
    return RoundRobinResult(indices=out, contributions=contributions, skips=skips)


def round_robin_single(topk_lists, n: int, pool_size: int,
                       removal: str = "global") -> RoundRobinResult:
    """Cycle queries in query-set order, each popping its best fresh index."""
    ranked = [(tk.query_id, tk.indices, tk.scores) for tk in topk_lists]
    if not ranked:
        raise PoolsiftError("round robin needs at least one query list")
    return _round_robin(ranked, n, pool_size, removal=removal)


def aggregate_task_scores(per_task_topk) -> list[TaskScoreTable]:
    """Max-over-query score per (task, index), keeping the winning query.

    `per_task_topk` is an ordered list of (task_id, [TopKList, ...]); the
    list order fixes the task iteration order downstream.
    """
    tables = []
    for task_id, topk_lists in per_task_topk:
        if not topk_lists:
            raise PoolsiftError(f"task {task_id!r} has no top-k lists")
        all_idx = np.concatenate([tk.indices for tk in topk_lists])
        all_sc = np.concatenate([tk.scores.astype(np.float64) for tk in topk_lists])
        all_q = np.concatenate(
            [np.full(len(tk.indices), qi, dtype=np.int64) for qi, tk in enumerate(topk_lists)]
        )
        # group by index, best score first, earliest query winning ties
        order = np.lexsort((all_q, -all_sc, all_idx))
        uniq, first = np.unique(all_idx[order], return_index=True)
        best_sc = all_sc[order][first]
        best_q = all_q[order][first]
        rank = np.lexsort((uniq, -best_sc))
        query_ids = [tk.query_id for tk in topk_lists]
        tables.append(
            TaskScoreTable(
                task_id=task_id,
                indices=uniq[rank].astype(np.int64),
                scores=best_sc[rank],
                best_query=[query_ids[q] for q in best_q[rank]],
            )
        )
    return tables


def round_robin_multitask(tables: list[TaskScoreTable], n: int, pool_size: int) -> RoundRobinResult:
    """Cycle tasks in declared order; stale candidates are skipped, so the
    result holds exactly n unique indices."""
    ranked = [(t.task_id, t.indices, t.scores) for t in tables]
    if not ranked:
        raise PoolsiftError("multi-task round robin needs at least one task table")
    return _round_robin(ranked, n, pool_size, removal="global")


def mean_max_select(tables: list[TaskScoreTable], n: int,
                    missing_floor: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Average the per-task scores per index and take the global top-n.

    Indices missing from a task's (sparse) table contribute that task's
    minimum observed score, or `missing_floor` when given. Dense tables over
    a small pool avoid the substitution entirely and are the faithful mode.
    Returns (indices, mean scores), ranked.
    """
    if not tables:
        raise PoolsiftError("mean-max needs at least one task table")
    union = np.unique(np.concatenate([t.indices for t in tables]))
    if n > len(union):
        raise PoolsiftError(f"requested {n} samples but only {len(union)} are scored")
    acc = np.zeros(len(union), dtype=np.float64)
    filled = 0
    for t in tables:
        by_index = np.argsort(t.indices)
        sorted_idx = t.indices[by_index]
        sorted_sc = t.scores[by_index]
        pos = np.searchsorted(sorted_idx, union)
        pos_clipped = np.minimum(pos, len(sorted_idx) - 1)
        present = sorted_idx[pos_clipped] == union
        floor = float(t.scores.min()) if missing_floor is None else missing_floor
        task_scores = np.where(present, sorted_sc[pos_clipped], floor)
        filled += int((~present).sum())
        acc += task_scores
    if filled:
        log.warning(
            "mean-max filled %d missing (task, index) scores with floor values; "
            "dense tables over the full pool are the faithful setting",
            filled,
        )
    mean = acc / len(tables)
    rank = np.lexsort((union, -mean))[:n]
    return union[rank].astype(np.int64), mean[rank]
