"""Exact cosine similarity scoring between query and pool embeddings.

Scores are computed in float32 with a fixed blocked reduction: the pool is
scanned in fixed-size row blocks addressed by global pool_index (never by
shard boundaries) and the dot products accumulate over fixed-width column
chunks. The same kernel backs both the streaming top-k scan and the dense
small-pool path, so results are independent of shard partitioning and of the
worker count, and ties always break toward the lower pool_index.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import PoolsiftError, StoreError
from .store import HEADER_SIZE, MAGIC, RT_TOPK, VERSION, atomic_write, read_header

BLOCK_ROWS = 32768
COL_CHUNK = 128


@dataclass
class TopKList:
    query_id: str
    k: int
    indices: np.ndarray  # int64, sorted by (score desc, index asc)
    scores: np.ndarray  # float32

    def __len__(self) -> int:
        return len(self.indices)


class ArrayStore:
    """Adapter exposing an in-memory embedding matrix through the store API."""

    def __init__(self, rows: np.ndarray, start_index: int = 0):
        rows = np.asarray(rows)
        if rows.ndim != 2:
            raise PoolsiftError("embedding matrix must be 2-D")
        self.rows = rows
        self.start_index = start_index
        self.count = rows.shape[0]
        self.dim = rows.shape[1]

    def read_rows(self, start: int, stop: int) -> np.ndarray:
        return np.ascontiguousarray(
            self.rows[start - self.start_index : stop - self.start_index], dtype=np.float32
        )


def _as_store(pool):
    return pool if hasattr(pool, "read_rows") else ArrayStore(pool)


def normalize(embeddings: np.ndarray, start_index: int = 0, kind: str = "pool") -> np.ndarray:
    """Scale each row to unit Euclidean norm (float32).

    Zero rows make cosine undefined and raise, identifying the offending
    pool_index (or query ordinal).
    """
    rows = np.ascontiguousarray(embeddings, dtype=np.float32)
    if rows.ndim != 2:
        raise PoolsiftError("normalize expects a 2-D array")
    norms = np.sqrt(np.sum(rows * rows, axis=1, dtype=np.float32), dtype=np.float32)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise PoolsiftError(f"zero vector at {kind} index {start_index + int(zero[0])}: cosine undefined")
    return rows / norms[:, None]


def _chunked_matmul(q_unit: np.ndarray, d_unit: np.ndarray) -> np.ndarray:
    """Q x B float32 scores with a fixed column-chunk accumulation order."""
    out = np.zeros((q_unit.shape[0], d_unit.shape[0]), dtype=np.float32)
    for lo in range(0, q_unit.shape[1], COL_CHUNK):
        hi = min(lo + COL_CHUNK, q_unit.shape[1])
        out += q_unit[:, lo:hi] @ d_unit[:, lo:hi].T
    return out


def dense_scores(queries: np.ndarray, pool, max_cells: int = 50_000_000,
                 block_rows: int = BLOCK_ROWS) -> np.ndarray:
    """Materialize the full Q x |pool| cosine matrix (small pools only)."""
    store = _as_store(pool)
    queries = np.asarray(queries)
    if queries.ndim != 2:
        raise PoolsiftError("queries must be a 2-D array")
    if store.count == 0:
        raise PoolsiftError("empty pool")
    if queries.shape[1] != store.dim:
        raise PoolsiftError(f"query dim {queries.shape[1]} != pool dim {store.dim}")
    cells = queries.shape[0] * store.count
    if cells > max_cells:
        raise PoolsiftError(f"dense score matrix would hold {cells} cells (> {max_cells})")
    q_unit = normalize(queries, kind="query")
    blocks = []
    stop_index = store.start_index + store.count
    for lo in range(store.start_index, stop_index, block_rows):
        hi = min(lo + block_rows, stop_index)
        d_unit = normalize(store.read_rows(lo, hi), start_index=lo)
        blocks.append(_chunked_matmul(q_unit, d_unit))
    return np.concatenate(blocks, axis=1)


def _block_topk(scores: np.ndarray, base: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k of one score row over a block; ties to the lower pool_index."""
    n = scores.shape[0]
    kk = min(k, n)
    if kk == n:
        cand = np.arange(n)
    else:
        thr = np.partition(scores, n - kk)[n - kk]
        cand = np.flatnonzero(scores >= thr)
    order = np.lexsort((cand, -scores[cand]))[:kk]
    sel = cand[order]
    return sel.astype(np.int64) + base, scores[sel]


def _merge_topk(idx_a, sc_a, idx_b, sc_b, k: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.concatenate([idx_a, idx_b])
    sc = np.concatenate([sc_a, sc_b])
    order = np.lexsort((idx, -sc))[:k]
    return idx[order], sc[order]


def cosine_topk(queries: np.ndarray, pool, k: int, query_ids=None,
                block_rows: int = BLOCK_ROWS, workers: int = 1) -> list[TopKList]:
    """Exact per-query top-k over the pool, streamed block by block.

    Blocks are fixed global index ranges, so the candidate scan (and thus the
    result, bit for bit) does not depend on how the pool is sharded on disk
    or how many workers scan it.
    """
    store = _as_store(pool)
    queries = np.asarray(queries)
    if queries.ndim != 2:
        raise PoolsiftError("queries must be a 2-D array")
    if k < 1:
        raise PoolsiftError(f"k must be >= 1, got {k}")
    if store.count == 0:
        raise PoolsiftError("empty pool")
    if queries.shape[1] != store.dim:
        raise PoolsiftError(f"query dim {queries.shape[1]} != pool dim {store.dim}")
    if query_ids is None:
        query_ids = [f"q{i:05d}" for i in range(queries.shape[0])]
    if len(query_ids) != queries.shape[0]:
        raise PoolsiftError("query_ids length does not match query count")

    q_unit = normalize(queries, kind="query")
    n_queries = queries.shape[0]
    stop_index = store.start_index + store.count
    ranges = [
        (lo, min(lo + block_rows, stop_index))
        for lo in range(store.start_index, stop_index, block_rows)
    ]

    def scan(block_range):
        lo, hi = block_range
        d_unit = normalize(store.read_rows(lo, hi), start_index=lo)
        scores = _chunked_matmul(q_unit, d_unit)
        return [_block_topk(scores[q], lo, k) for q in range(n_queries)]

    best: list[tuple[np.ndarray, np.ndarray]] = [
        (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float32)) for _ in range(n_queries)
    ]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            block_results = ex.map(scan, ranges)
            for result in block_results:
                for q, (bidx, bsc) in enumerate(result):
                    best[q] = _merge_topk(*best[q], bidx, bsc, k)
    else:
        for block_range in ranges:
            for q, (bidx, bsc) in enumerate(scan(block_range)):
                best[q] = _merge_topk(*best[q], bidx, bsc, k)

    return [
        TopKList(query_id=query_ids[q], k=k, indices=best[q][0], scores=best[q][1])
        for q in range(n_queries)
    ]


# ---------------------------------------------------------------------------
# Top-k list serialization


def write_topk(path, lists: list[TopKList]) -> None:
    if not lists:
        raise StoreError("refusing to write an empty top-k file")
    k = lists[0].k
    with atomic_write(path) as tmp:
        with open(tmp, "wb") as f:
            f.write(struct.pack("<4sIIQQI", MAGIC, VERSION, RT_TOPK, 0, len(lists), k))
            for tk in lists:
                qid = tk.query_id.encode("utf-8")
                f.write(struct.pack("<HI", len(qid), len(tk.indices)))
                f.write(qid)
                f.write(np.ascontiguousarray(tk.indices, dtype="<u8").tobytes())
                f.write(np.ascontiguousarray(tk.scores, dtype="<f4").tobytes())


def read_topk(path) -> list[TopKList]:
    path = Path(path)
    lists = []
    with open(path, "rb") as f:
        header = read_header(f, path)
        if header.record_type != RT_TOPK:
            raise StoreError(f"{path}: not a top-k file")
        for i in range(header.count):
            meta = f.read(6)
            if len(meta) < 6:
                raise StoreError(f"{path}: truncated record header at ordinal {i}")
            qid_len, m = struct.unpack("<HI", meta)
            qid = f.read(qid_len).decode("utf-8")
            raw_idx = f.read(m * 8)
            raw_sc = f.read(m * 4)
            if len(raw_idx) < m * 8 or len(raw_sc) < m * 4:
                raise StoreError(f"{path}: truncated payload at ordinal {i}")
            lists.append(
                TopKList(
                    query_id=qid,
                    k=header.dim,
                    indices=np.frombuffer(raw_idx, dtype="<u8").astype(np.int64),
                    scores=np.frombuffer(raw_sc, dtype="<f4").copy(),
                )
            )
        if f.read(1):
            raise StoreError(f"{path}: trailing bytes after last record")
    return lists


def topk_to_jsonl(lists: list[TopKList], path) -> None:
    """Debug view of top-k lists as JSON lines."""
    with atomic_write(path) as tmp:
        with open(tmp, "w", encoding="utf-8") as f:
            for tk in lists:
                obj = {
                    "query_id": tk.query_id,
                    "k": tk.k,
                    "entries": [
                        [int(i), float(s)] for i, s in zip(tk.indices, tk.scores)
                    ],
                }
                f.write(json.dumps(obj) + "\n")
