"""Subprocess body for the large-scale top-k smoke test.

Generates a 1M x 256 float32 pool as streamed shards, runs the top-k scan,
checks it against the dense oracle on a 10k-row subsample, and reports its
own peak RSS. Run: python scale_runner.py WORK_DIR RESULT_JSON
"""

import json
import resource
import sys
import time
from pathlib import Path

import numpy as np

from poolsift import similarity, store

POOL = 1_000_000
DIM = 256
N_QUERIES = 100
K = 1000
GEN_CHUNK = 131_072
SUBSAMPLE = 10_000


def main(work_dir, result_path):
    work_dir = Path(work_dir)
    work_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(2024)
    queries = rng.standard_normal((N_QUERIES, DIM), dtype=np.float32)

    paths = []
    start = 0
    while start < POOL:
        n = min(GEN_CHUNK, POOL - start)
        chunk = rng.standard_normal((n, DIM), dtype=np.float32)
        path = work_dir / f"shard_{start:08d}.bin"
        store.write_embedding_shard(path, start, chunk)
        paths.append(path)
        start += n

    es = store.EmbeddingStore.open(paths)
    t0 = time.perf_counter()
    full = similarity.cosine_topk(queries, es, k=K, workers=2)
    scan_seconds = time.perf_counter() - t0

    # oracle on the first 10k rows: full dense argsort with the tie rule
    sub_rows = es.read_rows(0, SUBSAMPLE)
    scores = similarity.dense_scores(queries, sub_rows, max_cells=N_QUERIES * SUBSAMPLE)
    sub_run = similarity.cosine_topk(queries, sub_rows, k=K)
    oracle_exact = True
    for q, tk in enumerate(sub_run):
        order = np.lexsort((np.arange(SUBSAMPLE), -scores[q]))[:K]
        if not (np.array_equal(tk.indices, order)
                and tk.scores.tobytes() == scores[q][order].tobytes()):
            oracle_exact = False
            break

    # every full-scan hit inside the subsample must appear in the
    # subsample scan (its local rank can only be better), same scores
    containment = True
    for full_tk, sub_tk in zip(full, sub_run):
        in_sub = full_tk.indices < SUBSAMPLE
        sub_lookup = {int(i): float(s) for i, s in zip(sub_tk.indices, sub_tk.scores)}
        for idx, score in zip(full_tk.indices[in_sub], full_tk.scores[in_sub]):
            got = sub_lookup.get(int(idx))
            if got is None or abs(got - float(score)) > 1e-6:
                containment = False
                break

    shapes_ok = all(
        len(tk) == K
        and len(np.unique(tk.indices)) == K
        and (np.diff(tk.scores) <= 0).all()
        for tk in full
    )

    maxrss_bytes = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
    json.dump(
        {
            "maxrss_bytes": maxrss_bytes,
            "scan_seconds": scan_seconds,
            "oracle_exact": oracle_exact,
            "containment": containment,
            "shapes_ok": shapes_ok,
        },
        open(result_path, "w"),
    )


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
