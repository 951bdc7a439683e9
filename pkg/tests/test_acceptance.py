"""Acceptance suite: one test per release criterion, at its stated tolerance.

A summary with one PASS/FAIL line per criterion prints at the end of the
pytest run (see conftest.pytest_terminal_summary).
"""

import json
import subprocess
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from poolsift import cli, corpus, pooling, scorers, selection, similarity, store
from poolsift.flops import METHODS, CostModelParams, estimate

from conftest import chat_record, random_pool_records, synth_loss_shard, write_jsonl
from test_flops import reference_formulas
from test_selection import ranked_list, simulate_alg1, task_table


@pytest.mark.acceptance("round-robin oracle equivalence (200 instances, < 5 s)")
def test_round_robin_oracle_equivalence():
    rng = np.random.default_rng(42)
    t0 = time.perf_counter()
    for _ in range(200):
        n_queries = int(rng.integers(1, 6))
        pool_size = int(rng.integers(1, 51))
        n = min(int(rng.integers(1, 21)), pool_size)
        scores = rng.uniform(size=(n_queries, pool_size)).astype(np.float32)
        lists = [ranked_list(f"v{q}", scores[q]) for q in range(n_queries)]
        got = selection.round_robin_single(lists, n, pool_size=pool_size)
        assert got.indices == simulate_alg1(scores, n, removal="global")
    assert time.perf_counter() - t0 < 5.0


@pytest.mark.acceptance("multi-task round robin (100 instances + trace example)")
def test_multitask_round_robin():
    rng = np.random.default_rng(43)
    for _ in range(100):
        n_tasks = int(rng.integers(1, 5))
        pool_size = int(rng.integers(n_tasks, 61))
        n = min(int(rng.integers(1, 31)), pool_size)
        tables = [task_table(f"t{t}", rng.uniform(size=pool_size)) for t in range(n_tasks)]
        result = selection.round_robin_multitask(tables, n, pool_size=pool_size)
        assert len(result.indices) == n
        assert len(set(result.indices)) == n

    # disjoint per-task candidates: contributions balanced within 1
    for _ in range(30):
        n_tasks = int(rng.integers(2, 5))
        per_task = 15
        pool_size = n_tasks * per_task
        tables = []
        for t in range(n_tasks):
            indices = np.arange(t * per_task, (t + 1) * per_task, dtype=np.int64)
            scores = rng.uniform(size=per_task)
            order = np.lexsort((indices, -scores))
            tables.append(selection.TaskScoreTable(f"t{t}", indices[order], scores[order]))
        n = int(rng.integers(1, pool_size + 1))
        result = selection.round_robin_multitask(tables, n, pool_size=pool_size)
        assert sum(result.skips.values()) == 0
        counts = list(result.contributions.values())
        assert max(counts) - min(counts) <= 1

    # coinciding rank-1 candidates: task1 takes it, task2 pops its rank-2
    t1 = task_table("task1", [0.9, 0.1, 0.5])
    t2 = task_table("task2", [0.8, 0.6, 0.2])
    result = selection.round_robin_multitask([t1, t2], 2, pool_size=3)
    assert result.indices == [0, 1]


@pytest.mark.acceptance("top-k exactness, shard- and thread-invariance")
def test_topk_exactness_and_invariance(tmp_path):
    rng = np.random.default_rng(44)
    for _ in range(100):
        n_queries = int(rng.integers(1, 21))
        pool_size = int(rng.integers(1, 2001))
        dim = int(rng.integers(1, 65))
        k = int(rng.integers(1, min(pool_size, 50) + 1))
        queries = rng.standard_normal((n_queries, dim)).astype(np.float32)
        pool = rng.standard_normal((pool_size, dim)).astype(np.float32)
        lists = similarity.cosine_topk(queries, pool, k=k)
        dense = similarity.dense_scores(queries, pool)
        for q, tk in enumerate(lists):
            order = np.lexsort((np.arange(pool_size), -dense[q]))[:k]
            assert np.array_equal(tk.indices, order)
            assert tk.scores.tobytes() == dense[q][order].tobytes()

    # re-sharding and worker-count invariance, bit for bit
    pool = rng.standard_normal((1237, 32)).astype(np.float32)
    queries = rng.standard_normal((9, 32)).astype(np.float32)
    baseline = None
    for pieces, workers in ((1, 1), (3, 1), (7, 1), (1, 8), (7, 8)):
        bounds = np.linspace(0, len(pool), pieces + 1).astype(int)
        paths = []
        for i in range(pieces):
            p = tmp_path / f"s{pieces}_{workers}_{i}.bin"
            store.write_embedding_shard(p, int(bounds[i]), pool[bounds[i]:bounds[i + 1]])
            paths.append(p)
        es = store.EmbeddingStore.open(paths)
        lists = similarity.cosine_topk(queries, es, k=40, block_rows=200, workers=workers)
        if baseline is None:
            baseline = lists
        else:
            for a, b in zip(baseline, lists):
                assert np.array_equal(a.indices, b.indices)
                assert a.scores.tobytes() == b.scores.tobytes()


@pytest.mark.acceptance("pooling weights and worked example")
def test_pooling_criteria():
    for length in range(1, 4097):
        assert abs(pooling.position_weights(length).sum() - 1.0) < 1e-6
    assert pooling.position_weights(3).tolist() == [float(Fraction(i, 6)) for i in (1, 2, 3)]
    got = pooling.pool(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]),
                       ((0, 1), (1, 3)), pooling.PoolingStrategy("weighted", "full"))
    assert np.abs(got - np.array([4 / 6, 5 / 6])).max() < 1e-6

    rng = np.random.default_rng(45)
    for _ in range(1000):
        length = int(rng.integers(1, 16))
        dim = int(rng.integers(1, 8))
        h = rng.standard_normal((length, dim)).astype(np.float32)
        cut = int(rng.integers(0, length + 1))
        kind = ("weighted", "uniform")[int(rng.integers(2))]
        pooled = pooling.pool(h, ((0, cut), (cut, length)),
                              pooling.PoolingStrategy(kind, "full"))
        assert (pooled >= h.min(axis=0) - 1e-6).all()
        assert (pooled <= h.max(axis=0) + 1e-6).all()


@pytest.mark.acceptance("FLOPs model matches published formulas exactly")
def test_flops_criteria():
    params = CostModelParams(model_params=7e9, selected_size=int(1e4))
    assert estimate("random", params) == int(1.72032e18)
    assert float(estimate("random", params)) == 1.72032e18

    rng = np.random.default_rng(46)
    for _ in range(5):
        n = int(rng.integers(1e8, 2e11))
        p = int(rng.integers(1, 2e7))
        d = int(rng.integers(1, p + 1))
        cost = CostModelParams(model_params=n, selected_size=d, pool_size=p)
        expected = reference_formulas(n, p, d)
        for method in METHODS:
            assert estimate(method, cost) == expected[method]

    p0 = CostModelParams(model_params=7e9, selected_size=int(1e4), pool_size=0)
    assert estimate("perplexity", p0) == estimate("random", p0)


@pytest.mark.acceptance("balanced random allocation and reproducibility")
def test_balanced_random_criteria(tmp_path):
    assert scorers.balanced_allocation({"A": 4, "B": 100, "C": 100}, 30) == \
        {"A": 4, "B": 13, "C": 13}

    rng = np.random.default_rng(47)
    checked = 0
    while checked < 500:
        sizes = {f"s{i:02d}": int(rng.integers(0, 200))
                 for i in range(int(rng.integers(1, 10)))}
        total = sum(sizes.values())
        if total == 0:
            continue
        n = int(rng.integers(1, total + 1))
        alloc = scorers.balanced_allocation(sizes, n)
        assert sum(alloc.values()) == n
        assert all(alloc[s] <= sizes[s] for s in sizes)
        if all(alloc[s] < sizes[s] for s in sizes):
            assert max(alloc.values()) - min(alloc.values()) <= 1
        checked += 1

    records = [chat_record("A", f"a{i}", "x") for i in range(4)]
    records += [chat_record("B", f"b{i}", "x") for i in range(100)]
    records += [chat_record("C", f"c{i}", "x") for i in range(100)]
    pool_path = write_jsonl(tmp_path / "pool.jsonl", records)
    outs = []
    for name in ("m1.json", "m2.json"):
        out = tmp_path / name
        assert cli.main(["select", "--method", "balanced_random", "--pool", str(pool_path),
                         "--n", "30", "--seed", "9", "--output", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    assert json.loads(outs[0])["per_source_counts"] == {"A": 4, "B": 13, "C": 13}


@pytest.mark.acceptance("scorer selection rules and invariances")
def test_scorer_criteria():
    from test_scorers import table

    t = table([float(v) for v in range(1, 11)])
    mid = scorers.select_mid_ppl(t, 4)
    assert sorted(t.scores[mid].tolist()) == [4.0, 5.0, 6.0, 7.0]

    rng = np.random.default_rng(48)
    for _ in range(100):
        values = rng.uniform(size=int(rng.integers(2, 80)))
        n = int(rng.integers(1, len(values)))
        base_top = scorers.select_top_ppl(table(values), n)
        for f in (lambda x: 2 * x + 3, lambda x: x ** 3):
            assert scorers.select_top_ppl(table(f(values)), n).tolist() == base_top.tolist()
        ratios = rng.uniform(0.05, 0.95, size=len(values))
        base_ifd = scorers.select_ifd(table(ratios), n)
        assert scorers.select_ifd(table(2 * ratios + 3), n, filter_ge_one=False).tolist() == \
            scorers.select_ifd(table(ratios), n, filter_ge_one=False).tolist()
        assert base_ifd.tolist() == scorers.select_ifd(table(ratios), n).tolist()

    records = [store.LossRecord(i, 10, 4, 6, 5.0, float(c), float(u))
               for i, (c, u) in enumerate(zip(np.random.default_rng(49).uniform(0.1, 2.0, 50),
                                              np.random.default_rng(50).uniform(0.5, 3.0, 50)))]
    base, _ = scorers.ifd_scores(records)
    for c in (0.5, 2.0, 10.0):
        scaled = [store.LossRecord(r.pool_index, r.full_token_count, r.prompt_token_count,
                                   r.answer_token_count, r.full_nll_sum,
                                   c * r.answer_cond_nll_sum, c * r.answer_uncond_nll_sum)
                  for r in records]
        got, _ = scorers.ifd_scores(scaled)
        assert np.allclose(got.scores, base.scores, rtol=1e-12)


@pytest.mark.acceptance("dedup idempotence and accounting (100 pools)")
def test_dedup_criteria():
    from conftest import as_pool

    rng = np.random.default_rng(51)
    for _ in range(100):
        base = random_pool_records(rng, int(rng.integers(1, 40)))
        records = list(base)
        for _ in range(int(rng.integers(0, 20))):
            records.insert(int(rng.integers(len(records) + 1)),
                           base[int(rng.integers(len(base)))])
        pool = as_pool(records)
        deduped, report = corpus.dedup_pool(pool)
        assert len(deduped) + report.removed == len(pool)
        seen, expected = set(), []
        for s in pool.samples:
            if s.message_key() not in seen:
                seen.add(s.message_key())
                expected.append(s.messages)
        assert [s.messages for s in deduped.samples] == expected
        again, report2 = corpus.dedup_pool(deduped)
        assert again.samples == deduped.samples and report2.removed == 0


def _run_pipeline(pool_path, query_shards, loss_path, hidden_manifest, out_dir):
    out_dir.mkdir(parents=True, exist_ok=True)
    emb_dir = out_dir / "emb"
    assert cli.main(["pool-embeddings", "--hidden-manifest", str(hidden_manifest),
                     "--output-dir", str(emb_dir)]) == 0
    topk_dir = out_dir / "topk"
    query_args = [f"{task}={path}" for task, path in query_shards]
    assert cli.main(["topk", "--queries", *query_args,
                     "--pool-manifest", str(emb_dir / "embeddings_manifest.json"),
                     "--output-dir", str(topk_dir), "--n", "500", "--workers", "2"]) == 0
    manifests = {}
    topk_args = [f"{task}={topk_dir / f'topk_{task}.bin'}" for task, _ in query_shards]
    for method, extra in (
        ("rds", ["--topk", *topk_args]),
        ("random", ["--seed", "7"]),
        ("balanced_random", ["--seed", "7"]),
        ("top_ppl", ["--losses", str(loss_path)]),
        ("ifd", ["--losses", str(loss_path)]),
    ):
        out = out_dir / f"{method}.json"
        assert cli.main(["select", "--method", method, "--pool", str(pool_path),
                         "--n", "500", "--output", str(out), *extra]) == 0
        manifests[method] = out
    report_dir = out_dir / "report"
    manifest_args = [f"{m}={p}" for m, p in manifests.items()]
    assert cli.main(["report", "--manifests", *manifest_args,
                     "--output-dir", str(report_dir), "--model-params", "7e9"]) == 0
    artifacts = sorted(manifests.values()) + [
        report_dir / "composition.tsv",
        report_dir / "composition.png",
        report_dir / "flops.png",
        emb_dir / "embeddings_manifest.json",
    ] + sorted(topk_dir.glob("topk_*.bin"))
    return {p.relative_to(out_dir): p.read_bytes() for p in artifacts}


@pytest.mark.acceptance("end-to-end determinism (10k pool, 3 tasks, < 60 s)")
def test_end_to_end_determinism(tmp_path):
    from conftest import synth_hidden_store

    rng = np.random.default_rng(52)
    pool_path = write_jsonl(tmp_path / "pool.jsonl", random_pool_records(rng, 10_000))
    hidden_manifest, _ = synth_hidden_store(tmp_path / "feat", pool_path, 10_000,
                                            dim=32, seed=1, n_shards=4)
    loss_path = tmp_path / "loss.bin"
    synth_loss_shard(loss_path, 10_000, seed=2)
    query_shards = []
    for t, count in (("qa", 4), ("math", 6), ("code", 8)):
        qpath = tmp_path / f"queries_{t}.bin"
        store.write_embedding_shard(
            qpath, 0, rng.standard_normal((count, 32)).astype(np.float32))
        query_shards.append((t, qpath))

    t0 = time.perf_counter()
    first = _run_pipeline(pool_path, query_shards, loss_path, hidden_manifest,
                          tmp_path / "run1")
    second = _run_pipeline(pool_path, query_shards, loss_path, hidden_manifest,
                           tmp_path / "run2")
    elapsed = time.perf_counter() - t0
    assert set(first) == set(second)
    for rel in first:
        assert first[rel] == second[rel], f"{rel} differs between runs"
    rds = selection.SelectionManifest.load(tmp_path / "run1" / "rds.json")
    assert len(rds.selected_indices) == 500
    assert elapsed < 60.0, f"pipeline took {elapsed:.1f}s"


@pytest.mark.acceptance("scale smoke test: 1M x 256 top-k under 2 GB")
def test_scale_smoke(tmp_path):
    runner = Path(__file__).parent / "scale_runner.py"
    result_path = tmp_path / "result.json"
    proc = subprocess.run(
        [sys.executable, str(runner), str(tmp_path / "shards"), str(result_path)],
        capture_output=True, text=True, timeout=1200,
    )
    assert proc.returncode == 0, proc.stderr
    result = json.loads(result_path.read_text())
    assert result["oracle_exact"], "subsample scan diverged from dense oracle"
    assert result["containment"], "full-scan hits missing from subsample scan"
    assert result["shapes_ok"]
    assert result["maxrss_bytes"] < 2 * 1024**3, \
        f"peak RSS {result['maxrss_bytes'] / 1024**3:.2f} GiB"
