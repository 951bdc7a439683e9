import json

import numpy as np
import pytest

from poolsift import corpus

ACCEPTANCE_RESULTS: dict[str, bool] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): acceptance criterion label")


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    if report.when == "call":
        marker = item.get_closest_marker("acceptance")
        if marker:
            ACCEPTANCE_RESULTS[marker.args[0]] = report.outcome == "passed"
    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, ok in ACCEPTANCE_RESULTS.items():
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}")


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")
    return path


def chat_record(source, prompt, answer, system=None):
    messages = []
    if system is not None:
        messages.append({"role": "system", "content": system})
    messages.append({"role": "user", "content": prompt})
    messages.append({"role": "assistant", "content": answer})
    return {"source": source, "messages": messages}


def random_pool_records(rng, size, sources=("alpha", "beta", "gamma")):
    records = []
    for i in range(size):
        source = sources[int(rng.integers(len(sources)))]
        records.append(chat_record(source, f"question {i} {rng.integers(1 << 30)}",
                                   f"answer {i} {rng.integers(1 << 30)}"))
    return records


@pytest.fixture
def small_pool(tmp_path):
    path = write_jsonl(tmp_path / "pool.jsonl", [
        chat_record("a", "what is 1+1?", "2"),
        chat_record("a", "name a color", "blue"),
        chat_record("b", "capital of france", "paris"),
    ])
    return corpus.load_pool(path)


def as_pool(records):
    """Build a DataPool directly from record dicts (no file round trip)."""
    samples = [
        corpus.Sample(
            pool_index=i,
            source=rec["source"],
            messages=tuple((m["role"], m["content"]) for m in rec["messages"]),
        )
        for i, rec in enumerate(records)
    ]
    return corpus.DataPool(samples=samples)


def synth_hidden_store(out_dir, pool_path, size, dim, seed=0, n_shards=2, max_tokens=64):
    """Random hidden-state dumps + manifest covering a pool of `size`."""
    from poolsift import store

    rng = np.random.default_rng(seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(size):
        prompt_len = int(rng.integers(1, 5))
        answer_len = int(rng.integers(1, 5))
        total = prompt_len + answer_len + int(rng.integers(0, 3))
        records.append(store.HiddenRecord(
            pool_index=i,
            prompt_span=(0, prompt_len),
            answer_span=(prompt_len, prompt_len + answer_len),
            hidden=rng.standard_normal((total, dim)).astype(np.float32),
        ))
    bounds = np.linspace(0, size, n_shards + 1).astype(int)
    entries = []
    for si in range(n_shards):
        lo, hi = int(bounds[si]), int(bounds[si + 1])
        if lo == hi:
            continue
        path = out_dir / f"hidden_{lo:06d}.bin"
        store.write_hidden_shard(path, records[lo:hi])
        entries.append({"path": path.name, "record_type": "hidden",
                        "start": lo, "count": hi - lo})
    manifest = store.FeatureManifest(
        pool_fingerprint=corpus.file_fingerprint(pool_path),
        extractor_model="synthetic",
        max_tokens=max_tokens,
        dim=dim,
        shards=entries,
    )
    manifest_path = out_dir / "hidden_manifest.json"
    manifest.save(manifest_path)
    return manifest_path, records


def synth_loss_shard(path, size, seed=0, start=0):
    """Random loss records with plausible token counts and NLL sums."""
    from poolsift import store

    rng = np.random.default_rng(seed)
    records = []
    for i in range(size):
        prompt_tc = int(rng.integers(1, 30))
        answer_tc = int(rng.integers(1, 30))
        full_tc = prompt_tc + answer_tc + int(rng.integers(0, 5))
        uncond = float(rng.uniform(0.5, 3.0)) * answer_tc
        cond = float(rng.uniform(0.1, 1.2)) * uncond
        records.append(store.LossRecord(
            pool_index=start + i,
            full_token_count=full_tc,
            prompt_token_count=prompt_tc,
            answer_token_count=answer_tc,
            full_nll_sum=float(rng.uniform(0.2, 4.0)) * full_tc,
            answer_cond_nll_sum=cond,
            answer_uncond_nll_sum=uncond,
        ))
    store.write_loss_shard(path, records)
    return records


def dense_cosine_oracle(queries, pool):
    """Per-pair cosine via scalar math; the reference for similarity tests."""
    queries = np.asarray(queries, dtype=np.float64)
    pool = np.asarray(pool, dtype=np.float64)
    out = np.empty((queries.shape[0], pool.shape[0]))
    for qi, q in enumerate(queries):
        for di, d in enumerate(pool):
            out[qi, di] = float(np.dot(q, d) / (np.linalg.norm(q) * np.linalg.norm(d)))
    return out
