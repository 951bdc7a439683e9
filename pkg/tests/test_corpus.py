import numpy as np
import pytest

from poolsift import corpus
from poolsift.errors import ParseError

from conftest import as_pool, chat_record, random_pool_records, write_jsonl


def test_load_pool_counts_and_histogram(tmp_path):
    path = write_jsonl(tmp_path / "pool.jsonl", [
        chat_record("a", "q1", "r1"),
        chat_record("a", "q2", "r2"),
        chat_record("b", "q3", "r3"),
    ])
    pool = corpus.load_pool(path)
    assert len(pool) == 3
    assert pool.source_histogram == {"a": 2, "b": 1}
    assert [s.pool_index for s in pool.samples] == [0, 1, 2]


def test_load_pool_missing_messages_names_line(tmp_path):
    path = write_jsonl(tmp_path / "pool.jsonl", [
        chat_record("a", "q1", "r1"),
        {"source": "a"},
    ])
    with pytest.raises(ParseError, match=r":2:.*messages"):
        corpus.load_pool(path)


def test_load_pool_invalid_json_names_line(tmp_path):
    path = tmp_path / "pool.jsonl"
    path.write_text('{"source": "a", "messages": [{"role": "user", "content": "x"}]}\n{oops\n')
    with pytest.raises(ParseError, match=r":2:"):
        corpus.load_pool(path)


def test_load_pool_bad_role(tmp_path):
    path = write_jsonl(tmp_path / "pool.jsonl", [
        {"source": "a", "messages": [{"role": "robot", "content": "x"}]},
    ])
    with pytest.raises(ParseError, match="invalid role"):
        corpus.load_pool(path)


def test_load_pool_empty_file_errors(tmp_path):
    path = tmp_path / "pool.jsonl"
    path.write_text("")
    with pytest.raises(ParseError, match="empty pool"):
        corpus.load_pool(path)


def test_load_pool_deterministic(tmp_path):
    path = write_jsonl(tmp_path / "pool.jsonl",
                       random_pool_records(np.random.default_rng(0), 20))
    a = corpus.load_pool(path)
    b = corpus.load_pool(path)
    assert a == b


def test_dedup_removes_exact_duplicate():
    x = chat_record("a", "same question", "same answer")
    y = chat_record("b", "other question", "other answer")
    pool = as_pool([x, y, x])
    deduped, report = corpus.dedup_pool(pool)
    assert len(deduped) == 2
    assert report.removed_indices == [2]
    assert [s.pool_index for s in deduped.samples] == [0, 1]
    # source differs but messages match: still a duplicate (messages-only key)
    zx = dict(x, source="zzz")
    deduped2, report2 = corpus.dedup_pool(as_pool([x, zx]))
    assert len(deduped2) == 1 and report2.removed_indices == [1]


def test_dedup_whitespace_significant():
    a = chat_record("a", "question", "answer")
    b = chat_record("a", "question ", "answer")
    deduped, report = corpus.dedup_pool(as_pool([a, b]))
    assert len(deduped) == 2 and not report.removed_indices


def test_dedup_all_distinct_unchanged():
    records = random_pool_records(np.random.default_rng(1), 10)
    pool = as_pool(records)
    deduped, report = corpus.dedup_pool(pool)
    assert deduped.samples == pool.samples
    assert report.removed == 0


def test_dedup_idempotent_and_accounting():
    rng = np.random.default_rng(2)
    for _ in range(25):
        base = random_pool_records(rng, int(rng.integers(1, 30)))
        records = list(base)
        for _ in range(int(rng.integers(0, 15))):
            records.insert(int(rng.integers(len(records) + 1)),
                           base[int(rng.integers(len(base)))])
        pool = as_pool(records)
        deduped, report = corpus.dedup_pool(pool)
        assert len(deduped) + report.removed == len(pool)
        again, report2 = corpus.dedup_pool(deduped)
        assert again.samples == deduped.samples
        assert report2.removed == 0
        # first occurrences survive in order
        seen = set()
        expected = []
        for s in pool.samples:
            key = s.message_key()
            if key not in seen:
                seen.add(key)
                expected.append((s.source, s.messages))
        assert [(s.source, s.messages) for s in deduped.samples] == expected
        assert corpus.histogram(deduped.samples) == deduped.source_histogram


def test_load_query_sets(tmp_path):
    p1 = write_jsonl(tmp_path / "gsm.jsonl",
                     [chat_record("q", f"p{i}", f"a{i}") for i in range(8)])
    p2 = write_jsonl(tmp_path / "bbh.jsonl",
                     [chat_record("q", f"p{i}", f"a{i}") for i in range(81)])
    sets = corpus.load_query_sets({"gsm8k": p1, "bbh": p2})
    assert [(qs.task_id, len(qs)) for qs in sets] == [("gsm8k", 8), ("bbh", 81)]


def test_load_query_sets_missing_file_names_task(tmp_path):
    with pytest.raises(ParseError, match="task 'gsm8k'"):
        corpus.load_query_sets({"gsm8k": tmp_path / "nope.jsonl"})


def test_load_query_sets_empty_errors(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    with pytest.raises(ParseError, match="empty query file"):
        corpus.load_query_sets({"t": path})


def test_load_query_single_query(tmp_path):
    path = write_jsonl(tmp_path / "one.jsonl", [chat_record("q", "p", "a")])
    (qs,) = corpus.load_query_sets({"t": path})
    assert len(qs) == 1


def test_write_pool_round_trip(tmp_path):
    records = random_pool_records(np.random.default_rng(3), 12)
    pool = as_pool(records)
    out = tmp_path / "out.jsonl"
    corpus.write_pool(pool, out)
    again = corpus.load_pool(out)
    assert again.samples == pool.samples
