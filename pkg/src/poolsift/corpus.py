"""Load, validate, deduplicate, and index data pools and query sets.

Pool and query files are JSON lines: one object per line with a non-empty
`source` string and a `messages` array of {role, content} turns. Samples are
identified positionally (`pool_index`, assigned in file order); every
downstream artifact joins on that index, never on text.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ParseError

ROLES = ("user", "assistant", "system")


@dataclass(frozen=True)
class Sample:
    pool_index: int
    source: str
    messages: tuple[tuple[str, str], ...]  # (role, content) turns in order

    def message_key(self) -> str:
        """Serialized turn sequence used for exact-match comparisons.

        Whitespace is significant; the source label is deliberately not part
        of the key.
        """
        return json.dumps(list(self.messages), ensure_ascii=False, separators=(",", ":"))

    def has_role(self, role: str) -> bool:
        return any(r == role for r, _ in self.messages)


@dataclass
class DataPool:
    samples: list[Sample]
    source_histogram: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.source_histogram:
            self.source_histogram = histogram(self.samples)

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class QuerySet:
    task_id: str
    queries: list[Sample]

    def __len__(self) -> int:
        return len(self.queries)


@dataclass
class DedupReport:
    original_size: int
    kept: int
    removed_indices: list[int]
    kept_per_source: dict[str, int]
    removed_per_source: dict[str, int]

    @property
    def removed(self) -> int:
        return len(self.removed_indices)


def histogram(samples) -> dict[str, int]:
    counts: dict[str, int] = {}
    for s in samples:
        counts[s.source] = counts.get(s.source, 0) + 1
    return counts


def _parse_record(obj, pool_index: int, path, line_no: int) -> Sample:
    where = f"{path}:{line_no}"
    if not isinstance(obj, dict):
        raise ParseError(f"{where}: record is not a JSON object")
    source = obj.get("source")
    if not isinstance(source, str) or not source:
        raise ParseError(f"{where}: missing or empty 'source'")
    messages = obj.get("messages")
    if not isinstance(messages, list) or not messages:
        raise ParseError(f"{where}: missing or empty 'messages'")
    turns = []
    for i, msg in enumerate(messages):
        if not isinstance(msg, dict):
            raise ParseError(f"{where}: messages[{i}] is not an object")
        role = msg.get("role")
        content = msg.get("content")
        if role not in ROLES:
            raise ParseError(f"{where}: messages[{i}] has invalid role {role!r}")
        if not isinstance(content, str):
            raise ParseError(f"{where}: messages[{i}] content is not a string")
        turns.append((role, content))
    return Sample(pool_index=pool_index, source=source, messages=tuple(turns))


def _load_samples(path) -> list[Sample]:
    path = Path(path)
    samples: list[Sample] = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}:{line_no}: invalid JSON ({e.msg})") from e
            samples.append(_parse_record(obj, len(samples), path, line_no))
    return samples


def load_pool(path, fmt: str = "jsonl") -> DataPool:
    """Load a pool file, assigning pool_index in file order."""
    if fmt != "jsonl":
        raise ParseError(f"unsupported pool format {fmt!r}")
    samples = _load_samples(path)
    if not samples:
        raise ParseError(f"{path}: empty pool")
    return DataPool(samples=samples)


def load_query_sets(paths: dict[str, str]) -> list[QuerySet]:
    """Load one QuerySet per task; `paths` maps task_id to a JSONL file."""
    query_sets = []
    for task_id, path in paths.items():
        try:
            queries = _load_samples(path)
        except OSError as e:
            raise ParseError(f"task {task_id!r}: cannot read {path}: {e.strerror}") from e
        if not queries:
            raise ParseError(f"task {task_id!r}: empty query file {path}")
        query_sets.append(QuerySet(task_id=task_id, queries=queries))
    return query_sets


def dedup_pool(pool: DataPool) -> tuple[DataPool, DedupReport]:
    """Exact-match deduplication keeping the first occurrence of each sample.

    Equality is the full ordered (role, content) turn sequence, compared
    bit-exactly. The surviving samples are re-indexed contiguously; removed
    indices in the report refer to the input pool.
    """
    seen: set[bytes] = set()
    kept: list[Sample] = []
    removed_indices: list[int] = []
    removed_per_source: dict[str, int] = {}
    for sample in pool.samples:
        digest = hashlib.sha256(sample.message_key().encode("utf-8")).digest()
        if digest in seen:
            removed_indices.append(sample.pool_index)
            removed_per_source[sample.source] = removed_per_source.get(sample.source, 0) + 1
            continue
        seen.add(digest)
        kept.append(Sample(pool_index=len(kept), source=sample.source, messages=sample.messages))
    deduped = DataPool(samples=kept)
    report = DedupReport(
        original_size=len(pool),
        kept=len(kept),
        removed_indices=removed_indices,
        kept_per_source=deduped.source_histogram,
        removed_per_source=removed_per_source,
    )
    return deduped, report


def write_pool(pool: DataPool, path) -> None:
    """Write a pool back to JSONL (used after dedup)."""
    from .store import atomic_write

    with atomic_write(path) as tmp:
        with open(tmp, "w", encoding="utf-8") as f:
            for s in pool.samples:
                obj = {"source": s.source, "messages": [{"role": r, "content": c} for r, c in s.messages]}
                f.write(json.dumps(obj, ensure_ascii=False) + "\n")


def file_fingerprint(path) -> str:
    """SHA-256 of the raw file bytes, prefixed with the algorithm name."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()
