"""Binary on-disk artifacts: embedding shards, hidden-state dumps, loss records.

Shared shard header (little-endian, 32 bytes):

    magic   4 bytes  b"SIFT"
    u32     format version (1)
    u32     record-type tag
    u64     starting pool_index
    u64     record count
    u32     dim (0 where not meaningful)

Payload layouts per record type:

    EMBEDDING (1):  count x dim float32, row-major.
    HIDDEN    (2):  per record: u32 token count L, u32 prompt_start,
                    u32 prompt_end, u32 answer_start, u32 answer_end,
                    then L x dim float32. Spans are half-open, within [0, L).
    LOSS      (3):  per record: u32 full_token_count, u32 prompt_token_count,
                    u32 answer_token_count, u32 flags (bit 0: IFD-eligible),
                    f64 full_nll_sum, f64 answer_cond_nll_sum,
                    f64 answer_uncond_nll_sum. pool_index is implicit
                    (header start + ordinal).
    TOPK      (4):  per record (one per query): u16 query-id byte length,
                    query id UTF-8, u32 entry count m, m x u64 pool_index,
                    m x float32 score. Header dim holds k.
    SCORE     (5):  count x (u64 pool_index, f64 score) pairs.

Shards are immutable after write; writers go through a temp file and rename
on success so no partial artifact is ever left behind.
"""

from __future__ import annotations

import json
import os
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import StoreError

MAGIC = b"SIFT"
VERSION = 1

RT_EMBEDDING = 1
RT_HIDDEN = 2
RT_LOSS = 3
RT_TOPK = 4
RT_SCORE = 5

RECORD_TYPE_NAMES = {
    RT_EMBEDDING: "embedding",
    RT_HIDDEN: "hidden",
    RT_LOSS: "loss",
    RT_TOPK: "topk",
    RT_SCORE: "score",
}
RECORD_TYPE_TAGS = {v: k for k, v in RECORD_TYPE_NAMES.items()}

_HEADER = struct.Struct("<4sIIQQI")
HEADER_SIZE = _HEADER.size
_LOSS_REC = struct.Struct("<IIIIddd")


@dataclass(frozen=True)
class ShardHeader:
    record_type: int
    start_index: int
    count: int
    dim: int


@dataclass
class LossRecord:
    pool_index: int
    full_token_count: int
    prompt_token_count: int
    answer_token_count: int
    full_nll_sum: float
    answer_cond_nll_sum: float
    answer_uncond_nll_sum: float
    ifd_eligible: bool = True


@dataclass
class HiddenRecord:
    pool_index: int
    prompt_span: tuple[int, int]
    answer_span: tuple[int, int]
    hidden: np.ndarray  # L x dim float32

    @property
    def token_count(self) -> int:
        return self.hidden.shape[0]


@contextmanager
def atomic_write(path):
    """Yield a temp path, renamed over `path` on success, removed on failure."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException:
        if tmp.exists():
            tmp.unlink()
        raise


def _write_header(f, record_type: int, start_index: int, count: int, dim: int) -> None:
    f.write(_HEADER.pack(MAGIC, VERSION, record_type, start_index, count, dim))


def read_header(f, path) -> ShardHeader:
    raw = f.read(HEADER_SIZE)
    if len(raw) < HEADER_SIZE:
        raise StoreError(f"{path}: truncated header")
    magic, version, record_type, start_index, count, dim = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise StoreError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise StoreError(f"{path}: unsupported format version {version}")
    return ShardHeader(record_type=record_type, start_index=start_index, count=count, dim=dim)


def _expect_type(header: ShardHeader, expected: int, path) -> None:
    if header.record_type != expected:
        got = RECORD_TYPE_NAMES.get(header.record_type, header.record_type)
        want = RECORD_TYPE_NAMES[expected]
        raise StoreError(f"{path}: record type {got}, expected {want}")


# ---------------------------------------------------------------------------
# Embedding shards


def write_embedding_shard(path, start_index: int, vectors: np.ndarray) -> None:
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    if vectors.ndim != 2:
        raise StoreError("embedding payload must be a 2-D array")
    with atomic_write(path) as tmp:
        with open(tmp, "wb") as f:
            _write_header(f, RT_EMBEDDING, start_index, vectors.shape[0], vectors.shape[1])
            f.write(vectors.tobytes())


def read_embedding_shard(path) -> tuple[int, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as f:
        header = read_header(f, path)
        _expect_type(header, RT_EMBEDDING, path)
        payload = f.read()
    expected = header.count * header.dim * 4
    if len(payload) != expected:
        raise StoreError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    vectors = np.frombuffer(payload, dtype="<f4").reshape(header.count, header.dim)
    return header.start_index, vectors


class EmbeddingStore:
    """Read-only view over one or more contiguous embedding shards.

    Rows are addressed by absolute pool_index. Reads stream from disk with
    seek + read so a scan never holds more than the requested rows resident.
    """

    def __init__(self, shards: list[tuple[Path, ShardHeader]]):
        if not shards:
            raise StoreError("embedding store has no shards")
        shards = sorted(shards, key=lambda s: s[1].start_index)
        dim = shards[0][1].dim
        for path, header in shards:
            if header.dim != dim:
                raise StoreError(f"{path}: dim {header.dim} != store dim {dim}")
        pos = shards[0][1].start_index
        for path, header in shards:
            if header.start_index != pos:
                raise StoreError(
                    f"{path}: shard starts at {header.start_index}, expected {pos} "
                    "(gap or overlap in pool coverage)"
                )
            pos += header.count
        self.shards = shards
        self.dim = dim
        self.start_index = shards[0][1].start_index
        self.count = pos - self.start_index

    @classmethod
    def open(cls, paths) -> "EmbeddingStore":
        shards = []
        for p in paths:
            p = Path(p)
            with open(p, "rb") as f:
                header = read_header(f, p)
                _expect_type(header, RT_EMBEDDING, p)
                f.seek(0, os.SEEK_END)
                size = f.tell()
            expected = HEADER_SIZE + header.count * header.dim * 4
            if size != expected:
                raise StoreError(f"{p}: file is {size} bytes, expected {expected}")
            shards.append((p, header))
        return cls(shards)

    def read_rows(self, start: int, stop: int) -> np.ndarray:
        """Gather rows [start, stop) by absolute pool_index into one array."""
        if start < self.start_index or stop > self.start_index + self.count or start > stop:
            raise StoreError(
                f"row range [{start}, {stop}) outside store "
                f"[{self.start_index}, {self.start_index + self.count})"
            )
        out = np.empty((stop - start, self.dim), dtype=np.float32)
        filled = 0
        for path, header in self.shards:
            lo = max(start, header.start_index)
            hi = min(stop, header.start_index + header.count)
            if lo >= hi:
                continue
            with open(path, "rb") as f:
                f.seek(HEADER_SIZE + (lo - header.start_index) * self.dim * 4)
                block = np.fromfile(f, dtype="<f4", count=(hi - lo) * self.dim)
            if block.size != (hi - lo) * self.dim:
                raise StoreError(f"{path}: truncated payload")
            out[filled : filled + (hi - lo)] = block.reshape(hi - lo, self.dim)
            filled += hi - lo
        return out


# ---------------------------------------------------------------------------
# Hidden-state dumps


def write_hidden_shard(path, records: list[HiddenRecord]) -> None:
    if not records:
        raise StoreError("refusing to write an empty hidden-state shard")
    dim = records[0].hidden.shape[1]
    start = records[0].pool_index
    for i, rec in enumerate(records):
        if rec.pool_index != start + i:
            raise StoreError("hidden records must be contiguous in pool_index")
        if rec.hidden.shape[1] != dim:
            raise StoreError(f"pool_index {rec.pool_index}: dim {rec.hidden.shape[1]} != {dim}")
        _check_spans(rec)
    with atomic_write(path) as tmp:
        with open(tmp, "wb") as f:
            _write_header(f, RT_HIDDEN, start, len(records), dim)
            for rec in records:
                length = rec.hidden.shape[0]
                f.write(struct.pack("<IIIII", length, *rec.prompt_span, *rec.answer_span))
                f.write(np.ascontiguousarray(rec.hidden, dtype="<f4").tobytes())


def _check_spans(rec: HiddenRecord) -> None:
    length = rec.hidden.shape[0]
    p0, p1 = rec.prompt_span
    a0, a1 = rec.answer_span
    for lo, hi in ((p0, p1), (a0, a1)):
        if not (0 <= lo <= hi <= length):
            raise StoreError(f"pool_index {rec.pool_index}: span ({lo}, {hi}) outside [0, {length}]")
    if p1 > a0 and a1 > p0 and p0 != p1 and a0 != a1:
        raise StoreError(f"pool_index {rec.pool_index}: prompt and answer spans overlap")


def iter_hidden_shard(path):
    """Yield HiddenRecord values from a shard, validating structure as it goes."""
    path = Path(path)
    with open(path, "rb") as f:
        header = read_header(f, path)
        _expect_type(header, RT_HIDDEN, path)
        for i in range(header.count):
            meta = f.read(20)
            if len(meta) < 20:
                raise StoreError(f"{path}: truncated record header at ordinal {i}")
            length, p0, p1, a0, a1 = struct.unpack("<IIIII", meta)
            payload = f.read(length * header.dim * 4)
            if len(payload) < length * header.dim * 4:
                raise StoreError(f"{path}: truncated payload at ordinal {i}")
            hidden = np.frombuffer(payload, dtype="<f4").reshape(length, header.dim)
            yield HiddenRecord(
                pool_index=header.start_index + i,
                prompt_span=(p0, p1),
                answer_span=(a0, a1),
                hidden=hidden,
            )
        if f.read(1):
            raise StoreError(f"{path}: trailing bytes after last record")


def read_hidden_shard(path) -> list[HiddenRecord]:
    return list(iter_hidden_shard(path))


# ---------------------------------------------------------------------------
# Loss records


def write_loss_shard(path, records: list[LossRecord]) -> None:
    if not records:
        raise StoreError("refusing to write an empty loss shard")
    start = records[0].pool_index
    for i, rec in enumerate(records):
        if rec.pool_index != start + i:
            raise StoreError("loss records must be contiguous in pool_index")
    with atomic_write(path) as tmp:
        with open(tmp, "wb") as f:
            _write_header(f, RT_LOSS, start, len(records), 0)
            for rec in records:
                flags = 1 if rec.ifd_eligible else 0
                f.write(
                    _LOSS_REC.pack(
                        rec.full_token_count,
                        rec.prompt_token_count,
                        rec.answer_token_count,
                        flags,
                        rec.full_nll_sum,
                        rec.answer_cond_nll_sum,
                        rec.answer_uncond_nll_sum,
                    )
                )


def read_loss_shard(path) -> list[LossRecord]:
    path = Path(path)
    with open(path, "rb") as f:
        header = read_header(f, path)
        _expect_type(header, RT_LOSS, path)
        payload = f.read()
    expected = header.count * _LOSS_REC.size
    if len(payload) != expected:
        raise StoreError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    records = []
    for i in range(header.count):
        full_tc, prompt_tc, answer_tc, flags, full_nll, cond_nll, uncond_nll = _LOSS_REC.unpack_from(
            payload, i * _LOSS_REC.size
        )
        records.append(
            LossRecord(
                pool_index=header.start_index + i,
                full_token_count=full_tc,
                prompt_token_count=prompt_tc,
                answer_token_count=answer_tc,
                full_nll_sum=full_nll,
                answer_cond_nll_sum=cond_nll,
                answer_uncond_nll_sum=uncond_nll,
                ifd_eligible=bool(flags & 1),
            )
        )
    return records


def load_loss_records(paths) -> list[LossRecord]:
    """Read and concatenate loss shards, sorted by starting pool_index."""
    records: list[LossRecord] = []
    for path in paths:
        records.extend(read_loss_shard(path))
    records.sort(key=lambda r: r.pool_index)
    return records


# ---------------------------------------------------------------------------
# Score tables (binary form; TSV lives in scorers)


def write_score_shard(path, indices: np.ndarray, scores: np.ndarray) -> None:
    indices = np.ascontiguousarray(indices, dtype="<u8")
    scores = np.ascontiguousarray(scores, dtype="<f8")
    if indices.shape != scores.shape or indices.ndim != 1:
        raise StoreError("score table arrays must be 1-D and equal length")
    pairs = np.empty(indices.size, dtype=[("index", "<u8"), ("score", "<f8")])
    pairs["index"] = indices
    pairs["score"] = scores
    with atomic_write(path) as tmp:
        with open(tmp, "wb") as f:
            _write_header(f, RT_SCORE, 0, indices.size, 0)
            f.write(pairs.tobytes())


def read_score_shard(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as f:
        header = read_header(f, path)
        _expect_type(header, RT_SCORE, path)
        payload = f.read()
    expected = header.count * 16
    if len(payload) != expected:
        raise StoreError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    pairs = np.frombuffer(payload, dtype=[("index", "<u8"), ("score", "<f8")])
    return pairs["index"].astype(np.int64), pairs["score"].astype(np.float64)


# ---------------------------------------------------------------------------
# Feature manifest + store validation


@dataclass
class FeatureManifest:
    pool_fingerprint: str
    extractor_model: str
    max_tokens: int
    dim: int
    shards: list[dict]  # {path, record_type, start, count}
    extras: dict = field(default_factory=dict)

    def to_json(self) -> str:
        obj = {
            "pool_fingerprint": self.pool_fingerprint,
            "extractor_model": self.extractor_model,
            "max_tokens": self.max_tokens,
            "dim": self.dim,
            "shards": self.shards,
            "extras": self.extras,
        }
        return json.dumps(obj, sort_keys=True, indent=2) + "\n"

    def save(self, path) -> None:
        with atomic_write(path) as tmp:
            Path(tmp).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "FeatureManifest":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        try:
            return cls(
                pool_fingerprint=obj["pool_fingerprint"],
                extractor_model=obj["extractor_model"],
                max_tokens=obj["max_tokens"],
                dim=obj["dim"],
                shards=obj["shards"],
                extras=obj.get("extras", {}),
            )
        except KeyError as e:
            raise StoreError(f"{path}: manifest missing field {e}") from e

    def shard_paths(self, record_type: str, base_dir=None) -> list[Path]:
        base = Path(base_dir) if base_dir is not None else None
        out = []
        for entry in self.shards:
            if entry["record_type"] != record_type:
                continue
            p = Path(entry["path"])
            out.append(base / p if base is not None and not p.is_absolute() else p)
        return out


@dataclass
class ValidationReport:
    failures: list[str] = field(default_factory=list)
    checked_shards: int = 0
    covered: int = 0
    expected: int = 0

    @property
    def ok(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        status = "ok" if self.ok else "FAILED"
        head = [f"store validation: {status}", f"coverage: {self.covered}/{self.expected}"]
        return head + [f"failure: {msg}" for msg in self.failures]


def validate_store(manifest: FeatureManifest, pool_size: int, base_dir=None,
                   pool_fingerprint: str | None = None) -> ValidationReport:
    """Structural validation of a feature store against its pool.

    Violations are report items, never exceptions: coverage gaps/overlaps per
    record type, per-shard header mismatches, wrong dims, truncation, and a
    stale pool fingerprint when one is supplied for comparison.
    """
    report = ValidationReport(expected=pool_size)
    if pool_fingerprint is not None and manifest.pool_fingerprint != pool_fingerprint:
        report.failures.append(
            f"stale features: manifest fingerprint {manifest.pool_fingerprint} "
            f"!= pool fingerprint {pool_fingerprint}"
        )

    by_type: dict[str, list[dict]] = {}
    for entry in manifest.shards:
        by_type.setdefault(entry["record_type"], []).append(entry)

    covered_any = np.zeros(pool_size, dtype=bool) if pool_size else None
    for record_type, entries in sorted(by_type.items()):
        tag = RECORD_TYPE_TAGS.get(record_type)
        if tag is None:
            report.failures.append(f"unknown record type {record_type!r} in manifest")
            continue
        ranges = []
        for entry in entries:
            p = Path(entry["path"])
            if base_dir is not None and not p.is_absolute():
                p = Path(base_dir) / p
            report.checked_shards += 1
            if not p.exists():
                report.failures.append(f"{p}: shard file missing")
                continue
            try:
                with open(p, "rb") as f:
                    header = read_header(f, p)
            except StoreError as e:
                report.failures.append(str(e))
                continue
            if header.record_type != tag:
                report.failures.append(
                    f"{p}: record type {RECORD_TYPE_NAMES.get(header.record_type)} "
                    f"!= manifest entry {record_type}"
                )
            if header.start_index != entry["start"] or header.count != entry["count"]:
                report.failures.append(
                    f"{p}: header range ({header.start_index}, {header.count}) "
                    f"!= manifest range ({entry['start']}, {entry['count']})"
                )
            if record_type in ("embedding", "hidden") and header.dim != manifest.dim:
                report.failures.append(f"{p}: dim {header.dim} != manifest dim {manifest.dim}")
            err = _check_shard_payload(p, header)
            if err:
                report.failures.append(err)
            ranges.append((entry["start"], entry["start"] + entry["count"]))

        seen = np.zeros(pool_size, dtype=bool)
        for lo, hi in ranges:
            if lo < 0 or hi > pool_size:
                report.failures.append(
                    f"{record_type}: shard range [{lo}, {hi}) outside pool [0, {pool_size})"
                )
                continue
            if seen[lo:hi].any():
                report.failures.append(f"{record_type}: overlapping shard ranges at [{lo}, {hi})")
            seen[lo:hi] = True
        gaps = _missing_runs(seen)
        for lo, hi in gaps:
            report.failures.append(f"{record_type}: missing pool indices {lo}..{hi - 1}")
        if covered_any is not None:
            covered_any |= seen

    if covered_any is not None:
        report.covered = int(covered_any.sum())
    return report


def _check_shard_payload(path, header: ShardHeader) -> str | None:
    size = os.path.getsize(path)
    if header.record_type == RT_EMBEDDING:
        expected = HEADER_SIZE + header.count * header.dim * 4
        if size != expected:
            return f"{path}: file is {size} bytes, expected {expected}"
    elif header.record_type == RT_LOSS:
        expected = HEADER_SIZE + header.count * _LOSS_REC.size
        if size != expected:
            return f"{path}: file is {size} bytes, expected {expected}"
    elif header.record_type == RT_HIDDEN:
        try:
            for _ in iter_hidden_shard(path):
                pass
        except StoreError as e:
            return str(e)
    return None


def _missing_runs(seen: np.ndarray) -> list[tuple[int, int]]:
    runs = []
    missing = np.flatnonzero(~seen)
    if missing.size == 0:
        return runs
    start = prev = int(missing[0])
    for idx in missing[1:]:
        idx = int(idx)
        if idx != prev + 1:
            runs.append((start, prev + 1))
            start = idx
        prev = idx
    runs.append((start, prev + 1))
    return runs
