"""Writers (and check readers) for the selection engine's binary artifacts.

The layout is the published file contract of the selection engine; this
module writes it from scratch rather than importing the engine. Header
(little-endian, 32 bytes): magic "SIFT", u32 version=1, u32 record-type tag,
u64 starting pool_index, u64 count, u32 dim. Record types used here:
2 = hidden states, 3 = loss records, 1 = embeddings.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"SIFT"
VERSION = 1
RT_EMBEDDING = 1
RT_HIDDEN = 2
RT_LOSS = 3

_HEADER = struct.Struct("<4sIIQQI")
_LOSS_REC = struct.Struct("<IIIIddd")


@dataclass
class HiddenOut:
    pool_index: int
    prompt_span: tuple[int, int]
    answer_span: tuple[int, int]
    hidden: np.ndarray  # L x dim float32


@dataclass
class LossOut:
    pool_index: int
    full_token_count: int
    prompt_token_count: int
    answer_token_count: int
    full_nll_sum: float
    answer_cond_nll_sum: float
    answer_uncond_nll_sum: float
    ifd_eligible: bool


def _header(record_type: int, start: int, count: int, dim: int) -> bytes:
    return _HEADER.pack(MAGIC, VERSION, record_type, start, count, dim)


def write_hidden(path, records: list[HiddenOut]) -> None:
    start = records[0].pool_index
    dim = records[0].hidden.shape[1]
    with open(path, "wb") as f:
        f.write(_header(RT_HIDDEN, start, len(records), dim))
        for rec in records:
            f.write(struct.pack("<IIIII", rec.hidden.shape[0],
                                *rec.prompt_span, *rec.answer_span))
            f.write(np.ascontiguousarray(rec.hidden, dtype="<f4").tobytes())


def write_losses(path, records: list[LossOut]) -> None:
    start = records[0].pool_index
    with open(path, "wb") as f:
        f.write(_header(RT_LOSS, start, len(records), 0))
        for rec in records:
            f.write(_LOSS_REC.pack(
                rec.full_token_count, rec.prompt_token_count, rec.answer_token_count,
                1 if rec.ifd_eligible else 0,
                rec.full_nll_sum, rec.answer_cond_nll_sum, rec.answer_uncond_nll_sum))


def write_embeddings(path, start: int, vectors: np.ndarray) -> None:
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_header(RT_EMBEDDING, start, vectors.shape[0], vectors.shape[1]))
        f.write(vectors.tobytes())


def read_hidden(path) -> list[HiddenOut]:
    with open(path, "rb") as f:
        magic, version, record_type, start, count, dim = _HEADER.unpack(f.read(_HEADER.size))
        assert magic == MAGIC and version == VERSION and record_type == RT_HIDDEN
        out = []
        for i in range(count):
            length, p0, p1, a0, a1 = struct.unpack("<IIIII", f.read(20))
            hidden = np.frombuffer(f.read(length * dim * 4), dtype="<f4").reshape(length, dim)
            out.append(HiddenOut(start + i, (p0, p1), (a0, a1), hidden))
    return out


def read_losses(path) -> list[LossOut]:
    with open(path, "rb") as f:
        magic, version, record_type, start, count, _dim = _HEADER.unpack(f.read(_HEADER.size))
        assert magic == MAGIC and version == VERSION and record_type == RT_LOSS
        out = []
        for i in range(count):
            (full_tc, prompt_tc, answer_tc, flags,
             full_nll, cond, uncond) = _LOSS_REC.unpack(f.read(_LOSS_REC.size))
            out.append(LossOut(start + i, full_tc, prompt_tc, answer_tc,
                               full_nll, cond, uncond, bool(flags & 1)))
    return out


def read_embeddings(path) -> tuple[int, np.ndarray]:
    with open(path, "rb") as f:
        magic, version, record_type, start, count, dim = _HEADER.unpack(f.read(_HEADER.size))
        assert magic == MAGIC and version == VERSION and record_type == RT_EMBEDDING
        vectors = np.frombuffer(f.read(count * dim * 4), dtype="<f4").reshape(count, dim)
    return start, vectors


def load_pool_jsonl(path) -> list[dict]:
    """Minimal reader for the pool/query JSONL interchange format."""
    samples = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            messages = [(m["role"], m["content"]) for m in obj["messages"]]
            samples.append({"pool_index": len(samples),
                            "source": obj.get("source", ""),
                            "messages": messages,
                            "line": line_no})
    return samples


def file_fingerprint(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def write_manifest(path, pool_fingerprint: str, model: str, max_tokens: int,
                   dim: int, shard_entries: list[dict], extras: dict) -> None:
    obj = {
        "pool_fingerprint": pool_fingerprint,
        "extractor_model": model,
        "max_tokens": max_tokens,
        "dim": dim,
        "shards": shard_entries,
        "extras": extras,
    }
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")
