"""Run a causal LM over rendered samples and emit feature-store artifacts.

The extractor is a pure producer: it scores and embeds nothing. Samples run
through the model one at a time (a BOS token is prepended so every rendered
token receives a next-token loss), which keeps records bit-reproducible:
identical samples always yield identical bytes regardless of their position
in the pool. `batch_size` controls how many records go into each shard file.

Per sample, three NLL sums are recorded: the full rendered sequence, the
answer tokens conditioned on everything before them, and the answer rendered
alone as a standalone assistant turn. Template scaffold tokens never count
toward the answer sums, so the conditional and standalone sums cover the
same tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import shards
from .models import load_model
from .render import render_answer_alone, render_messages, tokenize_segments

OUTPUTS = ("hidden_states", "pooled_embeddings", "loss_records", "token_counts")


@dataclass
class ExtractionJob:
    model: str
    pool: Path
    output_dir: Path
    template: str = "tulu"
    max_tokens: int = 2048
    outputs: tuple = ("hidden_states", "loss_records")
    batch_size: int = 512  # records per shard file
    device: str = "cpu"
    pooling_kind: str = "weighted"
    pooling_span: str = "full"

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")
        unknown = set(self.outputs) - set(OUTPUTS)
        if unknown or not self.outputs:
            raise ValueError(f"outputs must be a non-empty subset of {OUTPUTS}")


class ExtractFailure(Exception):
    pass


def position_weights(length: int) -> np.ndarray:
    return np.arange(1, length + 1, dtype=np.float64) / (length * (length + 1) // 2)


def pool_hidden(hidden: np.ndarray, prompt_span, answer_span, kind: str, span: str) -> np.ndarray:
    """Extractor-side pooling, kept independent of the selection engine."""
    if span == "full":
        lo, hi = 0, hidden.shape[0]
    elif span == "prompt_only":
        lo, hi = prompt_span
    elif span == "label_only":
        lo, hi = answer_span
    else:
        raise ValueError(f"unknown pooling span {span!r}")
    if hi <= lo:
        raise ExtractFailure(f"empty {span} span")
    window = hidden[lo:hi].astype(np.float64)
    if kind == "weighted":
        pooled = position_weights(hi - lo) @ window
    elif kind == "uniform":
        pooled = window.mean(axis=0)
    elif kind == "eos_only":
        pooled = window[-1]
    else:
        raise ValueError(f"unknown pooling kind {kind!r}")
    return pooled.astype(np.float32)


@dataclass
class SampleFeatures:
    pool_index: int
    token_count: int
    prompt_span: tuple[int, int]
    answer_span: tuple[int, int]
    hidden: np.ndarray | None = None
    pooled: np.ndarray | None = None
    loss: shards.LossOut | None = None


@dataclass
class _ShardSet:
    """Accumulates contiguous records and flushes them as numbered shards."""

    out_dir: Path
    stem: str
    writer: object
    batch: list = field(default_factory=list)
    entries: list = field(default_factory=list)

    def add(self, record) -> None:
        self.batch.append(record)

    def flush(self, batch_size=None) -> None:
        while self.batch and (batch_size is None or len(self.batch) >= batch_size):
            chunk = self.batch[:batch_size] if batch_size else self.batch
            self.batch = self.batch[len(chunk):]
            start = chunk[0].pool_index if hasattr(chunk[0], "pool_index") else chunk[0][0]
            path = self.out_dir / f"{self.stem}_{start:09d}.bin"
            self.writer(path, chunk)
            self.entries.append({"path": path.name, "record_type": self.stem.split("_")[0],
                                 "start": int(start), "count": len(chunk)})


@torch.no_grad()
def _forward(model, token_ids: list[int], bos_id: int, device: str):
    """(logits, hidden) for [BOS] + tokens; both squeezed to (L+1, ...)."""
    input_ids = torch.tensor([[bos_id] + token_ids], dtype=torch.long, device=device)
    logits, hidden = model(input_ids)
    return logits[0], hidden[0]


def _nll_sums(logits: torch.Tensor, token_ids: list[int], spans) -> list[float]:
    """Sum of -log p(token_i | prefix) over each requested [lo, hi) span.

    logits row i (for the input [BOS] + tokens) predicts token i, so span
    indices address logits rows directly. Accumulates in float64.
    """
    targets = torch.tensor(token_ids, dtype=torch.long)
    logprobs = torch.log_softmax(logits[: len(token_ids)].double(), dim=-1)
    per_token = -logprobs[torch.arange(len(token_ids)), targets]
    return [float(per_token[lo:hi].sum()) for lo, hi in spans]


def extract_sample(sample, tokenizer, model, job: ExtractionJob) -> SampleFeatures:
    rendered = tokenize_segments(
        render_messages(sample["messages"], job.template), tokenizer, job.max_tokens
    )
    if not rendered.token_ids:
        raise ExtractFailure("sample renders to zero tokens")
    length = len(rendered.token_ids)
    logits, hidden_all = _forward(model, rendered.token_ids, tokenizer.bos_id, job.device)
    # hidden state of token i sits at input position i + 1 (after BOS)
    hidden = hidden_all[1 : length + 1].float().cpu().numpy().astype(np.float32)

    features = SampleFeatures(
        pool_index=sample["pool_index"],
        token_count=length,
        prompt_span=rendered.prompt_span,
        answer_span=rendered.answer_span,
    )
    if "hidden_states" in job.outputs:
        features.hidden = hidden
    if "pooled_embeddings" in job.outputs:
        features.pooled = pool_hidden(hidden, rendered.prompt_span, rendered.answer_span,
                                      job.pooling_kind, job.pooling_span)
    if "loss_records" in job.outputs or "token_counts" in job.outputs:
        features.loss = _loss_record(sample, rendered, logits, tokenizer, model, job)
    return features


def _loss_record(sample, rendered, logits, tokenizer, model, job) -> shards.LossOut:
    length = len(rendered.token_ids)
    a0, a1 = rendered.answer_span
    (full_nll, cond_nll) = _nll_sums(logits, rendered.token_ids, [(0, length), (a0, a1)])

    roles = [role for role, _ in sample["messages"]]
    eligible = ("user" in roles and "assistant" in roles
                and a1 > a0 and not rendered.answer_truncated)

    uncond_nll = 0.0
    if a1 > a0:
        answer_text = next(c for r, c in sample["messages"] if r == "assistant")
        alone = tokenize_segments(render_answer_alone(answer_text, job.template),
                                  tokenizer, job.max_tokens)
        b0, b1 = alone.answer_span
        # score the same tokens the conditional sum covered
        b1 = min(b1, b0 + (a1 - a0))
        if b1 - b0 != a1 - a0:  # standalone render truncated differently
            eligible = False
        alone_logits, _ = _forward(model, alone.token_ids[:b1], tokenizer.bos_id, job.device)
        (uncond_nll,) = _nll_sums(alone_logits, alone.token_ids[:b1], [(b0, b1)])

    return shards.LossOut(
        pool_index=sample["pool_index"],
        full_token_count=length,
        prompt_token_count=rendered.prompt_span[1] - rendered.prompt_span[0],
        answer_token_count=a1 - a0,
        full_nll_sum=full_nll,
        answer_cond_nll_sum=cond_nll,
        answer_uncond_nll_sum=uncond_nll,
        ifd_eligible=eligible,
    )


def run_extraction(job: ExtractionJob) -> Path:
    """Extract all requested outputs over the pool; returns the manifest path."""
    tokenizer, model, hidden_size = load_model(job.model, job.max_tokens, job.device)
    samples = shards.load_pool_jsonl(job.pool)
    out_dir = Path(job.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    sets: dict[str, _ShardSet] = {}
    if "hidden_states" in job.outputs:
        sets["hidden"] = _ShardSet(out_dir, "hidden", shards.write_hidden)
    if "loss_records" in job.outputs:
        sets["loss"] = _ShardSet(out_dir, "loss", shards.write_losses)
    if "pooled_embeddings" in job.outputs:
        sets["embedding"] = _ShardSet(
            out_dir, "embedding",
            lambda path, chunk: shards.write_embeddings(
                path, chunk[0].pool_index, np.stack([c.pooled for c in chunk])))

    token_counts = []
    failures = []
    for sample in samples:
        try:
            features = extract_sample(sample, tokenizer, model, job)
        except ExtractFailure as e:
            failures.append({"pool_index": sample["pool_index"], "reason": str(e)})
            for shard_set in sets.values():  # keep shards contiguous around the hole
                shard_set.flush()
            continue
        if "hidden" in sets:
            sets["hidden"].add(shards.HiddenOut(features.pool_index, features.prompt_span,
                                                features.answer_span, features.hidden))
        if "loss" in sets:
            sets["loss"].add(features.loss)
        if "embedding" in sets:
            sets["embedding"].add(features)
        if "token_counts" in job.outputs:
            token_counts.append((features.pool_index, features.loss.full_token_count,
                                 features.loss.prompt_token_count,
                                 features.loss.answer_token_count))
        for shard_set in sets.values():
            shard_set.flush(batch_size=job.batch_size)
    for shard_set in sets.values():
        shard_set.flush()

    if "token_counts" in job.outputs:
        with open(out_dir / "token_counts.tsv", "w", encoding="utf-8") as f:
            f.write("pool_index\tfull\tprompt\tanswer\n")
            for row in token_counts:
                f.write("\t".join(str(v) for v in row) + "\n")

    entries = [e for s in sets.values() for e in s.entries]
    manifest_path = out_dir / "manifest.json"
    shards.write_manifest(
        manifest_path,
        pool_fingerprint=shards.file_fingerprint(job.pool),
        model=job.model,
        max_tokens=job.max_tokens,
        dim=hidden_size,
        shard_entries=entries,
        extras={
            "template": job.template,
            "pooling": f"{job.pooling_kind}/{job.pooling_span}",
            "device": job.device,
            "failures": failures,
            "outputs": list(job.outputs),
        },
    )
    return manifest_path
