"""Chat-template rendering with token-span tracking.

A rendered sample is a list of segments, each tokenized separately so span
boundaries stay exact. The prompt span covers the first user turn (scaffold
included); the answer span covers only the content tokens of the first
assistant turn, excluding its scaffold and the EOS marker, which is what the
loss and label-only pooling paths need.
"""

from __future__ import annotations

from dataclasses import dataclass

TEMPLATES = ("tulu", "plain")


@dataclass
class Segment:
    text: str | None  # None marks a single EOS token
    tag: str | None = None  # "prompt" / "answer" / None


def render_messages(messages, template: str = "tulu") -> list[Segment]:
    """Render (role, content) turns into tagged segments."""
    if template not in TEMPLATES:
        raise ValueError(f"unknown chat template {template!r} (choose from {TEMPLATES})")
    segments: list[Segment] = []
    saw_user = False
    saw_answer = False
    for role, content in messages:
        if template == "tulu":
            if role == "assistant":
                segments.append(Segment("<|assistant|>\n"))
                segments.append(Segment(content, tag=None if saw_answer else "answer"))
                segments.append(Segment(None))  # EOS after every assistant turn
                segments.append(Segment("\n"))
                saw_answer = True
            else:
                tag = "prompt" if role == "user" and not saw_user else None
                segments.append(Segment(f"<|{role}|>\n{content}\n", tag=tag))
                saw_user = saw_user or role == "user"
        else:  # plain: bare role-prefixed lines
            if role == "assistant":
                segments.append(Segment(f"{role}: "))
                segments.append(Segment(content, tag=None if saw_answer else "answer"))
                segments.append(Segment(None))
                segments.append(Segment("\n"))
                saw_answer = True
            else:
                tag = "prompt" if role == "user" and not saw_user else None
                segments.append(Segment(f"{role}: {content}\n", tag=tag))
                saw_user = saw_user or role == "user"
    return segments


def render_answer_alone(answer: str, template: str = "tulu") -> list[Segment]:
    """The first response rendered as a standalone assistant turn."""
    if template == "tulu":
        scaffold = "<|assistant|>\n"
    else:
        scaffold = "assistant: "
    return [Segment(scaffold), Segment(answer, tag="answer"), Segment(None)]


@dataclass
class Rendered:
    token_ids: list[int]
    prompt_span: tuple[int, int]
    answer_span: tuple[int, int]
    answer_truncated: bool


def tokenize_segments(segments, tokenizer, max_tokens: int) -> Rendered:
    """Tokenize per segment, accumulate spans, truncate to max_tokens.

    Tagged spans are clipped to the surviving tokens; a clipped answer is
    flagged so loss records can mark the sample IFD-ineligible.
    """
    token_ids: list[int] = []
    spans = {"prompt": [0, 0], "answer": [0, 0]}
    full_answer_end = 0
    for seg in segments:
        start = len(token_ids)
        if seg.text is None:
            token_ids.append(tokenizer.eos_id)
        else:
            token_ids.extend(tokenizer.encode(seg.text))
        if seg.tag is not None and spans[seg.tag] == [0, 0]:
            spans[seg.tag] = [start, len(token_ids)]
            if seg.tag == "answer":
                full_answer_end = len(token_ids)
    if len(token_ids) > max_tokens:
        token_ids = token_ids[:max_tokens]
    length = len(token_ids)
    clipped = {tag: (min(lo, length), min(hi, length)) for tag, (lo, hi) in spans.items()}
    return Rendered(
        token_ids=token_ids,
        prompt_span=clipped["prompt"],
        answer_span=clipped["answer"],
        answer_truncated=full_answer_end > 0 and clipped["answer"][1] < full_answer_end,
    )
