"""Model and tokenizer registry.

Offline-friendly identifiers:

    toy:uniform[:seed]    constant logits (uniform next-token distribution)
                          over the byte tokenizer vocabulary
    toy:tiny-gpt2[:seed]  randomly initialized 2-layer GPT-2 architecture
                          with the byte tokenizer
    hf:<model-name>       any Hugging Face causal LM + its tokenizer
                          (needs the model available locally or a network)

Toy models use a byte-level tokenizer (BOS=0, EOS=1, byte b -> 2+b), so
rendering needs no vocabulary files.
"""

from __future__ import annotations

import torch


class ByteTokenizer:
    bos_id = 0
    eos_id = 1
    vocab_size = 258

    def encode(self, text: str) -> list[int]:
        return [2 + b for b in text.encode("utf-8")]

    def decode(self, ids) -> str:
        return bytes(i - 2 for i in ids if i >= 2).decode("utf-8", errors="replace")


class UniformLM(torch.nn.Module):
    """Constant logits: every next token has probability 1/vocab.

    Hidden states are a fixed random embedding of the input ids so the
    hidden-state path stays exercised and deterministic.
    """

    def __init__(self, vocab_size: int, hidden_size: int = 16, seed: int = 0):
        super().__init__()
        self.vocab_size = vocab_size
        self.hidden_size = hidden_size
        gen = torch.Generator().manual_seed(seed)
        self.embed = torch.nn.Parameter(
            torch.randn(vocab_size, hidden_size, generator=gen), requires_grad=False
        )

    def forward(self, input_ids: torch.Tensor):
        hidden = self.embed[input_ids]
        logits = torch.zeros(*input_ids.shape, self.vocab_size)
        return logits, hidden


class HFCausalLM(torch.nn.Module):
    """Uniform (logits, last hidden) interface over a transformers model."""

    def __init__(self, model):
        super().__init__()
        self.model = model.eval()

    def forward(self, input_ids: torch.Tensor):
        out = self.model(input_ids, output_hidden_states=True)
        return out.logits, out.hidden_states[-1]


class HFTokenizerAdapter:
    def __init__(self, tokenizer):
        self.tokenizer = tokenizer
        self.bos_id = tokenizer.bos_token_id
        self.eos_id = tokenizer.eos_token_id
        if self.eos_id is None:
            raise ValueError("tokenizer has no EOS token")
        if self.bos_id is None:
            self.bos_id = self.eos_id
        self.vocab_size = len(tokenizer)

    def encode(self, text: str) -> list[int]:
        return self.tokenizer.encode(text, add_special_tokens=False)


def _tiny_gpt2(seed: int, vocab_size: int, max_positions: int):
    from transformers import GPT2Config, GPT2LMHeadModel

    torch.manual_seed(seed)
    config = GPT2Config(
        vocab_size=vocab_size,
        n_positions=max_positions,
        n_embd=32,
        n_layer=2,
        n_head=2,
        bos_token_id=ByteTokenizer.bos_id,
        eos_token_id=ByteTokenizer.eos_id,
    )
    return GPT2LMHeadModel(config)


def load_model(identifier: str, max_tokens: int = 2048, device: str = "cpu"):
    """Resolve a model identifier to (tokenizer, model, hidden_size)."""
    if identifier.startswith("toy:"):
        parts = identifier.split(":")
        kind = parts[1]
        seed = int(parts[2]) if len(parts) > 2 else 0
        tokenizer = ByteTokenizer()
        if kind == "uniform":
            model = UniformLM(tokenizer.vocab_size, seed=seed)
            hidden_size = model.hidden_size
        elif kind == "tiny-gpt2":
            # max_tokens plus the BOS position must fit the context window
            model = HFCausalLM(_tiny_gpt2(seed, tokenizer.vocab_size, max_tokens + 1))
            hidden_size = model.model.config.n_embd
        else:
            raise ValueError(f"unknown toy model {identifier!r}")
    elif identifier.startswith("hf:"):
        from transformers import AutoModelForCausalLM, AutoTokenizer

        name = identifier[3:]
        tokenizer = HFTokenizerAdapter(AutoTokenizer.from_pretrained(name))
        model = HFCausalLM(AutoModelForCausalLM.from_pretrained(name))
        hidden_size = model.model.config.hidden_size
    else:
        raise ValueError(
            f"unknown model identifier {identifier!r} (use toy:... or hf:...)"
        )
    return tokenizer, model.to(device).eval(), hidden_size
