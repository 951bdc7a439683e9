"""Selection + training compute estimates, in FLOPs.

Training is costed at 6N FLOPs per token and inference at 2N per token,
with a flat tokens-per-sample budget. Pool-scan terms use the selector
model's parameter count when it differs from the trained model's. All
arithmetic is exact (Python integers).
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import PoolsiftError
from .store import atomic_write

METHODS = ("random", "perplexity", "ifd", "less", "embedding", "rds")


@dataclass(frozen=True)
class CostModelParams:
    model_params: int  # N, trained-model parameter count
    selected_size: int  # D, samples trained on
    pool_size: int = 0  # P, samples scanned during selection
    selector_params: int | None = None  # defaults to model_params
    tokens_per_sample: int = 2048
    epochs: int = 2
    ifd_warmup_pool: int = 200_000
    ifd_warmup_train: int = 1_000
    less_checkpoints: int = 3

    def __post_init__(self):
        for name in ("model_params", "selected_size", "tokens_per_sample", "epochs",
                     "ifd_warmup_pool", "ifd_warmup_train", "less_checkpoints"):
            value = getattr(self, name)
            if _as_int(value, name) <= 0:
                raise PoolsiftError(f"{name} must be strictly positive, got {value}")
        if _as_int(self.pool_size, "pool_size") < 0:
            raise PoolsiftError(f"pool_size must be >= 0, got {self.pool_size}")
        if self.pool_size and self.selected_size > self.pool_size:
            raise PoolsiftError(
                f"selected_size {self.selected_size} exceeds pool_size {self.pool_size}"
            )
        if self.selector_params is not None and _as_int(self.selector_params, "selector_params") <= 0:
            raise PoolsiftError(f"selector_params must be strictly positive")


def _as_int(value, name: str) -> int:
    out = int(value)
    if out != value:
        raise PoolsiftError(f"{name} must be integer-valued, got {value}")
    return out


def estimate(method: str, params: CostModelParams) -> int:
    """Total FLOPs to select with `method` and train on the result."""
    n = _as_int(params.model_params, "model_params")
    n_sel = n if params.selector_params is None else _as_int(params.selector_params, "selector_params")
    pool = _as_int(params.pool_size, "pool_size")
    selected = _as_int(params.selected_size, "selected_size")
    tokens = _as_int(params.tokens_per_sample, "tokens_per_sample")
    epochs = _as_int(params.epochs, "epochs")

    train = epochs * tokens * 6 * n * selected
    pool_inference = 2 * tokens * 2 * n_sel * pool

    if method == "random":
        return train
    if method in ("perplexity", "embedding", "rds"):
        return pool_inference + train
    if method == "ifd":
        warmup_scan = params.ifd_warmup_pool * (tokens + 1) * 2 * n_sel
        warmup_train = params.ifd_warmup_train * tokens * 6 * n_sel * selected
        return warmup_scan + warmup_train + pool_inference + train
    if method == "less":
        gradient_passes = params.less_checkpoints * tokens * 6 * n_sel * pool
        return gradient_passes + train
    raise PoolsiftError(f"unknown cost method {method!r} (choose from {METHODS})")


def estimate_all(params: CostModelParams) -> dict[str, int]:
    return {method: estimate(method, params) for method in METHODS}


def write_flops_tsv(rows, path) -> None:
    """TSV of (method, N, N_sel, P, D, tokens, epochs, flops) rows."""
    with atomic_write(path) as tmp:
        with open(tmp, "w", encoding="utf-8") as f:
            f.write("method\tmodel_params\tselector_params\tpool_size\tselected_size\t"
                    "tokens_per_sample\tepochs\tflops\n")
            for method, params, flops in rows:
                n_sel = params.selector_params if params.selector_params is not None else params.model_params
                f.write(
                    f"{method}\t{int(params.model_params)}\t{int(n_sel)}\t"
                    f"{int(params.pool_size)}\t{int(params.selected_size)}\t"
                    f"{int(params.tokens_per_sample)}\t{int(params.epochs)}\t{flops}\n"
                )
