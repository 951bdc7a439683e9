"""Selection reports: per-source composition tables and figures.

For each manifest the report emits one TSV row per source (count, fraction)
plus the method's estimated FLOPs, and renders a bar chart of the selected
composition next to the delimited output.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import PoolsiftError
from .flops import CostModelParams, estimate
from .store import atomic_write

# manifest method -> cost-model method; methods whose scoring needs no
# model pass over the pool are costed as plain training runs
COST_METHOD = {
    "random": "random",
    "balanced_random": "random",
    "length": "random",
    "top_ppl": "perplexity",
    "mid_ppl": "perplexity",
    "ifd": "ifd",
    "embedding": "embedding",
    "rds": "rds",
}


def manifest_flops(manifest, model_params: int, selector_params=None,
                   tokens_per_sample: int = 2048, epochs: int = 2) -> int:
    method = COST_METHOD.get(manifest.method)
    if method is None:
        raise PoolsiftError(f"no cost model for method {manifest.method!r}")
    params = CostModelParams(
        model_params=model_params,
        selector_params=selector_params,
        selected_size=len(manifest.selected_indices),
        pool_size=manifest.parameters.get("pool_size", 0),
        tokens_per_sample=tokens_per_sample,
        epochs=epochs,
    )
    return estimate(method, params)


def composition_rows(manifests: dict[str, "SelectionManifest"], model_params: int,
                     selector_params=None) -> list[tuple]:
    """(manifest, source, count, fraction, flops) rows, sources sorted."""
    rows = []
    for name in sorted(manifests):
        manifest = manifests[name]
        total = len(manifest.selected_indices)
        if total == 0:
            raise PoolsiftError(f"manifest {name} selected nothing")
        flops = manifest_flops(manifest, model_params, selector_params)
        for source in sorted(manifest.per_source_counts):
            count = manifest.per_source_counts[source]
            rows.append((name, source, count, count / total, flops))
    return rows


def write_composition_tsv(rows, path) -> None:
    with atomic_write(path) as tmp:
        with open(tmp, "w", encoding="utf-8") as f:
            f.write("manifest\tsource\tcount\tfraction\tflops\n")
            for name, source, count, fraction, flops in rows:
                f.write(f"{name}\t{source}\t{count}\t{fraction:.6f}\t{flops}\n")


def render_composition_figure(manifests: dict[str, "SelectionManifest"], path) -> None:
    """Grouped horizontal bars of selected fraction per source, per manifest."""
    sources = sorted({s for m in manifests.values() for s in m.per_source_counts})
    names = sorted(manifests)
    if not sources:
        raise PoolsiftError("nothing to plot")
    fig, ax = plt.subplots(figsize=(8, max(2.5, 0.45 * len(sources) + 1)))
    bar_height = 0.8 / len(names)
    for mi, name in enumerate(names):
        manifest = manifests[name]
        total = len(manifest.selected_indices)
        fractions = [manifest.per_source_counts.get(s, 0) / total for s in sources]
        offsets = [i + mi * bar_height for i in range(len(sources))]
        ax.barh(offsets, fractions, height=bar_height, label=name)
    ax.set_yticks([i + 0.4 - bar_height / 2 for i in range(len(sources))])
    ax.set_yticklabels(sources)
    ax.invert_yaxis()
    ax.set_xlabel("fraction of selected samples")
    ax.legend(fontsize=8)
    fig.tight_layout()
    with atomic_write(path) as tmp:
        fig.savefig(tmp, format="png", dpi=120)
    plt.close(fig)


def render_flops_figure(rows, path) -> None:
    """Bar chart of estimated FLOPs per manifest (log scale)."""
    per_manifest = {}
    for name, _source, _count, _fraction, flops in rows:
        per_manifest[name] = flops
    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = sorted(per_manifest)
    # exact integers exceed int64 for some methods; floats are fine for a plot
    ax.bar(range(len(names)), [float(per_manifest[n]) for n in names])
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_yscale("log")
    ax.set_ylabel("estimated FLOPs (selection + training)")
    fig.tight_layout()
    with atomic_write(path) as tmp:
        fig.savefig(tmp, format="png", dpi=120)
    plt.close(fig)
