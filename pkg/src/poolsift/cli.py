"""Command-line pipeline: dedup, validate, pool-embeddings, topk, score,
select, flops, report.

Every flag mirrors a key in an optional YAML config (`--config`); explicit
flags win over config values. All randomness flows from the single recorded
seed, outputs are written atomically, and identical configs produce byte-
identical manifests and reports. Exit codes: 0 success, 1 usage error,
2 data/validation error.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from . import corpus, flops, pooling, report, scorers, selection, similarity, store
from .errors import PoolsiftError, UsageError

SELECT_METHODS = ("random", "balanced_random", "length", "top_ppl", "mid_ppl",
                  "ifd", "rds", "embedding")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_task_paths(pairs, flag: str) -> list[tuple[str, Path]]:
    out = []
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"{flag} expects task=path, got {pair!r}")
        task, path = pair.split("=", 1)
        out.append((task, Path(path)))
    if len({t for t, _ in out}) != len(out):
        raise UsageError(f"duplicate task ids in {flag}")
    return out


def _load_config(path) -> dict:
    if path is None:
        return {}
    obj = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise UsageError(f"config {path} must be a mapping")
    return obj


def _resolve(ns, config: dict, key: str, default=None, required: bool = False):
    """Flag value if given, else config value, else default."""
    value = getattr(ns, key, None)
    if value is None:
        value = config.get(key, default)
    if value is None and required:
        raise UsageError(f"missing required option --{key.replace('_', '-')}")
    return value


def _print(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_dedup(ns) -> int:
    config = _load_config(ns.config)
    pool_path = Path(_resolve(ns, config, "pool", required=True))
    out_pool = Path(_resolve(ns, config, "output_pool", required=True))
    report_path = _resolve(ns, config, "report")

    pool = corpus.load_pool(pool_path)
    deduped, dedup_report = corpus.dedup_pool(pool)
    corpus.write_pool(deduped, out_pool)
    if report_path:
        with store.atomic_write(report_path) as tmp:
            with open(tmp, "w", encoding="utf-8") as f:
                f.write("source\tkept\tremoved\n")
                sources = sorted(set(dedup_report.kept_per_source) | set(dedup_report.removed_per_source))
                for source in sources:
                    kept = dedup_report.kept_per_source.get(source, 0)
                    removed = dedup_report.removed_per_source.get(source, 0)
                    f.write(f"{source}\t{kept}\t{removed}\n")
    _print(f"dedup: kept {dedup_report.kept} of {dedup_report.original_size} samples "
           f"({dedup_report.removed} removed) -> {out_pool}")
    return 0


def cmd_validate(ns) -> int:
    config = _load_config(ns.config)
    manifest_path = Path(_resolve(ns, config, "feature_manifest", required=True))
    pool_path = Path(_resolve(ns, config, "pool", required=True))

    manifest = store.FeatureManifest.load(manifest_path)
    pool = corpus.load_pool(pool_path)
    fingerprint = corpus.file_fingerprint(pool_path)
    result = store.validate_store(manifest, len(pool), base_dir=manifest_path.parent,
                                  pool_fingerprint=fingerprint)
    for line in result.lines():
        _print(line)
    return 0 if result.ok else 2


def cmd_pool_embeddings(ns) -> int:
    config = _load_config(ns.config)
    manifest_path = Path(_resolve(ns, config, "hidden_manifest", required=True))
    out_dir = Path(_resolve(ns, config, "output_dir", required=True))
    kind = _resolve(ns, config, "pooling_kind", default="weighted")
    span = _resolve(ns, config, "pooling_span", default="full")
    strategy = pooling.PoolingStrategy(kind=kind, span=span)

    manifest = store.FeatureManifest.load(manifest_path)
    hidden_paths = manifest.shard_paths("hidden", base_dir=manifest_path.parent)
    if not hidden_paths:
        raise PoolsiftError(f"{manifest_path}: no hidden-state shards listed")
    pool_size = sum(e["count"] for e in manifest.shards if e["record_type"] == "hidden")
    result = store.validate_store(
        store.FeatureManifest(manifest.pool_fingerprint, manifest.extractor_model,
                              manifest.max_tokens, manifest.dim,
                              [e for e in manifest.shards if e["record_type"] == "hidden"]),
        pool_size, base_dir=manifest_path.parent)
    if not result.ok:
        for line in result.lines():
            _print(line)
        raise PoolsiftError("hidden-state store failed validation; aborting before write")

    out_dir.mkdir(parents=True, exist_ok=True)
    shard_entries = []
    for path in sorted(hidden_paths, key=lambda p: store_start(p)):
        records = store.read_hidden_shard(path)
        vectors = pooling.pool_records(records, strategy)
        start = records[0].pool_index
        out_path = out_dir / f"embeddings_{start:09d}.bin"
        store.write_embedding_shard(out_path, start, vectors)
        shard_entries.append({"path": out_path.name, "record_type": "embedding",
                              "start": start, "count": len(records)})
    out_manifest = store.FeatureManifest(
        pool_fingerprint=manifest.pool_fingerprint,
        extractor_model=manifest.extractor_model,
        max_tokens=manifest.max_tokens,
        dim=manifest.dim,
        shards=shard_entries,
        extras={"pooling": strategy.name},
    )
    out_manifest.save(out_dir / "embeddings_manifest.json")
    _print(f"pooled {sum(e['count'] for e in shard_entries)} samples "
           f"({strategy.name}) -> {out_dir}")
    return 0


def store_start(path) -> int:
    with open(path, "rb") as f:
        return store.read_header(f, path).start_index


def cmd_topk(ns) -> int:
    config = _load_config(ns.config)
    query_paths = _parse_task_paths(_resolve(ns, config, "queries", required=True), "--queries")
    manifest_path = Path(_resolve(ns, config, "pool_manifest", required=True))
    out_dir = Path(_resolve(ns, config, "output_dir", required=True))
    k = _resolve(ns, config, "k")
    n = _resolve(ns, config, "n")
    workers = int(_resolve(ns, config, "workers", default=1))
    debug_jsonl = bool(_resolve(ns, config, "debug_jsonl", default=False))

    manifest = store.FeatureManifest.load(manifest_path)
    pool_store = store.EmbeddingStore.open(
        manifest.shard_paths("embedding", base_dir=manifest_path.parent))
    out_dir.mkdir(parents=True, exist_ok=True)
    for task, qpath in query_paths:
        _start, queries = store.read_embedding_shard(qpath)
        if k is not None:
            task_k = int(k)
        elif n is not None:
            # headroom so downstream round robin does not run dry
            task_k = min(pool_store.count, 2 * math.ceil(int(n) / len(queries)))
        else:
            raise UsageError("provide --k, or --n to derive a default k")
        ids = [f"{task}:{i}" for i in range(len(queries))]
        lists = similarity.cosine_topk(queries, pool_store, task_k, query_ids=ids,
                                       workers=workers)
        out_path = out_dir / f"topk_{task}.bin"
        similarity.write_topk(out_path, lists)
        if debug_jsonl:
            similarity.topk_to_jsonl(lists, out_dir / f"topk_{task}.jsonl")
        _print(f"topk[{task}]: {len(lists)} queries x k={task_k} -> {out_path}")
    return 0


def cmd_score(ns) -> int:
    config = _load_config(ns.config)
    loss_paths = _resolve(ns, config, "losses", required=True)
    method = _resolve(ns, config, "method", required=True)
    output = Path(_resolve(ns, config, "output", required=True))
    tsv = _resolve(ns, config, "tsv")
    ppl_span = _resolve(ns, config, "ppl_span", default="full")

    records = store.load_loss_records([Path(p) for p in loss_paths])
    if method == "perplexity":
        table = scorers.perplexity_scores(records, span=ppl_span)
    elif method == "ifd":
        table, excluded = scorers.ifd_scores(records)
        for pool_index, reason in excluded:
            _print(f"excluded pool_index {pool_index}: {reason}")
    elif method == "length":
        table = scorers.length_scores(records)
    else:
        raise UsageError(f"unknown scoring method {method!r}")
    store.write_score_shard(output, table.indices, table.scores)
    if tsv:
        scorers.write_score_tsv(table, tsv)
    _print(f"score[{method}]: {len(table)} samples -> {output}")
    return 0


def _selection_parameters(config_values: dict) -> dict:
    return {k: v for k, v in sorted(config_values.items()) if v is not None}


def cmd_select(ns) -> int:
    config = _load_config(ns.config)
    method = _resolve(ns, config, "method", required=True)
    if method not in SELECT_METHODS:
        raise UsageError(f"unknown selection method {method!r} (choose from {SELECT_METHODS})")
    pool_path = Path(_resolve(ns, config, "pool", required=True))
    n = int(_resolve(ns, config, "n", required=True))
    output = Path(_resolve(ns, config, "output", required=True))
    seed = _resolve(ns, config, "seed", default=0)
    materialize = _resolve(ns, config, "materialize")
    feature_manifest_ref = _resolve(ns, config, "feature_manifest")

    pool = corpus.load_pool(pool_path)
    fingerprint = corpus.file_fingerprint(pool_path)
    parameters = {
        "method": method,
        "n": n,
        "pool": str(pool_path),
        "pool_size": len(pool),
        "pool_fingerprint": fingerprint,
    }
    extras: dict = {}

    if method in ("random", "balanced_random"):
        seed = int(seed)
        parameters["seed"] = seed
        parameters["rng"] = "numpy-pcg64"
        if method == "random":
            indices = scorers.random_select(len(pool), n, seed)
        else:
            indices, counts = scorers.balanced_random_select(pool, n, seed)
            extras["allocation"] = counts
    elif method in ("length", "top_ppl", "mid_ppl", "ifd"):
        loss_paths = _resolve(ns, config, "losses", required=True)
        records = store.load_loss_records([Path(p) for p in loss_paths])
        if method == "length":
            indices = scorers.select_length(scorers.length_scores(records), n)
        elif method == "top_ppl":
            ppl_span = _resolve(ns, config, "ppl_span", default="full")
            parameters["ppl_span"] = ppl_span
            indices = scorers.select_top_ppl(scorers.perplexity_scores(records, span=ppl_span), n)
        elif method == "mid_ppl":
            ppl_span = _resolve(ns, config, "ppl_span", default="full")
            parameters["ppl_span"] = ppl_span
            indices = scorers.select_mid_ppl(scorers.perplexity_scores(records, span=ppl_span), n)
        else:
            ifd_filter = _resolve(ns, config, "ifd_filter", default=True)
            parameters["ifd_filter"] = bool(ifd_filter)
            table, excluded = scorers.ifd_scores(records)
            extras["ifd_excluded"] = len(excluded)
            indices = scorers.select_ifd(table, n, filter_ge_one=bool(ifd_filter))
    else:  # rds / embedding: query-driven
        topk_paths = _parse_task_paths(_resolve(ns, config, "topk", required=True), "--topk")
        aggregation = _resolve(ns, config, "aggregation", default="round_robin")
        if aggregation not in ("round_robin", "mean_max"):
            raise UsageError(f"unknown aggregation {aggregation!r}")
        per_task = [(task, similarity.read_topk(path)) for task, path in topk_paths]
        parameters["tasks"] = [task for task, _ in topk_paths]
        parameters["k"] = per_task[0][1][0].k if per_task[0][1] else None
        if len(per_task) == 1:
            parameters["aggregation"] = "round_robin"
            result = selection.round_robin_single(per_task[0][1], n, len(pool))
            indices = result.indices
            extras["per_query_counts"] = result.contributions
        else:
            parameters["aggregation"] = aggregation
            tables = selection.aggregate_task_scores(per_task)
            if aggregation == "round_robin":
                result = selection.round_robin_multitask(tables, n, len(pool))
                indices = result.indices
                extras["per_task_counts"] = result.contributions
            else:
                indices, _scores = selection.mean_max_select(tables, n)

    manifest = selection.build_manifest(
        pool, method, _selection_parameters(parameters), indices,
        feature_manifest=str(feature_manifest_ref) if feature_manifest_ref else None,
        extras=extras,
    )
    manifest.save(output)
    if materialize:
        _materialize(pool, manifest, materialize)
    _print(f"select[{method}]: {len(manifest.selected_indices)} samples -> {output}")
    return 0


def _materialize(pool, manifest, path) -> None:
    import json

    with store.atomic_write(path) as tmp:
        with open(tmp, "w", encoding="utf-8") as f:
            for i in manifest.selected_indices:
                s = pool.samples[i]
                obj = {"source": s.source,
                       "messages": [{"role": r, "content": c} for r, c in s.messages]}
                f.write(json.dumps(obj, ensure_ascii=False) + "\n")


def cmd_flops(ns) -> int:
    config = _load_config(ns.config)
    model_params = float(_resolve(ns, config, "model_params", required=True))
    selector_params = _resolve(ns, config, "selector_params")
    pool_size = int(_resolve(ns, config, "pool_size", required=True))
    selected_size = int(_resolve(ns, config, "selected_size", required=True))
    tokens = int(_resolve(ns, config, "tokens_per_sample", default=2048))
    epochs = int(_resolve(ns, config, "epochs", default=2))
    methods = _resolve(ns, config, "methods", default="all")
    output = _resolve(ns, config, "output")

    if methods == "all":
        method_list = list(flops.METHODS)
    else:
        method_list = [m.strip() for m in methods.split(",") if m.strip()]
    params = flops.CostModelParams(
        model_params=model_params,
        selector_params=float(selector_params) if selector_params is not None else None,
        pool_size=pool_size,
        selected_size=selected_size,
        tokens_per_sample=tokens,
        epochs=epochs,
    )
    rows = [(m, params, flops.estimate(m, params)) for m in method_list]
    if output:
        flops.write_flops_tsv(rows, output)
    for m, _p, value in rows:
        _print(f"{m}\t{value}")
    return 0


def cmd_report(ns) -> int:
    config = _load_config(ns.config)
    manifest_paths = _parse_task_paths(_resolve(ns, config, "manifests", required=True),
                                       "--manifests")
    out_dir = Path(_resolve(ns, config, "output_dir", required=True))
    model_params = float(_resolve(ns, config, "model_params", default=7e9))
    selector_params = _resolve(ns, config, "selector_params")

    manifests = {name: selection.SelectionManifest.load(path) for name, path in manifest_paths}
    rows = report.composition_rows(
        manifests, model_params,
        selector_params=float(selector_params) if selector_params is not None else None)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write_composition_tsv(rows, out_dir / "composition.tsv")
    report.render_composition_figure(manifests, out_dir / "composition.png")
    report.render_flops_figure(rows, out_dir / "flops.png")
    _print(f"report: {len(manifests)} manifests -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> _Parser:
    parser = _Parser(prog="poolsift",
                     description="Deterministic subset selection for instruction-tuning pools")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML config; flags override its keys")
        p.set_defaults(func=func)
        return p

    p = add("dedup", cmd_dedup, "exact-match deduplication of a pool")
    p.add_argument("--pool")
    p.add_argument("--output-pool", dest="output_pool")
    p.add_argument("--report")

    p = add("validate", cmd_validate, "validate a feature store against a pool")
    p.add_argument("--feature-manifest", dest="feature_manifest")
    p.add_argument("--pool")

    p = add("pool-embeddings", cmd_pool_embeddings, "pool hidden states into embeddings")
    p.add_argument("--hidden-manifest", dest="hidden_manifest")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--pooling-kind", dest="pooling_kind", choices=pooling.KINDS)
    p.add_argument("--pooling-span", dest="pooling_span", choices=pooling.SPANS)

    p = add("topk", cmd_topk, "cosine top-k lists per task")
    p.add_argument("--queries", nargs="+", metavar="TASK=SHARD")
    p.add_argument("--pool-manifest", dest="pool_manifest")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--k", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--debug-jsonl", dest="debug_jsonl", action="store_const", const=True)

    p = add("score", cmd_score, "scalar score tables from loss records")
    p.add_argument("--losses", nargs="+")
    p.add_argument("--method", choices=("perplexity", "ifd", "length"))
    p.add_argument("--output")
    p.add_argument("--tsv")
    p.add_argument("--ppl-span", dest="ppl_span", choices=("full", "answer"))

    p = add("select", cmd_select, "select a subset and write its manifest")
    p.add_argument("--method", choices=SELECT_METHODS)
    p.add_argument("--pool")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--output")
    p.add_argument("--losses", nargs="+")
    p.add_argument("--topk", nargs="+", metavar="TASK=FILE")
    p.add_argument("--aggregation", choices=("round_robin", "mean_max"))
    p.add_argument("--ifd-filter", dest="ifd_filter", action="store_const", const=True)
    p.add_argument("--no-ifd-filter", dest="ifd_filter", action="store_const", const=False)
    p.add_argument("--ppl-span", dest="ppl_span", choices=("full", "answer"))
    p.add_argument("--materialize")
    p.add_argument("--feature-manifest", dest="feature_manifest")

    p = add("flops", cmd_flops, "compute-cost estimates per method")
    p.add_argument("--model-params", dest="model_params", type=float)
    p.add_argument("--selector-params", dest="selector_params", type=float)
    p.add_argument("--pool-size", dest="pool_size", type=int)
    p.add_argument("--selected-size", dest="selected_size", type=int)
    p.add_argument("--tokens-per-sample", dest="tokens_per_sample", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--methods")
    p.add_argument("--output")

    p = add("report", cmd_report, "composition tables and figures from manifests")
    p.add_argument("--manifests", nargs="+", metavar="NAME=MANIFEST")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--model-params", dest="model_params", type=float)
    p.add_argument("--selector-params", dest="selector_params", type=float)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        return ns.func(ns)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except PoolsiftError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
