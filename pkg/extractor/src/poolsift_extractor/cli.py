"""Command-line entry point mirroring the ExtractionJob fields."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .extract import OUTPUTS, ExtractionJob, run_extraction
from .render import TEMPLATES


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poolsift-extract",
        description="Extract hidden states, losses, and embeddings from a pool",
    )
    parser.add_argument("--model", required=True,
                        help="toy:uniform[:seed], toy:tiny-gpt2[:seed], or hf:<name>")
    parser.add_argument("--pool", required=True, type=Path)
    parser.add_argument("--output-dir", required=True, type=Path)
    parser.add_argument("--template", default="tulu", choices=TEMPLATES)
    parser.add_argument("--max-tokens", type=int, default=2048)
    parser.add_argument("--outputs", default="hidden_states,loss_records",
                        help=f"comma-separated subset of {','.join(OUTPUTS)}")
    parser.add_argument("--batch-size", type=int, default=512,
                        help="records per shard file")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--pooling-kind", default="weighted",
                        choices=("weighted", "uniform", "eos_only"))
    parser.add_argument("--pooling-span", default="full",
                        choices=("full", "prompt_only", "label_only"))
    return parser


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        job = ExtractionJob(
            model=ns.model,
            pool=ns.pool,
            output_dir=ns.output_dir,
            template=ns.template,
            max_tokens=ns.max_tokens,
            outputs=tuple(o.strip() for o in ns.outputs.split(",") if o.strip()),
            batch_size=ns.batch_size,
            device=ns.device,
            pooling_kind=ns.pooling_kind,
            pooling_span=ns.pooling_span,
        )
        manifest = run_extraction(job)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"extraction complete -> {manifest}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
