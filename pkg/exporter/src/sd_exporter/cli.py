"""Command-line entry point mirroring the export configuration."""

from __future__ import annotations

import argparse
import json
import sys

from sd_exporter.export import ExportConfig, export_attention


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sd-export",
        description="Capture one-step-denoise attention maps and write them as ATNZ",
    )
    parser.add_argument("--model", default="tiny-latent-v1", help="model identifier (seeds the weights)")
    parser.add_argument("--prompt", required=True)
    parser.add_argument(
        "--subjects",
        required=True,
        help="comma-separated token indices (tokenization starts at [sot]=0)",
    )
    parser.add_argument("--timestep", type=int, default=0, help="sampling-step index, 0 = first")
    parser.add_argument("--guidance", type=float, default=7.5)
    parser.add_argument("--steps", type=int, default=50)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", required=True, help="output ATNZ path")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = ExportConfig(
            model_id=args.model,
            prompt=args.prompt,
            subject_token_indices=tuple(int(s) for s in args.subjects.split(",")),
            timestep_index=args.timestep,
            guidance_scale=args.guidance,
            steps=args.steps,
            seed=args.seed,
            output_path=args.out,
        )
        manifest = export_attention(cfg)
    except Exception as exc:
        print(f"sd-export: error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
