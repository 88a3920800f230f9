"""Command-line entry points: optimize, evaluate, render, gradcheck."""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from coconolab import atnz
from coconolab.attention import principal_self_map
from coconolab.losses import LossWeights, PipelineConfig, evaluate_pipeline
from coconolab.metrics import MaskSet, count_distinct_segments, pairwise_overlap, support_masks
from coconolab.optimizer import OptimizerConfig, finite_diff_gradient, optimize
from coconolab.reports import build_run_report, loss_report_dict, write_report
from coconolab.synthetic import BUILTIN_KINDS, ScenarioSpec, make_producer, scenario

__all__ = ["main"]

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_BEST_EFFORT = 2

GRADCHECK_TOLERANCE = 1e-4


class _Parser(argparse.ArgumentParser):
    # flag errors must exit 1 with usage text, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_ERROR)


def _parse_weights(text: str) -> LossWeights:
    parts = text.split(",")
    if len(parts) != 3:
        raise ValueError(f"--weights expects 'l1,l2,l3', got {text!r}")
    l1, l2, l3 = (float(p) for p in parts)
    return LossWeights(lambda1=l1, lambda2=l2, lambda3=l3)


def _load_scenario(arg: str, subjects: int, resolution: int, latent_dim: int | None):
    """A builtin kind, a ScenarioSpec JSON file, or an ATNZ file (evaluate-only)."""
    if arg in BUILTIN_KINDS:
        return scenario(arg, n_subjects=subjects, r=resolution, latent_dim=latent_dim), None
    if not os.path.exists(arg):
        raise ValueError(f"unknown scenario kind or unreadable file: {arg!r}")
    with open(arg, "rb") as fh:
        head = fh.read(4)
    if head == atnz.MAGIC:
        records = atnz.read_atnz(arg)
        return None, atnz.records_to_bundle(records)
    with open(arg, "r") as fh:
        data = json.load(fh)
    data.setdefault("kind", "custom")
    spec = ScenarioSpec(
        kind=data["kind"],
        n_subjects=int(data["n_subjects"]),
        r=int(data["r"]),
        latent_dim=int(data["latent_dim"]),
        self_centers=tuple(tuple(c) for c in data["self_centers"]),
        self_widths=tuple(data["self_widths"]),
        amplitudes=tuple(data["amplitudes"]),
        cross_offsets=tuple(tuple(c) for c in data["cross_offsets"]),
        cross_width=float(data["cross_width"]),
        cross_exponent=float(data.get("cross_exponent", 3.0)),
        center_gain=float(data.get("center_gain", 2.0)),
        center_span=(float(data["center_span"]) if data.get("center_span") is not None else None),
        amp_gain=float(data.get("amp_gain", 0.0)),
        offset_decay=float(data.get("offset_decay", 0.0)),
        bg_amplitude=float(data.get("bg_amplitude", 0.55)),
        bg_suppression=float(data.get("bg_suppression", 4.0)),
    )
    if spec.n_subjects != subjects:
        raise ValueError(f"scenario file defines {spec.n_subjects} subjects but --subjects is {subjects}")
    return spec, None


def _thread_cap(n_tasks: int) -> int:
    raw = os.environ.get("COCONOLAB_THREADS")
    if raw is None:
        return max(1, min(n_tasks, os.cpu_count() or 1))
    cap = int(raw)
    if cap < 1:
        raise ValueError(f"COCONOLAB_THREADS must be >= 1, got {raw!r}")
    return min(cap, n_tasks)


def _eval_metrics(ctx, min_area: int) -> dict:
    masks = MaskSet(masks=ctx.segments.masks)
    metrics = {"distinct_segments": count_distinct_segments(masks, min_area=min_area)}
    if ctx.n >= 2:
        footprints = support_masks(ctx.segments, ctx.smoothed, ctx.assignment.perm)
        metrics["support_overlap"] = pairwise_overlap(footprints)
        metrics["segment_overlap"] = pairwise_overlap(masks)
    return metrics


def _cmd_optimize(args) -> int:
    weights = _parse_weights(args.weights)
    spec, bundle = _load_scenario(args.scenario, args.subjects, args.resolution, args.latent_dim)

    if bundle is not None:
        # evaluate-only mode: an ATNZ file fixes the maps, nothing to optimize
        if bundle.n_tokens != args.subjects:
            raise ValueError(f"file holds {bundle.n_tokens} token maps but --subjects is {args.subjects}")
        report, ctx = evaluate_pipeline(bundle, None, weights)
        metrics = _eval_metrics(ctx, args.min_area)
        doc = build_run_report(
            "optimize",
            _config_echo(args, evaluate_only=True),
            ctx=ctx,
            report=report,
            metrics=metrics,
        )
        if args.out:
            write_report(doc, args.out)
        print(json.dumps(doc["final"], indent=2, sort_keys=True))
        ok = report.l_complete <= OptimizerConfig().success_l_complete and (
            report.l_contrast <= OptimizerConfig().success_l_contrast
        )
        return EXIT_OK if ok else EXIT_BEST_EFFORT

    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed]
    pipeline_cfg = PipelineConfig()

    def run(seed: int):
        cfg = OptimizerConfig(
            learning_rate=args.lr,
            max_steps_per_round=args.steps,
            max_rounds=args.max_rounds,
            rng_seed=seed,
        )
        return seed, optimize(make_producer(spec), weights, cfg, pipeline_cfg)

    if len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=_thread_cap(len(seeds))) as pool:
            results = list(pool.map(run, seeds))
    else:
        results = [run(seeds[0])]

    best_seed, result = min(results, key=lambda item: (item[1].best_report.total, item[0]))
    producer = make_producer(spec)
    bundle = producer.evaluate(result.best_latent.z)
    report, ctx = evaluate_pipeline(bundle, result.best_params, weights, pipeline_cfg)
    metrics = _eval_metrics(ctx, args.min_area)

    config = _config_echo(args)
    config["seed"] = best_seed
    doc = build_run_report("optimize", config, result=result, ctx=ctx, metrics=metrics)
    if len(seeds) > 1:
        doc["seed_results"] = [
            {"seed": s, "total": float(r.best_report.total), "converged": bool(r.converged)}
            for s, r in results
        ]
    if args.out:
        write_report(doc, args.out)
    if args.dump_atnz:
        records = atnz.bundle_to_records(bundle)
        records["softened"] = np.asarray(ctx.softened, dtype=np.float32)
        records["masks"] = np.asarray(ctx.segments.masks, dtype=np.float32)
        records["best_latent"] = np.asarray(result.best_latent.z, dtype=np.float32)
        records["base_noise"] = np.asarray(result.best_latent.base_noise, dtype=np.float32)
        records["mu"] = np.asarray(result.best_params.mu, dtype=np.float32)
        records["sigma"] = np.asarray(result.best_params.sigma, dtype=np.float32)
        atnz.write_atnz(records, args.dump_atnz)

    print(
        f"converged={result.converged} rounds={result.rounds_used} "
        f"l_contrast={report.l_contrast:.6f} l_complete={report.l_complete:.6f} "
        f"l_kl={report.l_kl:.6f} total={report.total:.6f}"
    )
    return EXIT_OK if result.converged else EXIT_BEST_EFFORT


def _config_echo(args, evaluate_only: bool = False) -> dict:
    config = {
        "scenario": args.scenario,
        "subjects": args.subjects,
        "resolution": args.resolution,
        "seed": getattr(args, "seed", None),
        "weights": args.weights,
        "min_area": args.min_area,
    }
    if evaluate_only:
        config["evaluate_only"] = True
        return config
    config.update(
        {
            "latent_dim": args.latent_dim,
            "lr": args.lr,
            "steps": args.steps,
            "max_rounds": args.max_rounds,
            "seeds": args.seeds,
        }
    )
    return config


def _cmd_evaluate(args) -> int:
    weights = _parse_weights(args.weights)
    records = atnz.read_atnz(args.atnz)
    bundle = atnz.records_to_bundle(records)
    if bundle.n_tokens != args.subjects:
        raise ValueError(f"file holds {bundle.n_tokens} token maps but --subjects is {args.subjects}")
    report, ctx = evaluate_pipeline(bundle, None, weights)
    metrics = _eval_metrics(ctx, args.min_area)
    if "masks" in records:
        file_masks = MaskSet(masks=np.rint(np.asarray(records["masks"], dtype=np.float64)))
        metrics["file_mask_distinct_segments"] = count_distinct_segments(
            file_masks, min_area=args.min_area
        )
        if file_masks.n_masks >= 2:
            metrics["file_mask_overlap"] = pairwise_overlap(file_masks)
    doc = build_run_report(
        "evaluate",
        {
            "atnz": args.atnz,
            "subjects": args.subjects,
            "weights": args.weights,
            "min_area": args.min_area,
        },
        ctx=ctx,
        report=report,
        metrics=metrics,
    )
    if args.out:
        write_report(doc, args.out)
    printable = dict(loss_report_dict(report))
    printable.pop("interference_table")
    printable.update(metrics)
    print(json.dumps(printable, indent=2, sort_keys=True))
    return EXIT_OK


def _write_pgm(path, map2d) -> None:
    a = np.asarray(map2d, dtype=np.float64)
    pixels = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii")
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".pgm-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header + pixels.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _safe_name(label: str) -> str:
    return "".join(ch if ch.isalnum() else "-" for ch in label)


def _cmd_render(args) -> int:
    records = atnz.read_atnz(args.atnz)
    bundle = atnz.records_to_bundle(records)
    os.makedirs(args.out, exist_ok=True)
    report, ctx = evaluate_pipeline(bundle, None, LossWeights())

    for j, label in enumerate(bundle.cross.token_labels):
        _write_pgm(os.path.join(args.out, f"cross_{j}_{_safe_name(label)}.pgm"), bundle.cross.values[:, :, j])
    principal, inverted = principal_self_map(bundle.self_attn)
    _write_pgm(os.path.join(args.out, "principal.pgm"), principal.values)
    _write_pgm(os.path.join(args.out, "principal_inverted.pgm"), inverted.values)
    _write_pgm(os.path.join(args.out, "softened.pgm"), ctx.softened)
    for i in range(ctx.segments.n_segments):
        _write_pgm(os.path.join(args.out, f"segment_{i}.pgm"), ctx.segments.masks[i])
    print(f"wrote {2 + bundle.n_tokens + 1 + ctx.segments.n_segments} maps to {args.out}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    weights = _parse_weights(args.weights)
    spec, bundle = _load_scenario(args.scenario, args.subjects, args.resolution, args.latent_dim)
    if spec is None:
        raise ValueError("gradcheck needs a differentiable scenario, not an ATNZ file")
    producer = make_producer(spec)
    dim = producer.dimension()
    rng = np.random.default_rng(args.seed)
    base_noise = rng.standard_normal(dim)
    from coconolab.optimizer import NoiseParams, SIGMA_FLOOR, _total_gradients

    params = NoiseParams(mu=np.zeros(dim), sigma=np.full(dim, args.sigma))

    z = params.mu + params.sigma * base_noise
    _, ctx = evaluate_pipeline(producer.evaluate(z), params, weights)
    g_mu, g_sigma = _total_gradients(producer, params, base_noise, weights, PipelineConfig(), ctx)

    skip_sigma = params.sigma - args.h <= SIGMA_FLOOR
    if skip_sigma.any():
        print(f"note: {int(skip_sigma.sum())} sigma elements at the clamp boundary were skipped")
    fd_mu, fd_sigma = finite_diff_gradient(producer, params, base_noise, weights, h=args.h)

    ok = True
    print(f"{'param':>10} {'analytic':>14} {'finite-diff':>14} {'rel-error':>12} {'status':>8}")
    scale = max(np.abs(g_mu).max(), np.abs(g_sigma).max(), 1e-12)
    for name, a, f, skip in (
        ("mu", g_mu, fd_mu, np.zeros(dim, dtype=bool)),
        ("sigma", g_sigma, fd_sigma, skip_sigma),
    ):
        for d in range(dim):
            if skip[d]:
                print(f"{name}[{d}]".rjust(10) + " " * 30 + "skipped".rjust(21))
                continue
            rel = abs(a[d] - f[d]) / max(abs(f[d]), scale * 1e-3, 1e-12)
            status = "pass" if rel < GRADCHECK_TOLERANCE else "FAIL"
            ok = ok and status == "pass"
            print(f"{name}[{d}]".rjust(10) + f" {a[d]:14.8f} {f[d]:14.8f} {rel:12.3e} {status:>8}")
    return EXIT_OK if ok else EXIT_BEST_EFFORT


def _build_parser() -> _Parser:
    parser = _Parser(prog="coconolab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_seed=True):
        p.add_argument("--subjects", type=int, required=True, help="number of subject tokens")
        p.add_argument("--resolution", type=int, default=16, help="attention map resolution")
        if with_seed:
            p.add_argument("--seed", type=int, default=0)
        p.add_argument("--weights", default="1,1,500", help="comma-separated l1,l2,l3")
        p.add_argument("--latent-dim", type=int, default=None)
        p.add_argument("--min-area", type=int, default=4, help="min cells for a distinct segment")

    p_opt = sub.add_parser("optimize", help="optimize latent Gaussian parameters on a scenario")
    p_opt.add_argument("--scenario", required=True, help=f"one of {BUILTIN_KINDS} or a spec/ATNZ file")
    common(p_opt)
    p_opt.add_argument("--out", default=None, help="write the run report JSON here")
    p_opt.add_argument("--max-rounds", type=int, default=5)
    p_opt.add_argument("--lr", type=float, default=1e-2)
    p_opt.add_argument("--steps", type=int, default=50, help="max optimizer steps per round")
    p_opt.add_argument("--seeds", default=None, help="comma-separated seeds; runs in parallel")
    p_opt.add_argument("--dump-atnz", default=None, help="dump best latent and final maps here")
    p_opt.set_defaults(handler=_cmd_optimize)

    p_eval = sub.add_parser("evaluate", help="single forward pass over an ATNZ file")
    p_eval.add_argument("--atnz", required=True)
    p_eval.add_argument("--subjects", type=int, required=True)
    p_eval.add_argument("--weights", default="1,1,500")
    p_eval.add_argument("--min-area", type=int, default=4)
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(handler=_cmd_evaluate)

    p_render = sub.add_parser("render", help="write graymaps of the maps in an ATNZ file")
    p_render.add_argument("--atnz", required=True)
    p_render.add_argument("--out", required=True, help="output directory")
    p_render.set_defaults(handler=_cmd_render)

    p_grad = sub.add_parser("gradcheck", help="analytic-vs-finite-difference gradient table")
    p_grad.add_argument("--scenario", required=True)
    common(p_grad)
    p_grad.add_argument("--h", type=float, default=1e-5)
    p_grad.add_argument("--sigma", type=float, default=1.0, help="sigma value to check at")
    p_grad.set_defaults(handler=_cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except SystemExit:
        raise
    except Exception as exc:  # CLI contract: any operational failure exits 1
        print(f"coconolab: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
