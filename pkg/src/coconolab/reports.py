"""Structured, reproducible run reports (JSON)."""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from coconolab.losses import EvalContext, LossReport
from coconolab.optimizer import OptimizationResult

__all__ = ["SCHEMA_VERSION", "loss_report_dict", "build_run_report", "write_report"]

SCHEMA_VERSION = 1


def loss_report_dict(report: LossReport) -> dict:
    return {
        "l_contrast": float(report.l_contrast),
        "l_complete": float(report.l_complete),
        "l_kl": float(report.l_kl),
        "total": float(report.total),
        "pca_sign": report.pca_sign_chosen,
        "interference_table": [[float(x) for x in row] for row in report.interference_table],
    }


def build_run_report(
    command: str,
    config: dict,
    result: OptimizationResult | None = None,
    ctx: EvalContext | None = None,
    report: LossReport | None = None,
    metrics: dict | None = None,
) -> dict:
    """Assemble the report document; echoing the config makes runs replayable."""
    doc: dict = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config": config,
    }
    if result is not None:
        doc["seed"] = config.get("seed")
        doc["converged"] = bool(result.converged)
        doc["rounds_used"] = int(result.rounds_used)
        doc["trace"] = [
            {
                "round": rec.round,
                "step": rec.step,
                "l_contrast": float(rec.l_contrast),
                "l_complete": float(rec.l_complete),
                "l_kl": float(rec.l_kl),
                "total": float(rec.total),
            }
            for rec in result.trace
        ]
        doc["final"] = loss_report_dict(result.best_report)
        doc["best_latent"] = [float(v) for v in result.best_latent.z]
        doc["best_mu"] = [float(v) for v in result.best_params.mu]
        doc["best_sigma"] = [float(v) for v in result.best_params.sigma]
    if report is not None and result is None:
        doc["final"] = loss_report_dict(report)
    if ctx is not None:
        doc["assignment"] = list(ctx.assignment.perm)
        doc["segment_masses"] = [float(m) for m in ctx.segments.masses]
        doc["otsu_threshold"] = float(ctx.threshold)
    if metrics is not None:
        doc["metrics"] = {k: (float(v) if isinstance(v, (np.floating, float)) else v) for k, v in metrics.items()}
    return doc


def write_report(doc: dict, path) -> None:
    """Atomic JSON write with stable key order."""
    payload = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".report-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
