"""Command-line entry point: ``loraga <command> [--config PATH] [--out DIR] ...``.

Exit codes: 0 success, 1 verification failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import verify
from .analysis import StabilityProbeConfig, coverage_curve, stability_probe
from .experiments import (ALL_RUNS, ConfigError, ExperimentConfig, base_network,
                          load_config, prepare_data, run_all, summarize, threshold)
from .ga_init import estimate_gradients, gradient_initialize
from .linalg import svd
from .plotting import save_line_chart
from .storage import save_matrix_csv

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _write_rows(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else ("" if v is None else v) for v in row])
    path.write_text(buf.getvalue())


def resolve(args) -> tuple[ExperimentConfig, Path, list, Optional[int]]:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    seeds = list(cfg.seeds)
    env = os.environ.get("LORGA_SEED")
    if env is not None:
        try:
            seeds = [int(env)]
        except ValueError:
            raise ConfigError("LORGA_SEED", f"not an integer: {env!r}") from None
    if args.seeds:
        try:
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError("--seeds", f"expected comma-separated integers, got {args.seeds!r}") from None
        if not seeds:
            raise ConfigError("--seeds", "empty list")
    out = Path(args.out or cfg.output_dir) / cfg.name
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError("output_dir", str(exc)) from None
    if not os.access(out, os.W_OK):
        raise ConfigError("output_dir", f"{out} is not writable")
    return cfg, out, seeds, args.jobs


# --- commands ------------------------------------------------------------------

def cmd_init_analyze(cfg: ExperimentConfig, out: Path, seeds, jobs=None) -> int:
    """Gradient heatmaps, spectra, coverage curves and criterion residuals per layer."""
    train_set, _ = prepare_data(cfg)
    base = base_network(cfg)
    ga = dataclasses.replace(cfg.ga_init, scheme="lora_ga", seed=seeds[0])
    _, report = gradient_initialize(base, ga, train_set.inputs, train_set.targets)
    idx = report.batch_indices
    snap = estimate_gradients(base, train_set.inputs[:, idx], train_set.targets[:, idx])
    d = out / "init"
    d.mkdir(parents=True, exist_ok=True)
    _dump_json(d / "init_report.json", report.to_dict())
    curves = {}
    for i, g in enumerate(snap.weights):
        save_matrix_csv(d / f"layer{i}_gradient.csv", g)
        s = svd(g).s
        cc = coverage_curve(s)
        _write_rows(d / f"layer{i}_spectrum.csv", ["index", "singular_value"],
                    [(k + 1, float(v)) for k, v in enumerate(cc.singular_values)])
        _write_rows(d / f"layer{i}_coverage.csv", ["k", "coverage"],
                    [(k + 1, float(v)) for k, v in enumerate(cc.cumulative)])
        curves[f"layer {i}"] = (np.arange(1, s.size + 1), cc)
    _write_rows(d / "criterion.csv",
                ["layer", "d_out", "d_in", "r", "zeta", "coverage_2r", "criterion_residual",
                 "predicted_residual"],
                [(e["layer"], e["d_out"], e["d_in"], e["r"], e["zeta"], e["coverage_2r"],
                  e["criterion_residual"], e["predicted_residual"]) for e in report.layers])
    save_line_chart(d / "spectrum.svg", {k: (x, c.singular_values) for k, (x, c) in curves.items()},
                    title="Gradient singular values", xlabel="index", ylabel="sigma", logy=True)
    save_line_chart(d / "coverage.svg", {k: (x, c.cumulative) for k, (x, c) in curves.items()},
                    title="Coverage of squared singular values", xlabel="k", ylabel="coverage")
    print(f"init-analyze: {len(snap.weights)} layers -> {d}")
    return EXIT_OK


def _run_training(cfg: ExperimentConfig, out: Path, schemes, seeds, jobs):
    train_set, _ = prepare_data(cfg)
    tau = threshold(cfg, base_network(cfg), train_set)
    results = run_all(cfg, schemes, seeds, jobs)
    for r in results:
        d = out / r.scheme
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{r.seed}.csv").write_text(r.log.to_csv())
        summary = r.log.summary(tau)
        summary["status"] = r.status
        _dump_json(d / f"{r.seed}.json", summary)
    summary = summarize(cfg, results, tau, seeds)
    curves = {}
    for scheme in schemes:
        logs = [r.log for r in results if r.scheme == scheme and r.status == "ok" and r.log.losses]
        if logs:
            n = min(len(l.losses) for l in logs)
            med = np.median(np.array([l.smoothed()[:n] for l in logs]), axis=0)
            curves[scheme] = (np.arange(n), med)
    if curves:
        save_line_chart(out / "loss_curves.svg", curves, title=f"{cfg.name}: median smoothed loss",
                        xlabel="step", ylabel="loss", logy=True)
    return results, summary


def cmd_train(cfg: ExperimentConfig, out: Path, seeds, jobs=None) -> int:
    """Train the configured schemes over every seed and compare convergence speed."""
    _, summary = _run_training(cfg, out, list(cfg.schemes), seeds, jobs)
    _dump_json(out / "summary.json", summary)
    sp = summary["speedup_vanilla_over_lora_ga"]
    print(f"train: {len(cfg.schemes)} schemes x {len(seeds)} seeds -> {out}"
          + ("" if sp is None else f"; speedup vanilla/lora_ga = {sp:.3g}"))
    return EXIT_OK


def cmd_ablate(cfg: ExperimentConfig, out: Path, seeds, jobs=None) -> int:
    """All five initializations plus full fine-tuning, one table row each."""
    _, summary = _run_training(cfg, out, list(ALL_RUNS), seeds, jobs)
    rows, table = [], []
    for scheme in ALL_RUNS:
        s = summary["schemes"][scheme]
        per = s["per_seed"]
        status = "DIVERGED" if any(p["status"] == "DIVERGED" for p in per.values()) else "ok"
        row = {
            "scheme": scheme,
            "status": status,
            "median_eval_loss": s["median_eval_loss"],
            "median_steps_to_threshold": s["median_steps_to_threshold"],
            "per_seed_eval_loss": {k: p["eval_loss"] for k, p in per.items()},
            "per_seed_steps_to_threshold": {k: p["steps_to_threshold"] for k, p in per.items()},
        }
        table.append(row)
        rows.append((scheme, status, s["median_eval_loss"], s["median_steps_to_threshold"],
                     ";".join(_cell(p["eval_loss"]) for p in per.values()),
                     ";".join(_cell(p["steps_to_threshold"]) for p in per.values())))
    _write_rows(out / "ablation.csv",
                ["scheme", "status", "median_eval_loss", "median_steps_to_threshold",
                 "per_seed_eval_loss", "per_seed_steps_to_threshold"], rows)
    _dump_json(out / "ablation.json", {"experiment": cfg.name, "threshold": summary["threshold"],
                                       "seeds": summary["seeds"], "rows": table})
    _dump_json(out / "summary.json", summary)
    print(f"ablate: {len(ALL_RUNS)} rows -> {out / 'ablation.csv'}")
    return EXIT_OK


def _cell(v) -> str:
    return "" if v is None else repr(v)


def cmd_stability(cfg: ExperimentConfig, out: Path, seeds, jobs=None) -> int:
    """Monte-Carlo forward/backward second moments over the stability grid."""
    st = cfg.stability
    rows, cells_json = [], []
    for rule_name, rule in (("lora_ga", "lora_ga"), (f"constant_{st.constant_zeta:g}", st.constant_zeta)):
        probe = StabilityProbeConfig(tuple(tuple(c) for c in st.grid), st.samples, st.alpha,
                                     st.gamma, st.seed, st.factor_draws)
        for c in stability_probe(probe, rule):
            d = dataclasses.asdict(c)
            d["zeta_rule"] = rule_name
            cells_json.append({k: (None if isinstance(v, float) and v != v else v) for k, v in d.items()})
            rows.append((rule_name, c.d_in, c.d_out, c.rank, c.zeta, c.eta, c.forward_moment,
                         c.forward_predicted, c.forward_stderr, c.backward_moment,
                         c.backward_predicted, c.note))
    _write_rows(out / "stability.csv",
                ["zeta_rule", "d_in", "d_out", "r", "zeta", "eta", "forward_moment",
                 "forward_predicted", "forward_stderr", "backward_moment", "backward_predicted",
                 "note"], rows)
    _dump_json(out / "stability.json", {"experiment": cfg.name, "samples": st.samples,
                                        "alpha": st.alpha, "gamma": st.gamma, "cells": cells_json})
    print(f"stability: {len(rows)} cells -> {out / 'stability.csv'}")
    return EXIT_OK


def cmd_verify(seed: int = 0, mutate_zeta: bool = False, stream=None) -> int:
    stream = stream or sys.stdout
    t0 = time.perf_counter()
    results = verify.run_all(seed=seed, mutate_zeta=mutate_zeta)
    for r in results:
        print(r.line(), file=stream)
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed in "
          f"{time.perf_counter() - t0:.1f}s", file=stream)
    return EXIT_OK if failed == 0 else EXIT_FAIL


COMMANDS = {
    "init-analyze": cmd_init_analyze,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "stability": cmd_stability,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="loraga", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=COMMANDS[name].__doc__)
        sp.add_argument("--config", help="JSON experiment config (defaults to the reference task)")
        sp.add_argument("--out", help="output root (overrides config output_dir)")
        sp.add_argument("--seeds", help="comma-separated seeds (overrides config and LORGA_SEED)")
        sp.add_argument("--jobs", type=int, help="worker processes (default: CPU count)")
    vp = sub.add_parser("verify", help="run every numerical check; exit 1 on any failure")
    vp.add_argument("--seed", type=int, default=None)
    vp.add_argument("--mutate-zeta", action="store_true",
                    help="replace the stable zeta by a linear-in-d_out one (the stability check must FAIL)")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "verify":
        seed = args.seed
        if seed is None:
            try:
                seed = int(os.environ.get("LORGA_SEED", "0"))
            except ValueError:
                print(f"config error: LORGA_SEED: not an integer: {os.environ['LORGA_SEED']!r}",
                      file=sys.stderr)
                return EXIT_CONFIG
        return cmd_verify(seed, args.mutate_zeta)
    try:
        cfg, out, seeds, jobs = resolve(args)
        return COMMANDS[args.command](cfg, out, seeds, jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
