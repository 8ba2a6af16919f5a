"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are collected in ``RESULTS`` and printed in pytest's terminal
summary (see conftest.py). Run with ``pytest tests/test_acceptance.py -v``
or ``python tests/test_acceptance.py``.
"""

import csv
import gc
import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from loraga.analysis import (criterion, first_step_alignment, loglog_slope, optimal_factors,
                             probe_cell, zeta_for)
from loraga.cli import main as cli_main
from loraga.experiments import ExperimentConfig, base_network, prepare_data, run_all, summarize, threshold
from loraga.ga_init import (GaInitConfig, estimate_gradients, estimate_gradients_accumulated,
                            lora_ga_initialize)
from loraga.linalg import random_orthonormal_columns
from loraga.lora import SCHEMES, AdaptedLayer, InitScheme, LoraAdapter, adapt_network
from loraga.nn import (LiveGradientMeter, Network, NetworkSpec, activation_derivative,
                       backward_streaming, forward, gradients, numerical_gradients)
from loraga.train import TrainConfig, train

RESULTS = {}


def report(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d} {title}: {detail}"
    RESULTS[number] = line
    print(line)


def _distinct_spectrum_matrix(rng, d_out, d_in):
    k = min(d_out, d_in)
    s = np.sort(rng.uniform(0.1, 10.0, k))[::-1] + np.arange(k)[::-1] * 1e-3
    u = random_orthonormal_columns(d_out, k, rng)
    v = random_orthonormal_columns(d_in, k, rng)
    return (u * s) @ v.T, s


# 1 ---------------------------------------------------------------------------

def test_criterion_01_optimal_gradient_approximation():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst_rel, worst_margin = 0.0, math.inf
    for i in range(50):
        r = (1, 2, 4, 8)[i % 4]
        d_out, d_in = int(rng.integers(2 * r + 1, 65)), int(rng.integers(2 * r + 1, 49))
        g, s = _distinct_spectrum_matrix(rng, d_out, d_in)
        zeta, eta = float(rng.uniform(0.5, 4)), float(rng.uniform(0.5, 4))
        a, b = optimal_factors(g, r, zeta, eta)
        at_opt = criterion(g, a, b, eta, zeta)
        predicted = zeta * math.sqrt(float(np.sum(s[2 * r:] ** 2)))
        worst_rel = max(worst_rel, abs(at_opt - predicted) / predicted)
        c = math.sqrt(zeta) / eta
        for k in range(2000):
            if k % 2:
                qa = random_orthonormal_columns(d_in, r, rng)
                qb = random_orthonormal_columns(d_out, r, rng)
            else:
                # orthonormalised perturbations of the optimum probe its neighbourhood
                eps = 10.0 ** rng.uniform(-6, -1)
                qa = np.linalg.qr(a.T / c + eps * rng.standard_normal((d_in, r)))[0]
                qb = np.linalg.qr(b / c + eps * rng.standard_normal((d_out, r)))[0]
            rival = criterion(g, c * qa.T, c * qb, eta, zeta)
            worst_margin = min(worst_margin, (rival - at_opt) / max(at_opt, 1.0))
    elapsed = time.perf_counter() - t0
    ok = worst_rel <= 1e-9 and worst_margin >= -1e-9 and elapsed < 60
    report(1, "optimal gradient approximation", ok,
           f"max rel err {worst_rel:.2e} (tol 1e-9), min relative rival margin {worst_margin:.2e}, "
           f"{elapsed:.1f}s (limit 60s)")
    assert ok


# 2 ---------------------------------------------------------------------------

def _adapter_identity_error(net, x, t) -> float:
    """Direct chain rule through eta*B@A versus the maps of the effective-weight gradient."""
    trace = forward(net, x, t)
    delta = trace.dloss
    worst = 0.0
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        h_in = trace.inputs[i]
        if isinstance(layer, AdaptedLayer):
            ad = layer.adapter
            grad_w = delta @ h_in.T
            direct_a = ad.eta * (ad.b.T @ delta) @ h_in.T
            direct_b = ad.eta * delta @ (ad.a @ h_in).T
            for direct, mapped in ((direct_a, ad.eta * ad.b.T @ grad_w),
                                   (direct_b, ad.eta * grad_w @ ad.a.T)):
                worst = max(worst, float(np.max(np.abs(direct - mapped)) / np.max(np.abs(direct))))
        if i > 0:
            delta = layer.propagate(delta) * activation_derivative(trace.activation, trace.pre[i - 1])
    return worst


def test_criterion_02_adapter_gradient_identities():
    rng = np.random.default_rng(202)
    worst, step0_gap, literal = 0.0, 0.0, 0.0
    for trial in range(5):
        dims = (10, 14, 12, 6)
        net = Network.from_spec(NetworkSpec(dims, "tanh", "mse", trial))
        x, t = rng.standard_normal((10, 16)), rng.standard_normal((6, 16))
        adapted, _ = lora_ga_initialize(net, GaInitConfig(rank=2, alpha=4, gamma=2,
                                                          sampled_batch_size=16, seed=trial), x, t)
        worst = max(worst, _adapter_identity_error(adapted, x, t))
        for g_ad, g_base in zip(gradients(adapted, x, t).weights, gradients(net, x, t).weights):
            step0_gap = max(step0_gap, float(np.max(np.abs(g_ad - g_base)) / np.max(np.abs(g_base))))
        train(adapted, x, t, TrainConfig(optimizer="adamw", lr=1e-2, steps=10, batch_size=16,
                                          warmup_ratio=0.0))
        worst = max(worst, _adapter_identity_error(adapted, x, t))
        # eta = 1: the identities hold literally as grad_A = B^T grad_W', grad_B = grad_W' A^T
        layers = []
        for layer in net.layers:
            ad = LoraAdapter(rng.standard_normal((2, layer.d_in)), rng.standard_normal((layer.d_out, 2)),
                             1.0, 1.0)
            layers.append(AdaptedLayer(layer.w - ad.delta(), ad, layer.bias.copy()))
        literal = max(literal, _adapter_identity_error(Network(net.spec, layers), x, t))
    ok = worst <= 1e-12 and step0_gap <= 1e-12 and literal <= 1e-12
    report(2, "adapter gradient identities", ok,
           f"identity err {worst:.2e} (init and after 10 AdamW steps), eta=1 literal form {literal:.2e}, "
           f"step-0 adapted vs full gradient {step0_gap:.2e} (tol 1e-12)")
    assert ok


# 3 ---------------------------------------------------------------------------

def test_criterion_03_backprop_matches_finite_differences():
    rng = np.random.default_rng(303)
    worst = 0.0
    nets = 0
    for depth in (1, 2, 3):
        for act in ("tanh", "relu", "identity"):
            for loss in ("mse", "softmax_cross_entropy"):
                dims = tuple(int(d) for d in rng.integers(2, 9, size=depth + 1))
                net = Network.from_spec(NetworkSpec(dims, act, loss, nets))
                for layer in net.layers:
                    layer.bias = 0.1 * rng.standard_normal(layer.d_out)
                x = rng.standard_normal((dims[0], 5))
                t = (rng.standard_normal((dims[-1], 5)) if loss == "mse"
                     else np.eye(dims[-1])[:, rng.integers(0, dims[-1], 5)])
                analytic = gradients(net, x, t).weights
                numeric = numerical_gradients(net, x, t, step=1e-5)
                for a, f in zip(analytic, numeric):
                    floor = max(1e-3 * float(np.max(np.abs(a))), 1e-10)
                    rel = np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
                    worst = max(worst, float(rel.max()))
                nets += 1
    ok = worst <= 1e-6
    report(3, "backprop vs central differences", ok,
           f"max rel err {worst:.2e} over {nets} networks, every weight (tol 1e-6)")
    assert ok


# 4 ---------------------------------------------------------------------------

def test_criterion_04_initial_point_preserved():
    rng = np.random.default_rng(404)
    worst = 0.0
    for k, dims in enumerate([(16, 24, 12), (20, 20, 20, 8), (32, 16)]):
        net = Network.from_spec(NetworkSpec(dims, "tanh", "mse", k))
        for layer in net.layers:
            layer.bias = rng.standard_normal(layer.d_out)
        x = rng.standard_normal((dims[0], 16))
        t = rng.standard_normal((dims[-1], 16))
        grads = gradients(net, x, t).weights
        for kind in SCHEMES:
            gamma = 4.0 if kind in ("gaussian_so", "lora_ga") else None
            adapted = adapt_network(net, InitScheme(kind, 16.0, 3, gamma, k),
                                    grads if kind in ("grad_approx_ga", "lora_ga") else None)
            worst = max(worst, float(np.max(np.abs(adapted.predict(x) - net.predict(x)))))
    ok = worst <= 1e-10
    report(4, "initial-point preservation (5 schemes)", ok,
           f"max |adapted - base| output {worst:.2e} on 16 inputs (tol 1e-10)")
    assert ok


# 5 ---------------------------------------------------------------------------

def test_criterion_05_accumulation_equals_full_batch():
    rng = np.random.default_rng(505)
    net = Network.from_spec(NetworkSpec((10, 14, 12, 6), "tanh", "mse", 5))
    x, t = rng.standard_normal((10, 8)), rng.standard_normal((6, 8))
    full = estimate_gradients(net, x, t).weights
    worst = {}
    for b in (1, 2, 4, 8):
        acc = estimate_gradients_accumulated(net, x, t, b).weights
        worst[b] = max(float(np.max(np.abs(a - f))) for a, f in zip(acc, full))
    ok = max(worst.values()) <= 1e-12
    report(5, "micro-batch accumulation equals full batch", ok,
           ", ".join(f"(8,{b}): {v:.1e}" for b, v in worst.items()) + " (tol 1e-12 per entry)")
    assert ok


# 6 ---------------------------------------------------------------------------

def test_criterion_06_streaming_single_live_gradient():
    rng = np.random.default_rng(606)
    dims = (16,) * 11
    net = Network.from_spec(NetworkSpec(dims, "tanh", "mse", 6))
    x, t = rng.standard_normal((16, 32)), rng.standard_normal((16, 32))
    meter = LiveGradientMeter()
    _, rep = lora_ga_initialize(net, GaInitConfig(rank=2, sampled_batch_size=8), x, t, meter)
    # control: the same meter sees all ten when a visitor keeps them
    control, kept = LiveGradientMeter(), []
    backward_streaming(forward(net, x, t), lambda i, gw, gb: kept.append(gw), control)
    control_peak = control.peak
    kept.clear()
    gc.collect()
    ok = meter.peak == 1 and meter.issued == 10 and control_peak == 10 and rep.peak_live_gradients == 1
    report(6, "streaming initialization memory", ok,
           f"peak live gradients {meter.peak} over {meter.issued} layers "
           f"(retaining control peaks at {control_peak})")
    assert ok


# 7 ---------------------------------------------------------------------------

def test_criterion_07_scale_stability():
    t0 = time.perf_counter()
    douts, ranks, alpha, gamma, samples = (64, 256, 1024), (2, 8, 32), 1.0, 1.0, 10_000
    stable = [probe_cell(d, d, r, zeta_for("lora_ga", alpha, gamma, d, r), alpha, samples, 7).forward_moment
              for d in douts for r in ranks]
    spread = max(stable) / min(stable)
    slopes, worst_z = [], 0.0
    for r in ranks:
        cells = [probe_cell(d, d, r, 1.0, alpha, samples, 8) for d in douts]
        slopes.append(loglog_slope(douts, [c.forward_moment for c in cells]))
        worst_z = max(worst_z, max(abs(c.forward_moment - c.forward_predicted) / c.forward_stderr
                                   for c in cells))
    elapsed = time.perf_counter() - t0
    ok = (spread <= 2.0 and all(abs(s + 1) <= 0.15 for s in slopes) and worst_z <= 5.0
          and elapsed < 120)
    report(7, "forward scale stability", ok,
           f"lora_ga max/min moment {spread:.3f} (limit 2); constant-zeta slopes "
           f"{', '.join(f'{s:.3f}' for s in slopes)} (-1 +- 0.15), closed-form gap <= "
           f"{worst_z:.1f} stderr; {elapsed:.1f}s (limit 120s)")
    assert ok


# 8 ---------------------------------------------------------------------------

def test_criterion_08_first_step_alignment():
    rng = np.random.default_rng(808)
    net = Network.from_spec(NetworkSpec((12, 16, 16, 10), "tanh", "mse", 8))
    x, t = rng.standard_normal((12, 24)), rng.standard_normal((10, 24))
    adapted, _ = lora_ga_initialize(net, GaInitConfig(rank=2, alpha=2, gamma=2,
                                                      sampled_batch_size=24), x, t)
    errs = []
    for lr in (1e-3, 1e-4, 1e-5):
        res = first_step_alignment(net, adapted, x, t, lr)
        errs.append(max(abs(r.residual / r.predicted_residual - 1) for r in res))
    ok = errs[2] <= 1e-6 and errs[0] > errs[1] > errs[2]
    report(8, "first-step alignment", ok,
           f"|residual/prediction - 1| at lr 1e-3, 1e-4, 1e-5: {errs[0]:.2e}, {errs[1]:.2e}, "
           f"{errs[2]:.2e} (tol 1e-6 at 1e-5, monotone)")
    assert ok


# 9 ---------------------------------------------------------------------------

def test_criterion_09_convergence_speedup():
    t0 = time.perf_counter()
    cfg = ExperimentConfig()
    train_set, _ = prepare_data(cfg)
    tau = threshold(cfg, base_network(cfg), train_set)
    results = run_all(cfg, ["vanilla", "lora_ga"], list(cfg.seeds))
    summary = summarize(cfg, results, tau, cfg.seeds)
    v = summary["schemes"]["vanilla"]["median_steps_to_threshold"]
    g = summary["schemes"]["lora_ga"]["median_steps_to_threshold"]
    ratio = summary["speedup_vanilla_over_lora_ga"]
    elapsed = time.perf_counter() - t0
    ok = (g is not None and v is not None and g <= v and ratio is not None and ratio >= 1.2
          and elapsed < 300)
    report(9, "desk-scale convergence", ok,
           f"median steps-to-threshold vanilla {v}, lora_ga {g}, speedup {ratio:.2f} "
           f"(need >= 1.2) over {len(cfg.seeds)} seeds; {elapsed:.1f}s (limit 300s)")
    assert ok


# 10 --------------------------------------------------------------------------

def test_criterion_10_coverage_curves():
    with tempfile.TemporaryDirectory() as d:
        assert cli_main(["init-analyze", "--out", d]) == 0
        files = sorted(Path(d).rglob("layer*_coverage.csv"))
        bad = []
        for f in files:
            with open(f, newline="") as fh:
                cov = [float(r["coverage"]) for r in csv.DictReader(fh)]
            if not (all(0 <= c <= 1 for c in cov) and all(b >= a for a, b in zip(cov, cov[1:]))
                    and cov[-1] == 1.0):
                bad.append(f.name)
    ok = bool(files) and not bad
    report(10, "coverage curves", ok,
           f"{len(files)} curves from init-analyze within [0,1], non-decreasing, ending at 1"
           + (f"; failing: {bad}" if bad else ""))
    assert ok


# 11 --------------------------------------------------------------------------

def test_criterion_11_reproducibility():
    differing = []
    counted = 0
    with tempfile.TemporaryDirectory() as d:
        for command in ("init-analyze", "train", "ablate", "stability"):
            runs = []
            for k in range(2):
                out = Path(d) / f"{command}-{k}"
                assert cli_main([command, "--out", str(out)]) == 0
                runs.append({str(p.relative_to(out)): p.read_bytes()
                             for p in sorted(out.rglob("*")) if p.suffix in (".csv", ".json")})
            counted += len(runs[0])
            if runs[0] != runs[1]:
                differing.append(command)
    ok = not differing and counted > 0
    report(11, "bit-identical re-runs", ok,
           f"{counted} CSV/JSON files across init-analyze, train, ablate, stability"
           + (f"; differing: {differing}" if differing else " all identical"))
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
