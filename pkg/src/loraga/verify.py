"""Self-contained numerical checks, one per result the toolkit relies on.

Every check is seeded and returns a :class:`CheckResult`; ``run_all``
aggregates them for the ``verify`` command.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .analysis import first_step_alignment, loglog_slope, probe_cell, verify_optimum, zeta_for
from .ga_init import GaInitConfig, estimate_gradients, estimate_gradients_accumulated, lora_ga_initialize
from .linalg import best_rank_k, frobenius_norm, random_orthonormal_columns, svd, tail_energy
from .lora import SCHEMES, AdaptedLayer, InitScheme, adapt_network, adapter_gradients, factored_gradients
from .nn import LiveGradientMeter, Network, NetworkSpec, forward, gradients, numerical_gradients
from .train import TrainConfig, train


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    predicted: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name}: measured={self.measured:.6g} "
                f"predicted={self.predicted:.6g}  {self.detail}").rstrip()


def spectrum_matrix(rng: np.random.Generator, d_out: int, d_in: int,
                    spectrum: Optional[np.ndarray] = None) -> np.ndarray:
    """Random matrix with a prescribed (or random, well separated) spectrum."""
    k = min(d_out, d_in)
    if spectrum is None:
        spectrum = np.sort(rng.uniform(0.1, 10.0, size=k))[::-1]
        spectrum = spectrum + np.arange(k)[::-1] * 1e-3
    u = random_orthonormal_columns(d_out, k, rng)
    v = random_orthonormal_columns(d_in, k, rng)
    return (u * spectrum) @ v.T


def check_eckart_young(instances: int = 30, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng([seed, 1])
    worst = 0.0
    for _ in range(instances):
        m, n = rng.integers(2, 65, size=2)
        a = rng.standard_normal((m, n))
        k = int(rng.integers(1, min(m, n) + 1))
        resid = frobenius_norm(a - best_rank_k(a, k))
        pred = tail_energy(svd(a).s, k)
        worst = max(worst, abs(resid - pred) / max(pred, 1e-300) if pred > 0 else resid)
    return CheckResult("Eckart-Young (best rank-k)", worst <= 1e-9, worst, 0.0,
                       f"max relative residual error over {instances} matrices")


def check_ga_optimum(instances: int = 50, trials: int = 2000, seed: int = 0) -> CheckResult:
    """Optimality of the singular-vector solution against random rivals."""
    rng = np.random.default_rng([seed, 2])
    worst_rel = 0.0
    margin = math.inf
    ranks = (1, 2, 4, 8)
    for i in range(instances):
        r = ranks[i % len(ranks)]
        d_out = int(rng.integers(2 * r + 1, 65))
        d_in = int(rng.integers(2 * r + 1, 49))
        g = spectrum_matrix(rng, d_out, d_in)
        zeta = float(rng.uniform(0.5, 4.0))
        eta = float(rng.uniform(0.5, 4.0))
        rep = verify_optimum(g, r, zeta, eta, trials=trials, seed=int(rng.integers(2**31)))
        if rep.predicted > 0:
            worst_rel = max(worst_rel, abs(rep.at_solution - rep.predicted) / rep.predicted)
        margin = min(margin, rep.best_random - rep.at_solution)
    ok = worst_rel <= 1e-9 and margin >= -1e-9
    return CheckResult("Gradient approximation optimum", ok, worst_rel, 0.0,
                       f"{instances} instances x {trials} rivals; min rival margin={margin:.3g}")


def random_adapted_layer(rng, d_out=12, d_in=10, rank=2, eta=None) -> AdaptedLayer:
    from .lora import LoraAdapter
    eta = float(rng.uniform(0.5, 3.0)) if eta is None else eta
    ad = LoraAdapter(rng.standard_normal((rank, d_in)), rng.standard_normal((d_out, rank)), 1.0, eta)
    return AdaptedLayer(rng.standard_normal((d_out, d_in)), ad)


def check_adapter_gradients(seed: int = 0, steps: int = 10) -> CheckResult:
    """Adapter gradients are linear maps of the effective-weight gradient.

    Checked on random layers, on a lora_ga network at step 0 (against the
    unadapted network) and again after ``steps`` training steps.
    """
    rng = np.random.default_rng([seed, 3])
    worst = 0.0
    for _ in range(20):
        layer = random_adapted_layer(rng)
        x = rng.standard_normal((layer.d_in, 7))
        up = rng.standard_normal((layer.d_out, 7)) / 7
        ga, gb, gw = adapter_gradients(layer, up, x)
        la, lb = factored_gradients(layer.adapter, gw)
        worst = max(worst, _rel(ga, la), _rel(gb, lb))
    net, adapted, x, t = _small_ga_setup(rng)
    base_grads = gradients(net, x, t).weights
    adapted_grads = gradients(adapted, x, t).weights
    init_gap = max(_rel(a, b) for a, b in zip(adapted_grads, base_grads))
    worst = max(worst, _layerwise_factored_error(adapted, x, t))
    train(adapted, x, t, TrainConfig(optimizer="adamw", lr=1e-2, steps=steps, batch_size=x.shape[1],
                                      warmup_ratio=0.0))
    worst = max(worst, _layerwise_factored_error(adapted, x, t))
    ok = worst <= 1e-12 and init_gap <= 1e-12
    return CheckResult("Adapter gradients", ok, max(worst, init_gap), 0.0,
                       f"identity error={worst:.3g}; step-0 dW' vs dW gap={init_gap:.3g}")


def _rel(a, b) -> float:
    scale = max(float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(a - b))) / scale


def _layerwise_factored_error(net: Network, x, t) -> float:
    """Direct factored-path gradients vs the linear maps, for every adapted layer."""
    trace = forward(net, x, t)
    worst = 0.0
    from .nn import activation_derivative
    delta = trace.dloss
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if isinstance(layer, AdaptedLayer):
            ga, gb, gw = adapter_gradients(layer, delta, trace.inputs[i])
            la, lb = factored_gradients(layer.adapter, gw)
            worst = max(worst, _rel(ga, la), _rel(gb, lb))
        if i > 0:
            delta = layer.propagate(delta) * activation_derivative(trace.activation, trace.pre[i - 1])
    return worst


def _small_ga_setup(rng, dims=(10, 12, 8), rank=2, n=16):
    spec = NetworkSpec(dims, "tanh", "mse", int(rng.integers(2**31)))
    net = Network.from_spec(spec)
    x = rng.standard_normal((dims[0], n))
    t = rng.standard_normal((dims[-1], n))
    adapted, _ = lora_ga_initialize(net, GaInitConfig(rank=rank, alpha=2.0, gamma=2.0,
                                                      sampled_batch_size=n), x, t)
    return net, adapted, x, t


def check_backprop(seed: int = 0, nets: int = 5, step: float = 1e-5) -> CheckResult:
    rng = np.random.default_rng([seed, 4])
    worst = 0.0
    for k in range(nets):
        depth = int(rng.integers(1, 4))
        dims = tuple(int(d) for d in rng.integers(2, 17, size=depth + 1))
        act = ("tanh", "relu", "identity")[k % 3]
        loss = ("mse", "softmax_cross_entropy")[k % 2]
        net = Network.from_spec(NetworkSpec(dims, act, loss, int(rng.integers(2**31))))
        for layer in net.layers:
            layer.bias = rng.standard_normal(layer.d_out) * 0.1
        x = rng.standard_normal((dims[0], 5))
        if loss == "mse":
            t = rng.standard_normal((dims[-1], 5))
        else:
            t = np.eye(dims[-1])[:, rng.integers(0, dims[-1], size=5)]
        worst = max(worst, gradient_check_error(net, x, t, step))
    return CheckResult("Backprop vs central differences", worst <= 1e-6, worst, 0.0,
                       f"max relative error over {nets} networks (step {step:g})")


def gradient_check_error(net: Network, x, t, step: float = 1e-5) -> float:
    """Largest per-entry relative error between analytic and numerical gradients.

    The denominator is floored at 1e-3 of the layer's largest gradient entry,
    since entries that are (near) zero have no meaningful relative error.
    """
    analytic = gradients(net, x, t).weights
    numeric = numerical_gradients(net, x, t, step)
    worst = 0.0
    for a, f in zip(analytic, numeric):
        floor = max(1e-3 * float(np.max(np.abs(a))), 1e-10)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
        worst = max(worst, float(np.max(np.abs(a - f) / denom)))
    return worst


def check_initial_point(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng([seed, 5])
    spec = NetworkSpec((16, 24, 20, 12), "tanh", "mse", 11)
    net = Network.from_spec(spec)
    x = rng.standard_normal((16, 16))
    t = rng.standard_normal((12, 16))
    base_out = net.predict(x)
    grads = gradients(net, x, t).weights
    worst = 0.0
    for kind in SCHEMES:
        gamma = 4.0 if kind in ("gaussian_so", "lora_ga") else None
        adapted = adapt_network(net, InitScheme(kind, 8.0, 3, gamma, seed),
                                grads if kind in ("grad_approx_ga", "lora_ga") else None)
        worst = max(worst, float(np.max(np.abs(adapted.predict(x) - base_out))))
    return CheckResult("Initial-point preservation (5 schemes)", worst <= 1e-10, worst, 0.0,
                       "max |adapted - base| output")


def check_scale_stability(seed: int = 0, samples: int = 10_000, zeta_rule="lora_ga",
                   alpha: float = 1.0, gamma: float = 1.0) -> CheckResult:
    """Scale stability of the non-zero initialization.

    Passes when the forward second moment under ``zeta_rule`` stays within a
    factor 2 over the (d_out, r) grid and the constant-zeta moments follow
    r^2/d_out with log-log slope -1 +- 0.15 in d_out.
    """
    douts, ranks = (64, 256, 1024), (2, 8, 32)
    stable = []
    for d in douts:
        for r in ranks:
            z = zeta_for(zeta_rule, alpha, gamma, d, r)
            stable.append(probe_cell(d, d, r, z, alpha, samples, seed).forward_moment)
    spread = max(stable) / min(stable)
    slopes = []
    for r in ranks:
        ys = [probe_cell(d, d, r, 1.0, alpha, samples, seed + 1).forward_moment for d in douts]
        slopes.append(loglog_slope(douts, ys))
    slope_err = max(abs(s + 1.0) for s in slopes)
    ok = spread <= 2.0 and slope_err <= 0.15
    return CheckResult("Forward scale stability", ok, spread, 1.0,
                       f"max/min moment over grid; constant-zeta slopes={[round(s, 3) for s in slopes]}")


def check_streaming_init(seed: int = 0, depth: int = 10) -> CheckResult:
    """Streaming initialization: one live gradient, unchanged outputs, optimal residuals."""
    rng = np.random.default_rng([seed, 6])
    dims = (12,) + (16,) * (depth - 1) + (10,)
    net = Network.from_spec(NetworkSpec(dims, "tanh", "mse", 5))
    x = rng.standard_normal((12, 32))
    t = rng.standard_normal((10, 32))
    meter = LiveGradientMeter()
    adapted, report = lora_ga_initialize(net, GaInitConfig(rank=2, alpha=16, gamma=16,
                                                           sampled_batch_size=8, seed=seed),
                                         x, t, meter)
    probe = rng.standard_normal((12, 16))
    gap = float(np.max(np.abs(adapted.predict(probe) - net.predict(probe))))
    resid_err = max(abs(e["criterion_residual"] - e["predicted_residual"])
                    / max(e["predicted_residual"], 1e-300) for e in report.layers)
    ok = meter.peak == 1 and meter.issued == depth and gap <= 1e-10 and resid_err <= 1e-9
    return CheckResult("Streaming LoRA-GA init", ok, meter.peak, 1,
                       f"peak live gradients over {depth} layers; output gap={gap:.3g}; "
                       f"residual rel err={resid_err:.3g}")


def check_accumulation(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng([seed, 7])
    net = Network.from_spec(NetworkSpec((10, 14, 6), "tanh", "mse", 3))
    x = rng.standard_normal((10, 8))
    t = rng.standard_normal((6, 8))
    full = estimate_gradients(net, x, t).weights
    worst = 0.0
    for b in (1, 2, 4, 8):
        acc = estimate_gradients_accumulated(net, x, t, b).weights
        worst = max(worst, max(float(np.max(np.abs(a - f))) for a, f in zip(acc, full)))
    return CheckResult("Gradient accumulation", worst <= 1e-12, worst, 0.0,
                       "max |accumulated - full batch| over b in {1,2,4,8}")


def check_first_step(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng([seed, 8])
    net, adapted, x, t = _small_ga_setup(rng, dims=(12, 16, 10), rank=2, n=16)
    errs = []
    for lr in (1e-3, 1e-4, 1e-5):
        res = first_step_alignment(net, adapted, x, t, lr)
        errs.append(max(abs(r.residual / r.predicted_residual - 1.0) for r in res))
    monotone = errs[0] >= errs[1] >= errs[2]
    ok = errs[-1] <= 1e-6 and monotone
    return CheckResult("First-step alignment", ok, errs[-1], 0.0,
                       f"|residual/prediction - 1| at lr=1e-3,1e-4,1e-5: "
                       f"{', '.join(f'{e:.2e}' for e in errs)}")


CHECKS: dict[str, Callable[..., CheckResult]] = {
    "eckart_young": check_eckart_young,
    "adapter_gradients": check_adapter_gradients,
    "ga_optimum": check_ga_optimum,
    "scale_stability": check_scale_stability,
    "streaming_init": check_streaming_init,
    "accumulation": check_accumulation,
    "backprop": check_backprop,
    "initial_point": check_initial_point,
    "first_step": check_first_step,
}


def mutated_zeta(alpha, gamma, d_out, rank):
    """A deliberately wrong zeta (linear in d_out) used by the mutation check."""
    return (alpha ** 2 / gamma ** 2) * d_out / rank ** 2


def run_all(seed: int = 0, mutate_zeta: bool = False) -> list[CheckResult]:
    out = []
    for key, fn in CHECKS.items():
        if key == "scale_stability" and mutate_zeta:
            out.append(fn(seed=seed, zeta_rule=mutated_zeta))
        else:
            out.append(fn(seed=seed))
    return out
