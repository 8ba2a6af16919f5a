"""Numerical instruments for the gradient-approximation and scale-stability results."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .linalg import Matrix, as_matrix, frobenius_norm, random_orthonormal_columns, svd, tail_energy
from .lora import AdaptedLayer, compute_scaling, default_partition
from .nn import Network, ShapeError, gradients


def criterion(grad, a, b, eta: float, zeta: float) -> float:
    """|| eta^2 G A^T A + eta^2 B B^T G - zeta G ||_F."""
    g = as_matrix(grad, "gradient")
    a = as_matrix(a, "A")
    b = as_matrix(b, "B")
    if a.shape[1] != g.shape[1] or b.shape[0] != g.shape[0] or a.shape[0] != b.shape[1]:
        raise ShapeError(f"gradient {g.shape}, A {a.shape}, B {b.shape} are incompatible")
    e2 = eta * eta
    return frobenius_norm(e2 * ((g @ a.T) @ a) + e2 * (b @ (b.T @ g)) - zeta * g)


def predicted_residual(grad, rank: int, zeta: float) -> float:
    """zeta * sqrt(sum of squared singular values beyond index 2r)."""
    from .linalg import singular_values
    return zeta * tail_energy(singular_values(grad), 2 * rank)


def optimal_factors(grad, rank: int, zeta: float, eta: float, partition=None):
    """Optimal (A, B) for the criterion: scaled singular vectors of the gradient."""
    g = as_matrix(grad, "gradient")
    if 2 * rank > min(g.shape):
        raise ValueError(f"2r={2 * rank} exceeds min dims {min(g.shape)}")
    ia, ib = partition or default_partition(rank)
    f = svd(g)
    c = math.sqrt(zeta) / eta
    return c * f.v[:, list(ia)].T, c * f.u[:, list(ib)]


@dataclass
class OptimumReport:
    at_solution: float
    predicted: float
    best_random: float
    trials: int
    passed: bool

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def verify_optimum(grad, rank: int, zeta: float, eta: float, trials: int = 2000,
                   seed: int = 0, rtol: float = 1e-9) -> OptimumReport:
    """Compare the closed-form solution against its prediction and random rivals.

    Half of the rivals are independent Haar draws; the other half are small
    random rotations of the optimum, which probe its neighbourhood.
    """
    g = as_matrix(grad, "gradient")
    d_out, d_in = g.shape
    if 2 * rank > min(d_out, d_in):
        raise ValueError(f"2r={2 * rank} exceeds min dims {min(d_out, d_in)}")
    a_opt, b_opt = optimal_factors(g, rank, zeta, eta)
    at_solution = criterion(g, a_opt, b_opt, eta, zeta)
    predicted = zeta * tail_energy(svd(g).s, 2 * rank)
    c = math.sqrt(zeta) / eta
    rng = np.random.default_rng(seed)
    best = math.inf
    for t in range(trials):
        if t % 2 == 0:
            qa = random_orthonormal_columns(d_in, rank, rng)
            qb = random_orthonormal_columns(d_out, rank, rng)
        else:
            scale = 10.0 ** rng.uniform(-6, -1)
            qa, _ = np.linalg.qr(a_opt.T / c + scale * rng.standard_normal((d_in, rank)))
            qb, _ = np.linalg.qr(b_opt / c + scale * rng.standard_normal((d_out, rank)))
        best = min(best, criterion(g, c * qa.T, c * qb, eta, zeta))
    tol = rtol * max(predicted, 1.0)
    passed = abs(at_solution - predicted) <= tol and best >= at_solution - rtol
    return OptimumReport(at_solution, predicted, best, trials, bool(passed))


class ZeroSpectrumWarning(UserWarning):
    pass


def coverage(s, k: int) -> float:
    """Share of squared singular-value mass in the top ``k`` values.

    An all-zero spectrum has coverage 0 by convention (a warning is issued).
    """
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    if (s < 0).any():
        raise ValueError("singular values must be non-negative")
    if not 0 <= k <= s.size:
        raise ValueError(f"k={k} out of range [0, {s.size}]")
    top = s.max() if s.size else 0.0
    sq = (np.sort(s)[::-1] / (top or 1.0)) ** 2  # rescale so tiny values do not underflow
    total = sq.sum()
    if total == 0.0:
        warnings.warn("coverage of an all-zero spectrum is defined as 0", ZeroSpectrumWarning)
        return 0.0
    return float(sq[:k].sum() / total)


@dataclass
class CoverageCurve:
    singular_values: np.ndarray
    cumulative: np.ndarray


def coverage_curve(s) -> CoverageCurve:
    s = np.sort(np.asarray(s, dtype=np.float64).reshape(-1))[::-1]
    if (s < 0).any():
        raise ValueError("singular values must be non-negative")
    top = s[0] if s.size else 0.0
    sq = (s / (top or 1.0)) ** 2
    total = sq.sum()
    if total == 0.0:
        return CoverageCurve(s, np.zeros_like(s))
    cum = np.cumsum(sq) / total
    cum[-1] = 1.0
    return CoverageCurve(s, np.minimum(cum, 1.0))


# --- scale stability ---------------------------------------------------------

@dataclass(frozen=True)
class StabilityProbeConfig:
    grid: tuple = ((64, 64, 2), (256, 256, 2), (1024, 1024, 2))
    samples: int = 10_000
    alpha: float = 1.0
    gamma: float = 1.0
    seed: int = 0
    factor_draws: int = 20


def zeta_for(rule, alpha: float, gamma: float, d_out: int, rank: int) -> float:
    """``rule`` is "lora_ga", ("constant", c), a bare number, or a callable
    ``(alpha, gamma, d_out, rank) -> zeta``."""
    if callable(rule):
        return float(rule(alpha, gamma, d_out, rank))
    if rule == "lora_ga":
        return compute_scaling("lora_ga", alpha, rank, gamma, d_out).zeta
    if isinstance(rule, (tuple, list)) and rule and rule[0] == "constant":
        return float(rule[1])
    if isinstance(rule, (int, float)):
        return float(rule)
    raise ValueError(f"unknown zeta rule {rule!r}")


def forward_second_moment_prediction(zeta: float, alpha: float, rank: int, d_out: int) -> float:
    return zeta ** 2 * rank ** 2 / (alpha ** 2 * d_out)


def backward_second_moment_prediction(zeta: float, alpha: float, rank: int, d_in: int,
                                      v_sq_sum_over_dout: float = 1.0) -> float:
    # with sum_k v_k^2 = d_out * v_sq_sum_over_dout the O(1/d_in) term is exact
    return zeta ** 2 * rank ** 2 * v_sq_sum_over_dout / (alpha ** 2 * d_in)


@dataclass
class StabilityCell:
    d_in: int
    d_out: int
    rank: int
    zeta: float
    eta: float
    forward_moment: float
    forward_predicted: float
    forward_stderr: float
    backward_moment: float
    backward_predicted: float
    note: str = ""


def _cell_seed(seed: int, d_in: int, d_out: int, rank: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, d_in, d_out, rank])


def probe_cell(d_in: int, d_out: int, rank: int, zeta: float, alpha: float,
               samples: int, seed: int, factor_draws: int = 20) -> StabilityCell:
    """Monte-Carlo second moments of ``eta B A`` with Haar-random factors.

    Factors are redrawn ``factor_draws`` times; inputs are i.i.d. N(0, 1).
    The backward pass uses the fixed upstream vector v = (1, -1, 1, ...).
    """
    eta = alpha / math.sqrt(rank)
    c = math.sqrt(zeta) / eta
    rng = np.random.default_rng(_cell_seed(seed, d_in, d_out, rank))
    draws = max(1, min(factor_draws, samples))
    per_draw = np.full(draws, samples // draws)
    per_draw[: samples % draws] += 1
    v = np.where(np.arange(d_out) % 2 == 0, 1.0, -1.0)
    fwd_means, bwd = [], []
    for n in per_draw:
        a = c * random_orthonormal_columns(d_in, rank, rng).T
        b = c * random_orthonormal_columns(d_out, rank, rng)
        x = rng.standard_normal((d_in, int(n)))
        y = eta * (b @ (a @ x))
        fwd_means.append(np.mean(y * y, axis=0))
        g = eta * (a.T @ (b.T @ v))
        bwd.append(np.mean(g * g))
    per_sample = np.concatenate(fwd_means)
    fwd = float(per_sample.mean())
    stderr = float(per_sample.std(ddof=1) / math.sqrt(per_sample.size)) if per_sample.size > 1 else 0.0
    return StabilityCell(
        d_in, d_out, rank, zeta, eta,
        forward_moment=fwd,
        forward_predicted=forward_second_moment_prediction(zeta, alpha, rank, d_out),
        forward_stderr=stderr,
        backward_moment=float(np.mean(bwd)),
        backward_predicted=backward_second_moment_prediction(zeta, alpha, rank, d_in),
    )


def stability_probe(cfg: StabilityProbeConfig, zeta_rule="lora_ga") -> list[StabilityCell]:
    cells = []
    for d_in, d_out, rank in cfg.grid:
        if 2 * rank > min(d_in, d_out):
            cells.append(StabilityCell(d_in, d_out, rank, math.nan, math.nan, math.nan, math.nan,
                                       math.nan, math.nan, math.nan,
                                       note=f"skipped: 2r={2 * rank} > min(d_in, d_out)"))
            continue
        zeta = zeta_for(zeta_rule, cfg.alpha, cfg.gamma, d_out, rank)
        cells.append(probe_cell(d_in, d_out, rank, zeta, cfg.alpha, cfg.samples, cfg.seed,
                                cfg.factor_draws))
    return cells


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    return float(np.polyfit(lx, ly, 1)[0])


# --- first-step alignment ----------------------------------------------------

@dataclass
class AlignmentResult:
    layer: int
    residual: float
    predicted_residual: float
    cos_similarity: float
    zeta: float
    delta_norm: float


def realized_adapter_delta(before: AdaptedLayer, after: AdaptedLayer) -> Matrix:
    """eta * (dB A + B dA + dB dA), i.e. the exact change of eta*B@A."""
    a0, b0 = before.adapter.a, before.adapter.b
    da = after.adapter.a - a0
    db = after.adapter.b - b0
    return before.adapter.eta * (db @ a0 + b0 @ da + db @ da)


def layer_zeta(layer: AdaptedLayer) -> float:
    """The zeta implied by the adapter's initial factors: (eta * ||a_i||)^2.

    For gradient-based schemes the factor rows are orthogonal with a common
    norm so this matches the scheme's own constant.
    """
    s = layer.scheme
    if s is not None and s.kind == "lora_ga":
        return compute_scaling("lora_ga", s.alpha, s.rank, s.gamma, layer.d_out).zeta
    row = layer.adapter.a_init[0]
    return float((layer.adapter.eta * np.linalg.norm(row)) ** 2)


def first_step_alignment(net_base: Network, net_adapted: Network, x, t, lr: float,
                         zeta: Optional[float] = None, atol: float = 1e-8) -> list[AlignmentResult]:
    """One SGD step on the adapters, compared with zeta times the full update.

    The realized change of each adapter product is measured against
    ``-zeta * lr * grad_W`` (the scaled full-fine-tune step) and the
    spectrum-tail prediction ``zeta * lr * tail(grad_W, 2r)``.
    """
    from .train import adapter_sgd_step

    if lr <= 0:
        raise ValueError("learning rate must be positive")
    x = as_matrix(x, "input")
    gap = float(np.max(np.abs(net_base.predict(x) - net_adapted.predict(x))))
    if gap > atol:
        raise ValueError(f"networks are not at a common initial point (max output gap {gap:.3g})")
    base_grads = gradients(net_base, x, t).weights
    stepped = net_adapted.copy()
    adapter_sgd_step(stepped, x, t, lr)
    out = []
    for i, (before, after) in enumerate(zip(net_adapted.layers, stepped.layers)):
        if not isinstance(before, AdaptedLayer):
            continue
        z = layer_zeta(before) if zeta is None else zeta
        delta = realized_adapter_delta(before, after)
        target = -z * lr * base_grads[i]
        residual = frobenius_norm(delta - target)
        pred = predicted_residual(base_grads[i], before.adapter.rank, z) * lr
        dn, tn = frobenius_norm(delta), frobenius_norm(target)
        cos = float(np.sum(delta * target) / (dn * tn)) if dn > 0 and tn > 0 else 0.0
        out.append(AlignmentResult(i, residual, pred, cos, z, dn))
    return out
