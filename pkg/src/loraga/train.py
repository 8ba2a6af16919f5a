"""Optimizers, learning-rate schedules and the fine-tuning loop."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .linalg import Matrix, as_matrix
from .lora import AdaptedLayer, factored_gradients
from .nn import Network, backward_streaming, forward

OPTIMIZERS = ("sgd", "adamw")
SCHEDULES = ("constant", "cosine_with_warmup")
TRAINABLE = ("adapters_only", "full")


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, step: int, where: str = ""):
        self.step = step
        super().__init__(f"non-finite gradient at step {step}{': ' + where if where else ''}")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float, log: "MetricsLog"):
        self.step = step
        self.loss = loss
        self.log = log
        super().__init__(f"training diverged at step {step} (loss={loss!r})")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adamw"
    lr: float = 1e-3
    warmup_ratio: float = 0.03
    schedule: str = "cosine_with_warmup"
    steps: int = 200
    batch_size: int = 32
    seed: int = 0
    trainable: str = "adapters_only"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    smoothing_window: int = 10
    divergence_limit: float = 1e6

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.trainable not in TRAINABLE:
            raise ValueError(f"trainable must be one of {TRAINABLE}")
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if not 0 <= self.warmup_ratio < 1:
            raise ValueError("warmup_ratio must lie in [0, 1)")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def warmup_steps(cfg: TrainConfig) -> int:
    return math.ceil(cfg.warmup_ratio * cfg.steps)


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to ``cfg.lr`` then (optionally) half-cosine decay."""
    if not 0 <= step < cfg.steps:
        raise ValueError(f"step {step} outside [0, {cfg.steps})")
    warm = warmup_steps(cfg)
    if step < warm:
        return cfg.lr * step / warm
    if cfg.schedule == "constant":
        return cfg.lr
    decay = cfg.steps - warm
    progress = (step - warm) / decay
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def _check_grad(g, step: int, where: str = "") -> None:
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradientError(step, where)


def sgd_step(params: Sequence, grads: Sequence, lr: float, step: int = 0) -> list:
    """Return ``p - lr * g`` for each pair."""
    out = []
    for i, (p, g) in enumerate(zip(params, grads, strict=True)):
        p, g = np.asarray(p, dtype=np.float64), np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise ValueError(f"param {i}: shape {p.shape} != grad shape {g.shape}")
        _check_grad(g, step, f"param {i}")
        out.append(p - lr * g)
    return out


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence) -> "AdamState":
        return cls([np.zeros_like(np.asarray(p, float)) for p in params],
                   [np.zeros_like(np.asarray(p, float)) for p in params])


def adamw_step(state: AdamState, params: Sequence, grads: Sequence, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0) -> tuple[AdamState, list]:
    """Decoupled-weight-decay Adam with bias correction (functional form)."""
    t = state.t + 1
    new_m, new_v, new_p = [], [], []
    for i, (p, g, m, v) in enumerate(zip(params, grads, state.m, state.v, strict=True)):
        p, g = np.asarray(p, dtype=np.float64), np.asarray(g, dtype=np.float64)
        _check_grad(g, t - 1, f"param {i}")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p = p * (1 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m.append(m)
        new_v.append(v)
        new_p.append(p)
    return AdamState(new_m, new_v, t), new_p


class _Optimizer:
    """Per-parameter in-place updater keyed by (layer, name)."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.state: dict = {}

    def update(self, key, param: np.ndarray, grad: np.ndarray, lr: float, step: int) -> None:
        _check_grad(grad, step, f"layer {key[0]} {key[1]}")
        cfg = self.cfg
        if cfg.optimizer == "sgd":
            param -= lr * grad
            return
        st = self.state.get(key)
        if st is None:
            st = self.state[key] = AdamState.zeros_like([param])
        st, (new,) = adamw_step(st, [param], [grad], lr, cfg.beta1, cfg.beta2, cfg.eps,
                                cfg.weight_decay)
        self.state[key] = st
        param[...] = new


def train_step(net: Network, x: Matrix, t: Matrix, opt: _Optimizer, lr: float,
               trainable: str, step: int = 0) -> float:
    """One forward/backward/update. Returns the pre-update batch loss.

    Layers are updated as the backward sweep reaches them; propagation to
    earlier layers is computed before each update, so this equals a
    simultaneous update of all parameters.
    """
    trace = forward(net, x, t)

    def visit(i, grad_w, grad_b):
        layer = net.layers[i]
        if isinstance(layer, AdaptedLayer):
            ga, gb = factored_gradients(layer.adapter, grad_w)
            opt.update((i, "a"), layer.adapter.a, ga, lr, step)
            opt.update((i, "b"), layer.adapter.b, gb, lr, step)
        elif trainable == "full":
            opt.update((i, "w"), layer.w, grad_w, lr, step)
            if grad_b is not None:
                opt.update((i, "bias"), layer.bias, grad_b, lr, step)

    backward_streaming(trace, visit)
    return trace.loss


def adapter_sgd_step(net: Network, x, t, lr: float) -> float:
    """A single plain-SGD step on every adapter (the theory's update rule)."""
    opt = _Optimizer(TrainConfig(optimizer="sgd", lr=lr, steps=1))
    return train_step(net, as_matrix(x), as_matrix(t), opt, lr, "adapters_only")


@dataclass
class MetricsLog:
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    smoothing_window: int = 10
    events: list = field(default_factory=list)
    eval_loss: Optional[float] = None
    diverged: bool = False

    def record(self, step: int, loss: float, lr: float) -> None:
        if self.steps and step <= self.steps[-1]:
            raise ValueError("steps must be strictly increasing")
        self.steps.append(step)
        self.losses.append(float(loss))
        self.lrs.append(float(lr))

    def smoothed(self) -> np.ndarray:
        """Trailing moving average (shorter window over the first few steps)."""
        x = np.asarray(self.losses, dtype=np.float64)
        if x.size == 0:
            return x
        c = np.concatenate([[0.0], np.cumsum(x)])
        idx = np.arange(1, x.size + 1)
        lo = np.maximum(idx - self.smoothing_window, 0)
        return (c[idx] - c[lo]) / (idx - lo)

    def steps_to_threshold(self, tau: float) -> Optional[int]:
        below = np.nonzero(self.smoothed() < tau)[0]
        return int(self.steps[below[0]]) if below.size else None

    @property
    def final_loss(self) -> Optional[float]:
        return self.losses[-1] if self.losses else None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "lr"])
        for s, l, r in zip(self.steps, self.losses, self.lrs):
            w.writerow([s, repr(l), repr(r)])
        return buf.getvalue()

    def summary(self, tau: Optional[float] = None) -> dict:
        out = {
            "n_steps": len(self.steps),
            "final_loss": self.final_loss,
            "eval_loss": self.eval_loss,
            "smoothing_window": self.smoothing_window,
            "diverged": self.diverged,
            "events": list(self.events),
        }
        if tau is not None:
            out["threshold"] = tau
            out["steps_to_threshold"] = self.steps_to_threshold(tau)
        return out

    def to_json(self, tau: Optional[float] = None) -> str:
        return json.dumps(self.summary(tau), indent=2, sort_keys=True)


def epoch_batches(n: int, batch_size: int, seed: int):
    """Endless stream of (epoch, index array); reshuffled each epoch, tail dropped."""
    bs = min(batch_size, n)
    epoch = 0
    while True:
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        for start in range(0, n - bs + 1, bs):
            yield epoch, perm[start:start + bs]
        epoch += 1


def train(net: Network, x, t, cfg: TrainConfig, eval_data: Optional[tuple] = None) -> MetricsLog:
    """Fine-tune ``net`` in place and return the per-step log.

    Deterministic for fixed (weights, data, cfg). Raises
    :class:`TrainingDiverged` (carrying the partial log) if the batch loss
    becomes non-finite or exceeds ``cfg.divergence_limit``.
    """
    x = as_matrix(x, "input")
    t = as_matrix(t, "target")
    if cfg.trainable == "full" and any(isinstance(l, AdaptedLayer) for l in net.layers):
        raise ValueError("full fine-tuning expects a network without adapters")
    log = MetricsLog(smoothing_window=cfg.smoothing_window)
    log.events.append(f"data order: per-epoch shuffle seeded by (seed={cfg.seed}, epoch)")
    opt = _Optimizer(cfg)
    batches = epoch_batches(x.shape[1], cfg.batch_size, cfg.seed)
    for step in range(cfg.steps):
        _, idx = next(batches)
        lr = lr_at(cfg, step)
        try:
            loss = train_step(net, x[:, idx], t[:, idx], opt, lr, cfg.trainable, step)
        except FloatingPointError as exc:
            log.diverged = True
            log.events.append(f"step {step}: {exc}")
            raise TrainingDiverged(step, math.nan, log) from exc
        if not math.isfinite(loss) or loss > cfg.divergence_limit:
            log.diverged = True
            log.events.append(f"step {step}: diverged with loss {loss!r}")
            raise TrainingDiverged(step, loss, log)
        log.record(step, loss, lr)
    if eval_data is not None:
        ex, et = eval_data
        log.eval_loss = forward(net, ex, et).loss
    return log


def trainable_snapshot(net: Network) -> list:
    """Copies of every frozen weight, for integrity checks."""
    return [l.w_frozen.copy() if isinstance(l, AdaptedLayer) else l.w.copy() for l in net.layers]
