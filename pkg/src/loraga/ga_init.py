"""Gradient-approximation initialization of LoRA adapters.

The full-fine-tune gradient of every target layer is estimated on a small
sampled batch, either in one streaming backward sweep or accumulated over
micro-batches, and its singular vectors seed the adapters.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .analysis import coverage, criterion, layer_zeta, predicted_residual
from .linalg import as_matrix, singular_values
from .lora import AdaptedLayer, InitScheme, _check_partition, _derive_seed, default_partition, initialize
from .nn import GradientSnapshot, LiveGradientMeter, Network, backward_streaming, forward


@dataclass(frozen=True)
class GaInitConfig:
    rank: int = 8
    alpha: float = 16.0
    gamma: float = 16.0
    sampled_batch_size: int = 8
    micro_batch_size: Optional[int] = None
    seed: int = 0
    partition: Optional[tuple] = None
    exclude_layers: tuple = ()
    scheme: str = "lora_ga"

    def __post_init__(self):
        n = self.sampled_batch_size
        b = self.micro_batch
        if n < 1:
            raise ValueError("sampled_batch_size must be >= 1")
        if not 1 <= b <= n or n % b:
            raise ValueError(f"micro_batch_size {b} must divide sampled_batch_size {n}")
        if self.scheme not in ("lora_ga", "grad_approx_ga"):
            raise ValueError("gradient initialization supports lora_ga and grad_approx_ga")
        if self.partition is not None:
            _check_partition(self.partition, self.rank)

    @property
    def micro_batch(self) -> int:
        return self.sampled_batch_size if self.micro_batch_size is None else self.micro_batch_size

    def init_scheme(self, seed: int) -> InitScheme:
        gamma = self.gamma if self.scheme == "lora_ga" else None
        return InitScheme(self.scheme, self.alpha, self.rank, gamma, seed)


def estimate_gradients(net: Network, x, t, meter: Optional[LiveGradientMeter] = None) -> GradientSnapshot:
    """Full-batch weight gradients via one streaming sweep."""
    x = as_matrix(x, "input")
    if x.shape[1] < 1:
        raise ValueError("empty batch")
    n = len(net.layers)
    weights, biases = [None] * n, [None] * n

    def keep(i, gw, gb):
        weights[i] = gw.copy()
        biases[i] = gb

    backward_streaming(forward(net, x, t), keep, meter)
    return GradientSnapshot(weights, biases)


def estimate_gradients_accumulated(net: Network, x, t, micro_batch: int,
                                   meter: Optional[LiveGradientMeter] = None) -> GradientSnapshot:
    """Average of micro-batch gradients, each weighted by b/n.

    With batch-mean losses this is the full-batch gradient up to rounding.
    """
    x = as_matrix(x, "input")
    t = as_matrix(t, "target")
    n = x.shape[1]
    if n < 1:
        raise ValueError("empty batch")
    if micro_batch < 1 or n % micro_batch:
        raise ValueError(f"micro-batch size {micro_batch} does not divide batch size {n}")
    if micro_batch == n:
        return estimate_gradients(net, x, t, meter)
    weight = micro_batch / n
    avg_w = [np.zeros_like(l.weight()) for l in net.layers]
    avg_b = [None if l.bias is None else np.zeros_like(l.bias) for l in net.layers]

    def accumulate(i, gw, gb):
        avg_w[i] += gw * weight
        if gb is not None:
            avg_b[i] += gb * weight

    for start in range(0, n, micro_batch):
        sl = slice(start, start + micro_batch)
        backward_streaming(forward(net, x[:, sl], t[:, sl]), accumulate, meter)
    return GradientSnapshot(avg_w, avg_b)


@dataclass
class InitReport:
    scheme: str
    seed: int
    batch_indices: list
    micro_batch_size: int
    layers: list = field(default_factory=list)
    peak_live_gradients: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def sample_batch(n_available: int, n: int, seed: int) -> np.ndarray:
    if n > n_available:
        raise ValueError(f"cannot sample {n} examples from {n_available}")
    return np.sort(np.random.default_rng([seed, 0x6A]).choice(n_available, size=n, replace=False))


def _layer_entry(index, layer: AdaptedLayer, grad) -> dict:
    r = layer.adapter.rank
    ad = layer.adapter
    zeta = layer_zeta(layer)
    s = singular_values(grad)
    return {
        "layer": index,
        "d_in": layer.d_in,
        "d_out": layer.d_out,
        "r": r,
        "eta": ad.eta,
        "gamma": None if layer.scheme is None else layer.scheme.gamma,
        "zeta": zeta,
        "singular_values": [float(v) for v in s[: 4 * r]],
        "coverage_2r": coverage(s, min(2 * r, s.size)) if s.any() else 0.0,
        "criterion_residual": criterion(grad, ad.a, ad.b, ad.eta, zeta),
        "predicted_residual": predicted_residual(grad, r, zeta),
    }


def gradient_initialize(net: Network, config: GaInitConfig, x, t,
                        meter: Optional[LiveGradientMeter] = None,
                        batch_indices: Optional[Sequence[int]] = None) -> tuple[Network, InitReport]:
    """Build gradient-based adapters for every target layer of ``net``.

    A batch of ``config.sampled_batch_size`` columns is drawn from ``(x, t)``
    with ``config.seed`` unless ``batch_indices`` is given. The returned
    network computes the same function as ``net``; ``net`` itself is untouched.
    """
    x = as_matrix(x, "input")
    t = as_matrix(t, "target")
    targets = [i for i in range(len(net.layers)) if i not in set(config.exclude_layers)]
    for i in targets:
        layer = net.layers[i]
        if 2 * config.rank > min(layer.d_in, layer.d_out):
            raise ValueError(f"layer {i} ({layer.d_out}x{layer.d_in}) is too small for "
                             f"rank {config.rank} (needs 2r <= min dims)")
    if batch_indices is None:
        idx = sample_batch(x.shape[1], config.sampled_batch_size, config.seed)
    else:
        idx = np.asarray(batch_indices, dtype=int)
        if idx.size != config.sampled_batch_size:
            raise ValueError("batch_indices length must equal sampled_batch_size")
    xb, tb = x[:, idx], t[:, idx]
    partition = config.partition or default_partition(config.rank)
    meter = meter or LiveGradientMeter()
    report = InitReport(config.scheme, config.seed, [int(i) for i in idx], config.micro_batch)
    new_layers = list(net.layers)
    entries = {}

    def build(i, grad):
        if i not in targets:
            return
        scheme = config.init_scheme(_derive_seed(config.seed, i))
        adapted = initialize(net.layers[i], scheme, grad, partition)
        new_layers[i] = adapted
        entries[i] = _layer_entry(i, adapted, grad)

    if config.micro_batch == config.sampled_batch_size:
        # one sweep; each gradient is consumed and dropped before the next exists
        backward_streaming(forward(net, xb, tb), lambda i, gw, gb: build(i, gw), meter)
    else:
        snap = estimate_gradients_accumulated(net, xb, tb, config.micro_batch, meter)
        for i in range(len(net.layers) - 1, -1, -1):
            build(i, snap.weights[i])
            snap.weights[i] = None
    report.layers = [entries[i] for i in sorted(entries)]
    report.peak_live_gradients = meter.peak
    out = Network(net.spec, [l if isinstance(l, AdaptedLayer) else l.copy() for l in new_layers])
    return out, report


def lora_ga_initialize(net: Network, config: GaInitConfig, x, t,
                       meter: Optional[LiveGradientMeter] = None,
                       batch_indices=None) -> tuple[Network, InitReport]:
    if config.scheme != "lora_ga":
        raise ValueError("config.scheme must be 'lora_ga'")
    return gradient_initialize(net, config, x, t, meter, batch_indices)
