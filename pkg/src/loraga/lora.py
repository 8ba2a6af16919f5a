"""LoRA adapters, the five ablation initializations, and scaling constants.

An adapted layer computes ``y = w_frozen @ x + eta * b @ (a @ x) + bias``.
Whenever an initialization makes ``b @ a`` non-zero, ``w_frozen`` is set to
``W0 - eta * b @ a`` so the layer still computes ``W0 @ x`` at step zero.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .linalg import Matrix, as_matrix, svd
from .nn import LinearLayer, Network, ShapeError, kaiming_uniform
from .storage import load_lga1, save_lga1

SCHEMES = ("vanilla", "gaussian", "gaussian_so", "grad_approx_ga", "lora_ga")
GRADIENT_SCHEMES = ("grad_approx_ga", "lora_ga")
GAMMA_SCHEMES = ("gaussian_so", "lora_ga")


@dataclass(frozen=True)
class InitScheme:
    kind: str
    alpha: float = 16.0
    rank: int = 8
    gamma: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCHEMES:
            raise ValueError(f"unknown scheme {self.kind!r}; expected one of {SCHEMES}")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.kind in GAMMA_SCHEMES:
            if self.gamma is None or self.gamma <= 0:
                raise ValueError(f"scheme {self.kind!r} needs a positive gamma")
        elif self.gamma is not None:
            raise ValueError(f"scheme {self.kind!r} does not take gamma")

    @property
    def needs_gradient(self) -> bool:
        return self.kind in GRADIENT_SCHEMES


@dataclass(frozen=True)
class ScalingConstants:
    eta: float
    factor: float
    zeta: Optional[float] = None


def compute_scaling(kind: str, alpha: float, rank: int, gamma: Optional[float] = None,
                    d_out: Optional[int] = None) -> ScalingConstants:
    """Adapter scale ``eta``, factor multiplier and (for lora_ga) target ratio ``zeta``.

    ``factor`` is what the scheme multiplies its raw A/B draws by:
    ``d_out**0.25 / sqrt(gamma)`` for gaussian_so and ``d_out**0.25 / gamma``
    for lora_ga, the latter making ``sqrt(zeta) / eta == factor`` exactly.
    """
    if kind not in SCHEMES:
        raise ValueError(f"unknown scheme {kind!r}")
    if rank < 1 or alpha <= 0:
        raise ValueError("need rank >= 1 and alpha > 0")
    if kind in GAMMA_SCHEMES:
        if gamma is None or gamma <= 0:
            raise ValueError(f"scheme {kind!r} needs a positive gamma")
        if d_out is None or d_out < 1:
            raise ValueError(f"scheme {kind!r} needs d_out")
    if kind in ("vanilla", "gaussian", "grad_approx_ga"):
        return ScalingConstants(eta=alpha / rank, factor=1.0)
    eta = alpha / math.sqrt(rank)
    if kind == "gaussian_so":
        return ScalingConstants(eta=eta, factor=d_out ** 0.25 / math.sqrt(gamma))
    zeta = (alpha ** 2 / gamma ** 2) * math.sqrt(d_out / rank ** 2)
    return ScalingConstants(eta=eta, factor=d_out ** 0.25 / gamma, zeta=zeta)


@dataclass
class LoraAdapter:
    a: Matrix
    b: Matrix
    alpha: float
    eta: float
    a_init: Matrix = field(default=None, repr=False)
    b_init: Matrix = field(default=None, repr=False)

    def __post_init__(self):
        self.a = as_matrix(self.a, "A")
        self.b = as_matrix(self.b, "B")
        if self.a.shape[0] != self.b.shape[1]:
            raise ShapeError(f"A is {self.a.shape}, B is {self.b.shape}: ranks differ")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.a_init is None:
            self.a_init = self.a.copy()
        if self.b_init is None:
            self.b_init = self.b.copy()

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    def delta(self) -> Matrix:
        return self.eta * (self.b @ self.a)

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.a.copy(), self.b.copy(), self.alpha, self.eta,
                           self.a_init.copy(), self.b_init.copy())


@dataclass
class AdaptedLayer:
    w_frozen: Matrix
    adapter: LoraAdapter
    bias: Optional[np.ndarray] = None
    scheme: Optional[InitScheme] = None

    def __post_init__(self):
        self.w_frozen = as_matrix(self.w_frozen, "frozen weight")
        d_out, d_in = self.w_frozen.shape
        if self.adapter.a.shape[1] != d_in or self.adapter.b.shape[0] != d_out:
            raise ShapeError(
                f"adapter A{self.adapter.a.shape}/B{self.adapter.b.shape} "
                f"does not fit weight {self.w_frozen.shape}")

    @property
    def d_out(self) -> int:
        return self.w_frozen.shape[0]

    @property
    def d_in(self) -> int:
        return self.w_frozen.shape[1]

    def weight(self) -> Matrix:
        return self.w_frozen + self.adapter.delta()

    def forward(self, x: Matrix) -> Matrix:
        ad = self.adapter
        y = self.w_frozen @ x + ad.eta * (ad.b @ (ad.a @ x))
        if self.bias is not None:
            y = y + self.bias[:, None]
        return y

    def propagate(self, delta: Matrix) -> Matrix:
        ad = self.adapter
        return self.w_frozen.T @ delta + ad.eta * (ad.a.T @ (ad.b.T @ delta))

    def copy(self) -> "AdaptedLayer":
        return AdaptedLayer(self.w_frozen.copy(), self.adapter.copy(),
                            None if self.bias is None else self.bias.copy(), self.scheme)

    def save(self, directory, prefix: str = "") -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        ad = self.adapter
        for name, m in (("a", ad.a), ("b", ad.b), ("a_init", ad.a_init),
                        ("b_init", ad.b_init), ("w_frozen", self.w_frozen)):
            save_lga1(d / f"{prefix}{name}.lga1", m)
        s = self.scheme
        manifest = {
            "rank": ad.rank, "alpha": ad.alpha, "eta": ad.eta,
            "gamma": None if s is None else s.gamma,
            "scheme": None if s is None else s.kind,
            "seed": None if s is None else s.seed,
        }
        (d / f"{prefix}adapter.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory, prefix: str = "", bias=None) -> "AdaptedLayer":
        d = Path(directory)
        m = json.loads((d / f"{prefix}adapter.json").read_text())
        ad = LoraAdapter(load_lga1(d / f"{prefix}a.lga1"), load_lga1(d / f"{prefix}b.lga1"),
                         m["alpha"], m["eta"], load_lga1(d / f"{prefix}a_init.lga1"),
                         load_lga1(d / f"{prefix}b_init.lga1"))
        scheme = None
        if m["scheme"] is not None:
            scheme = InitScheme(m["scheme"], m["alpha"], m["rank"], m["gamma"], m["seed"])
        return cls(load_lga1(d / f"{prefix}w_frozen.lga1"), ad, bias, scheme)


def default_partition(rank: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """0-based (indices for A's right vectors, indices for B's left vectors)."""
    return tuple(range(rank)), tuple(range(rank, 2 * rank))


def _check_partition(partition, rank: int):
    ia, ib = (tuple(int(i) for i in p) for p in partition)
    if len(ia) != rank or len(ib) != rank or sorted(ia + ib) != list(range(2 * rank)):
        raise ValueError(f"partition {partition} must split 0..{2 * rank - 1} into two sets of {rank}")
    return ia, ib


def initialize(layer: LinearLayer, scheme: InitScheme, grad=None,
               partition: Optional[Sequence[Sequence[int]]] = None) -> AdaptedLayer:
    """Attach an adapter to ``layer`` per ``scheme``, preserving its output."""
    w0 = layer.weight()
    d_out, d_in = w0.shape
    r = scheme.rank
    sc = compute_scaling(scheme.kind, scheme.alpha, r, scheme.gamma, d_out)
    rng = np.random.default_rng(scheme.seed)

    if scheme.needs_gradient:
        if grad is None:
            raise ValueError(f"scheme {scheme.kind!r} requires the layer gradient")
        grad = as_matrix(grad, "gradient")
        if grad.shape != w0.shape:
            raise ShapeError(f"gradient shape {grad.shape} != weight shape {w0.shape}")
        if 2 * r > min(d_in, d_out):
            raise ValueError(f"rank {r}: 2r={2 * r} exceeds min(d_in, d_out)={min(d_in, d_out)}")
        ia, ib = _check_partition(partition or default_partition(r), r)
        f = svd(grad)
        a = sc.factor * f.v[:, list(ia)].T
        b = sc.factor * f.u[:, list(ib)]
    else:
        if r > min(d_in, d_out):
            raise ValueError(f"rank {r} exceeds min(d_in, d_out)={min(d_in, d_out)}")
        if scheme.kind == "vanilla":
            a = kaiming_uniform(r, d_in, rng)
            b = np.zeros((d_out, r))
        else:
            a = rng.normal(0.0, 1.0 / math.sqrt(d_out), size=(r, d_in))
            b = rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_out, r))
            a *= sc.factor
            b *= sc.factor

    adapter = LoraAdapter(a, b, scheme.alpha, sc.eta)
    w_frozen = w0.copy() if not b.any() else w0 - adapter.delta()
    bias = None if layer.bias is None else layer.bias.copy()
    return AdaptedLayer(w_frozen, adapter, bias, scheme)


def adapted_forward(layer: AdaptedLayer, x) -> Matrix:
    x = as_matrix(x, "input")
    if x.shape[0] != layer.d_in:
        raise ShapeError(f"expected {layer.d_in} input rows, got {x.shape[0]}")
    return layer.forward(x)


def adapter_gradients(layer: AdaptedLayer, upstream, x) -> tuple[Matrix, Matrix, Matrix]:
    """Backprop through the factored path for one adapted layer.

    ``upstream`` is dL/dy for the batch (already carrying the 1/n of the mean
    loss). Returns ``(grad_a, grad_b, grad_w_eff)`` where the last one is the
    gradient w.r.t. the effective weight ``w_frozen + eta*B@A``.
    """
    upstream = as_matrix(upstream, "upstream gradient")
    x = as_matrix(x, "input")
    if upstream.shape[0] != layer.d_out or x.shape[0] != layer.d_in:
        raise ShapeError(f"upstream {upstream.shape} / input {x.shape} do not fit "
                         f"layer ({layer.d_out}, {layer.d_in})")
    if upstream.shape[1] != x.shape[1]:
        raise ShapeError("upstream and input batch sizes differ")
    ad = layer.adapter
    h = ad.a @ x
    dh = ad.eta * (ad.b.T @ upstream)
    grad_a = dh @ x.T
    grad_b = ad.eta * (upstream @ h.T)
    grad_w = upstream @ x.T
    return grad_a, grad_b, grad_w


def factored_gradients(adapter: LoraAdapter, grad_w) -> tuple[Matrix, Matrix]:
    """Adapter gradients as linear maps of the effective-weight gradient."""
    return adapter.eta * (adapter.b.T @ grad_w), adapter.eta * (grad_w @ adapter.a.T)


def adapt_network(net: Network, scheme: InitScheme, grads: Optional[Sequence] = None,
                  layers: Optional[Sequence[int]] = None, partition=None) -> Network:
    """Return a copy of ``net`` whose selected layers carry adapters.

    Each layer gets its own seed derived from ``scheme.seed`` and its index.
    """
    targets = range(len(net.layers)) if layers is None else layers
    new_layers = [layer.copy() for layer in net.layers]
    for i in targets:
        layer_scheme = InitScheme(scheme.kind, scheme.alpha, scheme.rank, scheme.gamma,
                                  _derive_seed(scheme.seed, i))
        g = None if grads is None else grads[i]
        new_layers[i] = initialize(net.layers[i], layer_scheme, g, partition)
    return Network(net.spec, new_layers)


def _derive_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def save_adapted_network(net: Network, directory) -> None:
    d = Path(directory)
    net.save(d)
    for i, layer in enumerate(net.layers):
        if isinstance(layer, AdaptedLayer):
            layer.save(d, prefix=f"layer{i}_lora_")


def load_adapted_network(directory) -> Network:
    d = Path(directory)
    base = Network.load(d)
    layers = []
    for i, layer in enumerate(base.layers):
        if (d / f"layer{i}_lora_adapter.json").exists():
            layers.append(AdaptedLayer.load(d, prefix=f"layer{i}_lora_", bias=layer.bias))
        else:
            layers.append(layer)
    return Network(base.spec, layers)
