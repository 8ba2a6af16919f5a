"""Small feed-forward networks with hand-written backpropagation.

Samples are columns: a batch of ``n`` inputs is a ``d_in x n`` matrix and a
layer computes ``y = W @ x + b``. Losses are averaged over the batch, so a
gradient never depends on the batch size through its scale.
"""

from __future__ import annotations

import json
import weakref
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .linalg import Matrix, as_matrix, check_finite
from .storage import load_lga1, save_lga1

ACTIVATIONS = ("relu", "tanh", "identity")
LOSSES = ("mse", "softmax_cross_entropy")


class ShapeError(ValueError):
    pass


class StaleTraceError(RuntimeError):
    pass


@dataclass
class LinearLayer:
    w: Matrix
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        self.w = as_matrix(self.w, "weight")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
            if self.bias.shape[0] != self.w.shape[0]:
                raise ShapeError(f"bias length {self.bias.shape[0]} != d_out {self.w.shape[0]}")

    @property
    def d_out(self) -> int:
        return self.w.shape[0]

    @property
    def d_in(self) -> int:
        return self.w.shape[1]

    def weight(self) -> Matrix:
        return self.w

    def forward(self, x: Matrix) -> Matrix:
        y = self.w @ x
        if self.bias is not None:
            y = y + self.bias[:, None]
        return y

    def propagate(self, delta: Matrix) -> Matrix:
        """Gradient w.r.t. the layer input given the gradient w.r.t. its output."""
        return self.w.T @ delta

    def copy(self) -> "LinearLayer":
        return LinearLayer(self.w.copy(), None if self.bias is None else self.bias.copy())


@dataclass(frozen=True)
class NetworkSpec:
    layer_dims: tuple[int, ...]
    activation: str = "tanh"
    loss: str = "mse"
    init_seed: int = 0
    bias: bool = True

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ValueError("layer_dims needs at least an input and an output size")
        if any(d < 1 for d in dims):
            raise ValueError(f"layer dims must be positive, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1


def kaiming_uniform(d_out: int, d_in: int, rng: np.random.Generator) -> Matrix:
    bound = np.sqrt(3.0 / d_in)
    return rng.uniform(-bound, bound, size=(d_out, d_in))


class Network:
    """A stack of (possibly adapted) linear layers with a shared activation."""

    def __init__(self, spec: NetworkSpec, layers: Sequence):
        if len(layers) != spec.n_layers:
            raise ShapeError(f"spec has {spec.n_layers} layers, got {len(layers)}")
        for i, layer in enumerate(layers):
            want = (spec.layer_dims[i + 1], spec.layer_dims[i])
            if (layer.d_out, layer.d_in) != want:
                raise ShapeError(f"layer {i}: weight shape {(layer.d_out, layer.d_in)} != {want}")
        self.spec = spec
        self.layers = list(layers)

    @classmethod
    def from_spec(cls, spec: NetworkSpec) -> "Network":
        rng = np.random.default_rng(spec.init_seed)
        layers = []
        for d_in, d_out in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
            w = kaiming_uniform(d_out, d_in, rng)
            layers.append(LinearLayer(w, np.zeros(d_out) if spec.bias else None))
        return cls(spec, layers)

    def copy(self) -> "Network":
        return Network(self.spec, [layer.copy() for layer in self.layers])

    def predict(self, x) -> Matrix:
        h = as_matrix(x, "input")
        for i, layer in enumerate(self.layers):
            _check_input(layer, h, i)
            h = layer.forward(h)
            if i < len(self.layers) - 1:
                h = activate(self.spec.activation, h)
        return h

    def weights(self) -> list[Matrix]:
        return [layer.weight() for layer in self.layers]

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for i, layer in enumerate(self.layers):
            save_lga1(d / f"layer{i}_w.lga1", layer.weight())
            if layer.bias is not None:
                save_lga1(d / f"layer{i}_b.lga1", layer.bias[None, :])
        (d / "manifest.json").write_text(json.dumps(asdict(self.spec), indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "Network":
        d = Path(directory)
        raw = json.loads((d / "manifest.json").read_text())
        spec = NetworkSpec(**raw)
        layers = []
        for i in range(spec.n_layers):
            w = load_lga1(d / f"layer{i}_w.lga1")
            bpath = d / f"layer{i}_b.lga1"
            b = load_lga1(bpath).reshape(-1) if bpath.exists() else None
            layers.append(LinearLayer(w, b))
        return cls(spec, layers)


def activate(kind: str, z: Matrix) -> Matrix:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def activation_derivative(kind: str, z: Matrix) -> Matrix:
    if kind == "tanh":
        return 1.0 - np.tanh(z) ** 2
    if kind == "relu":
        return (z > 0).astype(np.float64)
    return np.ones_like(z)


def loss_and_grad(kind: str, y: Matrix, t: Matrix) -> tuple[float, Matrix]:
    """Batch-mean loss and its gradient w.r.t. the network output."""
    n = y.shape[1]
    if kind == "mse":
        r = y - t
        return 0.5 * float(np.sum(r * r)) / n, r / n
    z = y - y.max(axis=0, keepdims=True)
    logp = z - np.log(np.sum(np.exp(z), axis=0, keepdims=True))
    loss = -float(np.sum(t * logp)) / n
    return loss, (np.exp(logp) * t.sum(axis=0, keepdims=True) - t) / n


def _check_input(layer, h: Matrix, index: int) -> None:
    if h.shape[0] != layer.d_in:
        raise ShapeError(f"layer {index}: expected {layer.d_in} input features, got {h.shape[0]}")


@dataclass
class ForwardTrace:
    """Everything backward needs. Consumed by the first backward sweep."""

    layers: tuple
    activation: str
    inputs: list[Matrix]
    pre: list[Matrix]
    output: Matrix
    loss: float
    dloss: Matrix
    consumed: bool = field(default=False, repr=False)


def forward(net: Network, x, t) -> ForwardTrace:
    x = as_matrix(x, "input")
    t = as_matrix(t, "target")
    if x.shape[1] < 1:
        raise ShapeError("batch must contain at least one sample")
    inputs, pre = [], []
    h = x
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        _check_input(layer, h, i)
        inputs.append(h)
        z = layer.forward(h)
        pre.append(z)
        h = activate(net.spec.activation, z) if i < last else z
    if t.shape != h.shape:
        raise ShapeError(f"target shape {t.shape} != output shape {h.shape}")
    loss, dloss = loss_and_grad(net.spec.loss, h, t)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss}")
    return ForwardTrace(tuple(net.layers), net.spec.activation, inputs, pre, h, loss, dloss)


class LiveGradientMeter:
    """Counts weight-gradient matrices that are still alive.

    Each gradient handed out by the streaming sweep is registered with a
    finalizer, so the count drops only when the array is actually freed.
    """

    def __init__(self):
        self.live = 0
        self.peak = 0
        self.issued = 0

    def track(self, arr: np.ndarray) -> None:
        self.live += 1
        self.issued += 1
        self.peak = max(self.peak, self.live)
        weakref.finalize(arr, self._release)

    def _release(self) -> None:
        self.live -= 1


Visitor = Callable[[int, Matrix, Optional[np.ndarray]], None]


def backward_streaming(trace: ForwardTrace, visit: Visitor,
                       meter: Optional[LiveGradientMeter] = None) -> None:
    """Visit ``(layer_index, grad_w, grad_bias)`` from the last layer to the first.

    Only one weight gradient exists at a time unless ``visit`` keeps it.
    """
    if trace.consumed:
        raise StaleTraceError("trace was already consumed by a backward sweep")
    trace.consumed = True
    delta = trace.dloss
    for i in range(len(trace.layers) - 1, -1, -1):
        layer = trace.layers[i]
        grad_w = delta @ trace.inputs[i].T
        if meter is not None:
            meter.track(grad_w)
        grad_b = delta.sum(axis=1) if layer.bias is not None else None
        if i > 0:
            nxt = layer.propagate(delta) * activation_derivative(trace.activation, trace.pre[i - 1])
        else:
            nxt = None
        try:
            visit(i, grad_w, grad_b)
        finally:
            del grad_w
        delta = nxt


@dataclass
class GradientSnapshot:
    weights: list[Matrix]
    biases: list[Optional[np.ndarray]]

    def __len__(self) -> int:
        return len(self.weights)


def backward(trace: ForwardTrace) -> GradientSnapshot:
    n = len(trace.layers)
    weights: list = [None] * n
    biases: list = [None] * n

    def keep(i, gw, gb):
        check_finite(gw, f"gradient of layer {i}")
        weights[i] = gw
        biases[i] = gb

    backward_streaming(trace, keep)
    return GradientSnapshot(weights, biases)


def gradients(net: Network, x, t) -> GradientSnapshot:
    return backward(forward(net, x, t))


def numerical_gradients(net: Network, x, t, step: float = 1e-5) -> list[Matrix]:
    """Central finite differences of the batch loss w.r.t. every effective weight.

    Only meaningful for plain :class:`LinearLayer` stacks (the entries of
    ``w`` are perturbed in place and restored).
    """
    out = []
    for layer in net.layers:
        g = np.empty_like(layer.w)
        for idx in np.ndindex(*layer.w.shape):
            orig = layer.w[idx]
            layer.w[idx] = orig + step
            up = forward(net, x, t).loss
            layer.w[idx] = orig - step
            down = forward(net, x, t).loss
            layer.w[idx] = orig
            g[idx] = (up - down) / (2 * step)
        out.append(g)
    return out
