"""Desk-scale datasets. Samples are columns, as everywhere else."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .linalg import Matrix
from .nn import LinearLayer, Network, NetworkSpec

KINDS = ("teacher_student", "blobs", "csv")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    """What to generate.

    teacher_student: ``dims`` is the teacher's layer sizes. The teacher is a
    random network seeded by ``teacher_seed``; with ``shift_rank > 0`` each of
    its weights is moved by a random rank-``shift_rank`` matrix of Frobenius
    norm ``shift_scale * ||W||``, which makes a student initialised with the
    same seed a "pretrained" model that needs a low-rank correction.

    blobs: ``classes`` Gaussian clusters in ``dim`` dimensions with one-hot targets.

    csv: ``path`` with a header row; ``target_column`` is a name or 0-based index.
    """

    kind: str
    n_samples: int = 256
    seed: int = 0
    dims: tuple = (64, 64, 64)
    noise_sigma: float = 0.0
    activation: str = "tanh"
    teacher_seed: int = 0
    shift_rank: int = 0
    shift_scale: float = 0.5
    classes: int = 3
    dim: int = 2
    spread: float = 1.0
    path: Optional[str] = None
    target_column: Union[str, int, None] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown dataset kind {self.kind!r}; expected one of {KINDS}")
        if self.n_samples < 1:
            raise DataError("n_samples must be >= 1")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be >= 0")
        if self.spread < 0:
            raise DataError("spread must be >= 0")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.kind == "csv" and (self.path is None or self.target_column is None):
            raise DataError("csv datasets need path and target_column")


@dataclass
class Dataset:
    inputs: Matrix
    targets: Matrix
    teacher: Optional[Network] = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[:, idx], self.targets[:, idx], self.teacher)


def teacher_network(spec: DatasetSpec) -> Network:
    net = Network.from_spec(NetworkSpec(spec.dims, spec.activation, "mse", spec.teacher_seed))
    if spec.shift_rank <= 0:
        return net
    rng = np.random.default_rng([spec.teacher_seed, 0x5F1F7])
    layers = []
    for layer in net.layers:
        d_out, d_in = layer.w.shape
        k = min(spec.shift_rank, d_out, d_in)
        shift = rng.standard_normal((d_out, k)) @ rng.standard_normal((k, d_in))
        shift *= spec.shift_scale * np.linalg.norm(layer.w) / np.linalg.norm(shift)
        layers.append(LinearLayer(layer.w + shift, layer.bias))
    return Network(net.spec, layers)


def generate(spec: DatasetSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "teacher_student":
        teacher = teacher_network(spec)
        x = rng.standard_normal((spec.dims[0], spec.n_samples))
        y = teacher.predict(x)
        if spec.noise_sigma > 0:
            y = y + spec.noise_sigma * rng.standard_normal(y.shape)
        return Dataset(x, y, teacher)
    if spec.kind == "blobs":
        centers = rng.standard_normal((spec.dim, spec.classes)) * 3.0
        labels = rng.integers(0, spec.classes, size=spec.n_samples)
        x = centers[:, labels] + spec.spread * rng.standard_normal((spec.dim, spec.n_samples))
        t = np.zeros((spec.classes, spec.n_samples))
        t[labels, np.arange(spec.n_samples)] = 1.0
        return Dataset(x, t)
    x, t = read_csv(spec.path, spec.target_column)
    if spec.n_samples < x.shape[1]:
        keep = np.sort(rng.choice(x.shape[1], size=spec.n_samples, replace=False))
        x, t = x[:, keep], t[:, keep]
    return Dataset(x, t)


def split(dataset: Dataset, fractions: Sequence[float], seed: int) -> tuple[Dataset, ...]:
    """Seeded shuffle, then consecutive chunks sized by ``fractions``."""
    fr = np.asarray(fractions, dtype=np.float64)
    if (fr < 0).any() or abs(fr.sum() - 1.0) > 1e-9:
        raise DataError(f"fractions {list(fractions)} must be non-negative and sum to 1")
    n = len(dataset)
    sizes = np.floor(fr * n + 1e-9).astype(int)
    sizes[-1] = n - sizes[:-1].sum()
    if (sizes < 1).any():
        raise DataError(f"split sizes {sizes.tolist()} leave an empty part")
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return tuple(dataset.subset(perm[a:b]) for a, b in zip(bounds[:-1], bounds[1:]))


def read_csv(path, target_column) -> tuple[Matrix, Matrix]:
    """Numeric CSV with a header row. Returns (inputs, targets) as columns."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if isinstance(target_column, int):
            if not 0 <= target_column < len(header):
                raise DataError(f"{path}: target column index {target_column} out of range")
            col = target_column
        else:
            if target_column not in header:
                raise DataError(f"{path}: target column {target_column!r} not in header {header}")
            col = header.index(target_column)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    data = np.asarray(rows, dtype=np.float64)
    if not np.isfinite(data).all():
        r = int(np.argwhere(~np.isfinite(data))[0][0])
        raise DataError(f"{path}:{r + 2}: non-finite value")
    t = data[:, [col]].T
    x = np.delete(data, col, axis=1).T
    return np.ascontiguousarray(x), np.ascontiguousarray(t)


def write_csv(path, inputs: Matrix, targets: Matrix, names: Optional[Sequence[str]] = None,
              target_name: str = "target") -> None:
    """Inverse of :func:`read_csv` for a single target row (target written last)."""
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64).reshape(1, -1)
    names = list(names) if names is not None else [f"x{i}" for i in range(inputs.shape[0])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names + [target_name])
        for j in range(inputs.shape[1]):
            w.writerow([repr(float(v)) for v in inputs[:, j]] + [repr(float(targets[0, j]))])
