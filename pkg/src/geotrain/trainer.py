"""Small differentiable models trained with plain SGD.

Models are dense binary classifiers over a flat float64 parameter vector:
logistic regression, or an MLP with one or two tanh hidden layers and a
sigmoid output. Loss is mean binary cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .domain import Architecture, DataConfig, ModelState, TrainConfig


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    name: str = "data"
    partition_of: tuple[str, Fraction] | None = None
    # row indices into the parent dataset, for partitions
    source_index: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.float64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ValueError(f"features {x.shape} and labels {y.shape} do not line up")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def dims(self) -> int:
        return self.features.shape[1]

    def subset(self, idx: np.ndarray, name: str | None = None) -> Dataset:
        return Dataset(self.features[idx], self.labels[idx], name or self.name)


def _unpack(arch: Architecture, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    layers, off = [], 0
    for fan_in, fan_out in arch.layer_sizes:
        w = params[off : off + fan_in * fan_out].reshape(fan_in, fan_out)
        off += fan_in * fan_out
        b = params[off : off + fan_out]
        off += fan_out
        layers.append((w, b))
    return layers


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z))


def _check_batch(model: ModelState, x: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[1] != model.arch.input_dim:
        raise ValueError(f"batch has shape {x.shape}, model expects {model.arch.input_dim} input dims")


def _forward(model: ModelState, x: np.ndarray):
    layers = _unpack(model.arch, model.params)
    acts = [x]
    for w, b in layers[:-1]:
        acts.append(np.tanh(acts[-1] @ w + b))
    w, b = layers[-1]
    z = (acts[-1] @ w + b)[:, 0]
    return layers, acts, z


def forward_loss(model: ModelState, batch: tuple[np.ndarray, np.ndarray]) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and the predicted P(y=1)."""
    x, y = batch
    _check_batch(model, x)
    _, _, z = _forward(model, x)
    # log(1 + e^z) - y z, computed without overflow
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    return loss, _sigmoid(z)


def backward(model: ModelState, batch: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    """Gradient of the mean batch loss with respect to the flat parameter vector."""
    x, y = batch
    _check_batch(model, x)
    layers, acts, z = _forward(model, x)
    delta = ((_sigmoid(z) - y) / x.shape[0])[:, None]
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads.append((acts[i].T @ delta, delta.sum(axis=0)))
        if i > 0:
            delta = (delta @ w.T) * (1.0 - acts[i] ** 2)
    flat = []
    for gw, gb in reversed(grads):
        flat.extend([gw.ravel(), gb])
    return np.concatenate(flat)


def sgd_apply(model: ModelState, grad: np.ndarray, lr: float) -> ModelState:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != model.params.shape:
        raise ValueError(f"gradient length {grad.shape} != params length {model.params.shape}")
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient entries")
    return model.evolve(params=model.params - lr * grad, version=model.version + 1)


def accuracy(model: ModelState, data: Dataset) -> tuple[float, float]:
    """(accuracy, loss) of ``model`` on the whole dataset."""
    loss, pred = forward_loss(model, (data.features, data.labels))
    return float(np.mean((pred >= 0.5) == (data.labels >= 0.5))), loss


# -- data --------------------------------------------------------------------


def make_blobs(n: int, dims: int, margin: float = 0.5, spread: float = 1.0, seed: int = 0) -> Dataset:
    """Two Gaussian blobs separated by a hyperplane with at least ``margin`` clearance.

    Points are Gaussian in the directions orthogonal to a random unit normal;
    along the normal each point sits at ``±(margin + |N(0, spread)|)``.
    """
    rng = np.random.default_rng(seed)
    normal = rng.normal(size=dims)
    normal /= np.linalg.norm(normal)
    z = rng.normal(size=(n, dims))
    z -= np.outer(z @ normal, normal)
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    offset = margin + np.abs(rng.normal(0.0, spread, size=n))
    x = z + np.outer(sign * offset, normal)
    return Dataset(x, (sign > 0).astype(np.float64), name=f"blobs-{seed}")


def load_dataset_file(path) -> Dataset:
    """Read whitespace-separated rows ``x_1 .. x_d label`` after a ``dims count`` header."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        dims, count = int(header[0]), int(header[1])
        rows = np.loadtxt(fh, dtype=np.float64, ndmin=2)
    if rows.shape != (count, dims + 1):
        raise ValueError(f"{path}: header says {count}x{dims + 1}, body is {rows.shape[0]}x{rows.shape[1]}")
    return Dataset(rows[:, :dims], rows[:, dims], name=str(path))


def save_dataset_file(data: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{data.dims} {len(data)}\n")
        np.savetxt(fh, np.column_stack([data.features, data.labels]), fmt="%.17g")


def build_dataset(cfg: DataConfig, n: int, seed: int) -> Dataset:
    if cfg.kind == "file":
        return load_dataset_file(cfg.path)
    return make_blobs(n, cfg.dims, cfg.margin, cfg.spread, seed)


def split_sizes(n: int, ratios: Sequence) -> list[int]:
    """Largest-remainder split of ``n`` items; each size is within one item of exact."""
    fr = [Fraction(r) for r in ratios]
    if not fr or any(r <= 0 for r in fr):
        raise ValueError("ratios must be positive")
    total = sum(fr)
    exact = [n * r / total for r in fr]
    sizes = [int(e) for e in exact]
    order = sorted(range(len(fr)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def partition_dataset(parent: Dataset, ratios: Sequence, seed: int) -> list[Dataset]:
    """Shuffle deterministically and split into disjoint shares proportional to ``ratios``."""
    if len(ratios) > len(parent):
        raise ValueError(f"{len(ratios)} partitions requested from {len(parent)} samples")
    sizes = split_sizes(len(parent), ratios)
    perm = np.random.default_rng(seed).permutation(len(parent))
    total = sum(Fraction(r) for r in ratios)
    parts, start = [], 0
    for i, (size, r) in enumerate(zip(sizes, ratios)):
        idx = perm[start : start + size]
        start += size
        parts.append(
            Dataset(
                parent.features[idx],
                parent.labels[idx],
                name=f"{parent.name}/{i}",
                partition_of=(parent.name, Fraction(r) / total),
                source_index=idx,
            )
        )
    return parts


def epoch_batches(data: Dataset, n_batches: int, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """One epoch: a fresh shuffle cut into ``n_batches`` near-equal minibatches."""
    perm = rng.permutation(len(data))
    chunks = np.array_split(perm, min(n_batches, len(data)))
    batches = [(data.features[c], data.labels[c]) for c in chunks]
    # tiny partitions reuse batches so every partition runs the same iteration count
    while len(batches) < n_batches:
        batches.append(batches[len(batches) % len(chunks)])
    return batches


def fit_single(data: Dataset, cfg: TrainConfig, seed: int | None = None) -> tuple[ModelState, list[tuple[int, float, float]]]:
    """Plain single-partition minibatch SGD. Returns the model and per-epoch (epoch, accuracy, loss)."""
    seed = cfg.seed if seed is None else seed
    arch = cfg.architecture(data.dims)
    model = ModelState.initial(arch, np.random.default_rng([seed, 3]))
    rng = np.random.default_rng([seed, 1, 0])
    n_batches = max(1, -(-len(data) // cfg.batch_size))
    history = []
    for epoch in range(1, cfg.epochs + 1):
        for batch in epoch_batches(data, n_batches, rng):
            model = sgd_apply(model, backward(model, batch), cfg.learning_rate)
        acc, loss = accuracy(model, data)
        history.append((epoch, acc, loss))
    return model, history
