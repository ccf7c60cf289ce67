"""Deterministic MLP training, evaluation, and differential oracles.

Full-batch quantities (loss, gradient) are computed after sorting the
dataset into a canonical row order and reducing over samples with a
power-of-two pairwise tree.  This makes the full-batch loss/gradient exactly
invariant to dataset row order, and exactly invariant to duplicating every
row (the duplicated tree's first level collapses to exact doublings).
"""

from __future__ import annotations

import csv as _csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .rng import stream
from .weightspace import ArchSpec, TaskVector, WeightSet, combine, flatten

__all__ = [
    "Dataset",
    "TrainConfig",
    "TrainResult",
    "NonFiniteError",
    "ACTIVATION_DERIVATIVE_BOUNDS",
    "init_weights",
    "mlp_forward",
    "loss_and_grad",
    "train",
    "hvp",
    "make_dataset",
    "split_dataset",
    "evaluate",
    "normalized_accuracy",
    "save_dataset_csv",
    "load_dataset_csv",
]


class NonFiniteError(RuntimeError):
    """Signals diverged weights or a non-finite intermediate value."""


# sup |phi'| and sup |phi''| per activation
ACTIVATION_DERIVATIVE_BOUNDS: dict[str, tuple[float, float]] = {
    "relu": (1.0, 0.0),
    "sigmoid": (0.25, 1.0 / (6.0 * np.sqrt(3.0))),
    "tanh": (1.0, 4.0 / (3.0 * np.sqrt(3.0))),
}


@dataclass(frozen=True)
class Dataset:
    """Feature matrix X (n x d), integer labels y in [0, C), and a name."""

    X: np.ndarray
    y: np.ndarray
    name: str = ""

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64, copy=True)
        y = np.array(self.y, dtype=np.int64, copy=True)
        if X.ndim != 2 or X.shape[0] < 1:
            raise ValueError("X must be a non-empty 2-D matrix")
        if y.shape != (X.shape[0],):
            raise ValueError("y must have one label per row of X")
        if not np.isfinite(X).all():
            raise ValueError("features must be finite")
        if (y < 0).any():
            raise ValueError("labels must be non-negative")
        X.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    eta: float
    epochs: int
    mode: str = "full_batch_gd"
    batch_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.mode not in ("full_batch_gd", "sgd"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.mode == "sgd" and (self.batch_size is None or self.batch_size < 1):
            raise ValueError("sgd mode requires a positive batch_size")


@dataclass
class TrainResult:
    trajectory: list[WeightSet]
    diverged: bool = False


def _canonical_order(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    # lexicographic over feature columns, label breaks remaining ties
    keys = [y] + [X[:, j] for j in range(X.shape[1] - 1, -1, -1)]
    return np.lexsort(keys)


def _tree_sum(arr: np.ndarray) -> np.ndarray:
    """Sum over axis 0 with a zero-padded power-of-two pairwise tree."""
    n = arr.shape[0]
    if n == 1:
        return arr[0].copy()
    m = 1 << (n - 1).bit_length()
    if m != n:
        pad = np.zeros((m - n,) + arr.shape[1:], dtype=arr.dtype)
        arr = np.concatenate([arr, pad], axis=0)
    while arr.shape[0] > 1:
        half = arr.shape[0] // 2
        arr = arr[:half] + arr[half:]
    return arr[0]


def _activation(name: str) -> tuple[Callable, Callable]:
    if name == "relu":
        return (lambda h: np.maximum(h, 0.0), lambda h: (h > 0).astype(np.float64))
    if name == "tanh":
        return (np.tanh, lambda h: 1.0 - np.tanh(h) ** 2)
    if name == "sigmoid":
        def sig(h):
            return 1.0 / (1.0 + np.exp(-h))

        return (sig, lambda h: sig(h) * (1.0 - sig(h)))
    raise ValueError(f"unknown activation {name!r}")


def init_weights(arch: ArchSpec, seed: int) -> WeightSet:
    """Per-layer uniform init in +-sqrt(6/(fan_in+fan_out)); zero biases."""
    layers = []
    for i in range(1, arch.n_layers + 1):
        rows, cols = arch.layer_shape(i)
        bound = np.sqrt(6.0 / (rows + cols))
        rng = stream(seed, "init", i)
        w = rng.uniform(-bound, bound, size=(rows, cols))
        layers.append((w, np.zeros(rows)))
    return WeightSet(arch, tuple(layers))


def mlp_forward(w: WeightSet, X: np.ndarray, return_activations: bool = False):
    """Forward pass; returns logits (n x C), optionally with activations.

    ``activations[l]`` is the post-activation output of layer l for
    l = 1..L-1, with ``activations[0]`` the input.  The final layer emits raw
    logits.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != w.arch.layer_widths[0]:
        raise ValueError(
            f"input width {X.shape[1]} != architecture input {w.arch.layer_widths[0]}"
        )
    act, _ = _activation(w.arch.activation)
    a = X
    acts = [X]
    L = w.arch.n_layers
    for i in range(1, L + 1):
        h = a @ w.weight(i).T + w.bias(i)
        if i < L:
            a = act(h)
            acts.append(a)
        else:
            a = h
    if not np.isfinite(a).all():
        raise NonFiniteError("forward pass produced non-finite logits")
    return (a, acts) if return_activations else a


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grad(w: WeightSet, dataset: Dataset) -> tuple[float, TaskVector]:
    """Mean cross-entropy and its exact gradient w.r.t. every parameter."""
    if dataset.n < 1:
        raise ValueError("empty dataset")
    order = _canonical_order(dataset.X, dataset.y)
    X = dataset.X[order]
    y = dataset.y[order]
    n = X.shape[0]
    C = w.arch.layer_widths[-1]
    if y.max() >= C:
        raise ValueError("label out of range for output width")

    act, dact = _activation(w.arch.activation)
    L = w.arch.n_layers
    pre = []
    a = X
    acts = [X]
    for i in range(1, L + 1):
        h = a @ w.weight(i).T + w.bias(i)
        pre.append(h)
        if i < L:
            a = act(h)
            acts.append(a)
    logits = pre[-1]
    if not np.isfinite(logits).all():
        raise NonFiniteError("forward pass produced non-finite logits")

    zmax = logits.max(axis=1)
    lse = zmax + np.log(np.exp(logits - zmax[:, None]).sum(axis=1))
    per_sample = lse - logits[np.arange(n), y]
    loss = float(_tree_sum(per_sample) / n)

    probs = _softmax(logits)
    probs[np.arange(n), y] -= 1.0  # per-sample dL/dlogits before the 1/n mean
    delta = probs
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * L  # type: ignore
    for i in range(L, 0, -1):
        contrib = np.einsum("nu,nv->nuv", delta, acts[i - 1])
        dW = _tree_sum(contrib) / n
        db = _tree_sum(delta) / n
        grads[i - 1] = (dW, db)
        if i > 1:
            delta = (delta @ w.weight(i)) * dact(pre[i - 2])
    return loss, TaskVector(w.arch, tuple(grads))


def train(w0: WeightSet, dataset: Dataset, cfg: TrainConfig) -> TrainResult:
    """Gradient-descent training; returns the per-epoch trajectory.

    ``full_batch_gd`` applies one update per epoch.  ``sgd`` shuffles the
    rows each epoch with the seeded stream and steps per minibatch.  A
    non-finite loss aborts with the partial trajectory and diverged=True.
    """
    def step(w, batch):
        _, g = loss_and_grad(w, batch)
        try:
            # shapes are consistent here, so a ValueError means overflow
            return combine([1.0, -cfg.eta], [w, g])
        except ValueError as exc:
            raise NonFiniteError(str(exc)) from exc

    traj = [w0]
    w = w0
    try:
        if cfg.mode == "full_batch_gd":
            for _ in range(cfg.epochs):
                w = step(w, dataset)
                traj.append(w)
        else:
            rng = stream(cfg.seed, "sgd-shuffle")
            for _ in range(cfg.epochs):
                order = rng.permutation(dataset.n)
                for start in range(0, dataset.n, cfg.batch_size):
                    idx = order[start : start + cfg.batch_size]
                    w = step(w, Dataset(dataset.X[idx], dataset.y[idx], dataset.name))
                traj.append(w)
    except NonFiniteError:
        return TrainResult(traj, diverged=True)
    return TrainResult(traj, diverged=False)


def hvp(
    w: WeightSet,
    dataset: Dataset,
    v: TaskVector,
    grad_fn: Callable[[WeightSet], TaskVector] | None = None,
) -> TaskVector:
    """Hessian-vector product by central differences of the gradient.

    Uses (g(w + h v) - g(w - h v)) / (2 h) with h = 1e-4 / (1 + ||v||).
    `grad_fn` is a test hook replacing the dataset gradient.
    """
    if v.arch != w.arch:
        raise ValueError("direction shape incompatible with weights")
    norm = float(np.linalg.norm(flatten(v)))
    if norm == 0.0:
        return TaskVector(
            w.arch,
            tuple(
                (np.zeros_like(wm), np.zeros_like(bv)) for wm, bv in w.layers
            ),
        )
    h = 1e-4 / (1.0 + norm)
    if grad_fn is None:
        grad_fn = lambda ws: loss_and_grad(ws, dataset)[1]
    g_plus = grad_fn(combine([1.0, h], [w, v]))
    g_minus = grad_fn(combine([1.0, -h], [w, v]))
    out = combine([1.0 / (2.0 * h), -1.0 / (2.0 * h)], [g_plus, g_minus])
    if not np.isfinite(flatten(out)).all():
        raise NonFiniteError("non-finite intermediate in hvp")
    return out


def make_dataset(
    classes: int, dims: int, samples: int, seed: int, separation: float
) -> Dataset:
    """Gaussian mixture with one isotropic unit blob per class.

    Class means sit at norm `separation` along a seeded random orthonormal
    frame (random unit directions when classes > dims).  Deterministic per
    seed; rows are ordered by class.
    """
    if classes < 1 or dims < 1 or samples < 1:
        raise ValueError("classes, dims, samples must be positive")
    rng = stream(seed, "blobs")
    g = rng.standard_normal((dims, classes))
    if classes <= dims:
        q, r = np.linalg.qr(g)
        dirs = q * np.sign(np.diag(r))
    else:
        dirs = g / np.linalg.norm(g, axis=0, keepdims=True)
    means = separation * dirs.T  # classes x dims
    counts = np.full(classes, samples // classes)
    counts[: samples % classes] += 1
    xs, ys = [], []
    for c in range(classes):
        xs.append(means[c] + rng.standard_normal((counts[c], dims)))
        ys.append(np.full(counts[c], c, dtype=np.int64))
    return Dataset(np.concatenate(xs), np.concatenate(ys), name=f"blobs-{seed}")


def split_dataset(dataset: Dataset, train_fraction: float) -> tuple[Dataset, Dataset]:
    """Deterministic stratified split: per class, the first rows (in dataset
    order) go to the training part."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    tr_idx, te_idx = [], []
    for c in np.unique(dataset.y):
        rows = np.nonzero(dataset.y == c)[0]
        k = int(round(len(rows) * train_fraction))
        k = min(max(k, 1), len(rows) - 1)
        tr_idx.extend(rows[:k].tolist())
        te_idx.extend(rows[k:].tolist())
    return (
        Dataset(dataset.X[tr_idx], dataset.y[tr_idx], dataset.name),
        Dataset(dataset.X[te_idx], dataset.y[te_idx], dataset.name),
    )


def evaluate(w: WeightSet, dataset: Dataset) -> dict:
    """Accuracy (argmax match fraction) and mean cross-entropy loss."""
    order = _canonical_order(dataset.X, dataset.y)
    X, y = dataset.X[order], dataset.y[order]
    logits = mlp_forward(w, X)
    if y.max() >= logits.shape[1]:
        raise ValueError("label out of range for output width")
    pred = np.argmax(logits, axis=1)
    acc = int((pred == y).sum()) / y.size
    zmax = logits.max(axis=1)
    lse = zmax + np.log(np.exp(logits - zmax[:, None]).sum(axis=1))
    per_sample = lse - logits[np.arange(y.size), y]
    loss = float(_tree_sum(per_sample) / y.size)
    return {"accuracy": float(acc), "mean_loss": loss}


def normalized_accuracy(
    merged_acc: Sequence[float], finetuned_acc: Sequence[float]
) -> float:
    """Mean over tasks of merged accuracy relative to the fine-tuned expert."""
    if len(merged_acc) != len(finetuned_acc):
        raise ValueError("accuracy lists must have equal length")
    if len(merged_acc) == 0:
        raise ValueError("empty accuracy lists")
    if any(f <= 0 for f in finetuned_acc):
        raise ValueError("finetuned accuracies must be positive")
    ratios = [m / f for m, f in zip(merged_acc, finetuned_acc)]
    return float(np.mean(ratios))


def save_dataset_csv(dataset: Dataset, path) -> None:
    """Write `f0,...,f{d-1},label` rows; floats via repr (exact round trip)."""
    d = dataset.X.shape[1]
    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow([f"f{j}" for j in range(d)] + ["label"])
        for row, label in zip(dataset.X, dataset.y):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def load_dataset_csv(path, name: str = "") -> Dataset:
    with open(path, newline="") as fh:
        reader = _csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "label":
            raise ValueError("csv header must end with 'label'")
        d = len(header) - 1
        xs, ys = [], []
        for row in reader:
            if len(row) != d + 1:
                raise ValueError("csv row width inconsistent with header")
            xs.append([float(v) for v in row[:d]])
            ys.append(int(row[d]))
    return Dataset(np.asarray(xs), np.asarray(ys), name=name or str(path))
