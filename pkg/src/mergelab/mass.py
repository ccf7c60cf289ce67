"""Input-adaptive merging: redundancy filtering, projection-residual routing
over per-task singular subspaces, and two-pass adaptive inference.

The routing layer index l refers to a weight layer (1-based): the router
projects the activation that feeds layer l onto each bundled task's right
singular basis of that layer.  Routing statistics come from the fixed merged
model's first pass; the adaptively merged model performs the second pass and
the selected per-task heads read its last hidden representation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .nnet import Dataset, mlp_forward
from .tsv import SvdBundle, bundle_tasks, merge_rank, tsv_merge
from .weightspace import TaskVector, WeightSet, cosine_sim

__all__ = [
    "RouterConfig",
    "ClassifierHead",
    "FixedMergeResult",
    "redundancy_filter",
    "fixed_merge",
    "residuals",
    "route",
    "adaptive_model",
    "adaptive_infer",
    "adaptive_infer_batched",
    "map_route_check",
    "head_from_model",
    "routing_layer_sweep",
    "router_task_accuracy",
]


@dataclass(frozen=True)
class RouterConfig:
    layer_index: int
    eta: float = 0.2
    top_k: int = 3
    epsilon: float = 0.3
    temperature: float = 1.0
    alpha: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise ValueError("eta must lie in (0, 1)")
        if self.top_k < 1:
            raise ValueError("top_k must be positive")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class ClassifierHead:
    """Per-task linear head: logits = weight @ z + bias."""

    weight: np.ndarray
    bias: np.ndarray
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        w = np.array(self.weight, dtype=np.float64, copy=True)
        b = np.array(self.bias, dtype=np.float64, copy=True)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ValueError("head weight must be C x d with a C bias")
        names = tuple(self.class_names) or tuple(str(i) for i in range(w.shape[0]))
        if len(names) != w.shape[0]:
            raise ValueError("one class name per output required")
        w.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "class_names", names)

    def logits(self, z: np.ndarray) -> np.ndarray:
        return z @ self.weight.T + self.bias


def head_from_model(model: WeightSet, class_names: Sequence[str] = ()) -> ClassifierHead:
    """Use a fine-tuned model's final layer as its classification head."""
    L = model.arch.n_layers
    return ClassifierHead(model.weight(L), model.bias(L), tuple(class_names))


def redundancy_filter(deltas: Sequence[TaskVector], epsilon: float) -> list[int]:
    """Greedy pass in input order: accept a task update only if its cosine
    similarity with every previously accepted update stays below epsilon."""
    if len(deltas) == 0:
        raise ValueError("need at least one task update")
    accepted: list[int] = []
    for i, delta in enumerate(deltas):
        if not accepted:
            accepted.append(i)
            continue
        sims = [cosine_sim(delta, deltas[j]) for j in accepted]
        if max(sims) < epsilon:
            accepted.append(i)
    return accepted


@dataclass
class FixedMergeResult:
    theta_mt: WeightSet
    bundle: SvdBundle
    accepted: list[int]


def fixed_merge(
    theta_pre: WeightSet, deltas: Sequence[TaskVector], cfg: RouterConfig
) -> FixedMergeResult:
    """Filter redundant updates, merge the survivors, and keep their
    truncated factors for routing."""
    accepted = redundancy_filter(deltas, cfg.epsilon)
    kept = [deltas[i] for i in accepted]
    theta_mt = tsv_merge(theta_pre, kept, alpha=cfg.alpha)
    arch = theta_pre.arch
    ranks = [merge_rank(arch, li, len(kept)) for li in range(1, arch.n_layers + 1)]
    bundle = bundle_tasks(arch, kept, ranks, task_ids=tuple(accepted))
    return FixedMergeResult(theta_mt, bundle, accepted)


def residuals(z: np.ndarray, bundle: SvdBundle, layer: int) -> np.ndarray:
    """Euclidean distance from z to its projection onto each bundled task's
    right singular subspace at `layer`."""
    z = np.asarray(z, dtype=np.float64).ravel()
    expected = bundle.arch.layer_widths[layer - 1]
    if z.size != expected:
        raise ValueError(f"activation size {z.size} != layer input {expected}")
    out = np.empty(bundle.n_tasks)
    for pos in range(bundle.n_tasks):
        v = bundle.right_basis(layer, pos)
        proj = v @ (v.T @ z)
        out[pos] = np.linalg.norm(z - proj)
    return out


@dataclass
class RouteResult:
    weights: np.ndarray
    omega: list[int]  # bundle positions, ascending


def route(res: np.ndarray, cfg: RouterConfig) -> RouteResult:
    """Softmax the negated residuals, threshold at eta, keep the top-k.

    Falls back to the single best task when nothing clears the threshold;
    weight ties resolve toward lower positions.
    """
    res = np.asarray(res, dtype=np.float64)
    if res.size == 0:
        raise ValueError("empty residuals")
    scaled = -res / cfg.temperature
    scaled = scaled - scaled.max()
    w = np.exp(scaled)
    w = w / w.sum()
    selected = [i for i in range(w.size) if w[i] >= cfg.eta]
    if not selected:
        selected = [int(np.argmax(w))]
    if len(selected) > cfg.top_k:
        order = sorted(selected, key=lambda i: (-w[i], i))
        selected = sorted(order[: cfg.top_k])
    return RouteResult(w, sorted(selected))


def map_route_check(z: np.ndarray, bundle: SvdBundle, layer: int) -> int:
    """Task id with the smallest projection residual (lowest position on
    ties); coincides with the route's largest weight."""
    res = residuals(z, bundle, layer)
    return int(bundle.task_ids[int(np.argmin(res))])


def adaptive_model(
    theta_pre: WeightSet,
    bundle: SvdBundle,
    positions: Sequence[int],
    alpha: float,
) -> WeightSet:
    """Base model plus the summed factor reconstructions (and bias
    displacements) of the selected bundled tasks."""
    arch = theta_pre.arch
    layers = []
    for li in range(1, arch.n_layers + 1):
        acc = np.zeros(arch.layer_shape(li))
        bacc = np.zeros(arch.layer_widths[li])
        for pos in positions:
            u, s, v = bundle.triples[li - 1][pos]
            acc += u @ np.diag(s) @ v.T
            bacc += bundle.bias_deltas[pos][li - 1]
        layers.append(
            (theta_pre.weight(li) + alpha * acc, theta_pre.bias(li) + alpha * bacc)
        )
    return WeightSet(arch, tuple(layers))


def _routing_activation(model: WeightSet, X: np.ndarray, layer: int) -> np.ndarray:
    _, acts = mlp_forward(model, X, return_activations=True)
    if not 1 <= layer <= model.arch.n_layers:
        raise ValueError("routing layer outside architecture")
    return acts[layer - 1]


def _classify(
    rep: np.ndarray,
    omega_ids: Sequence[int],
    heads: Mapping[int, ClassifierHead] | Sequence[ClassifierHead],
) -> tuple[int, int, str]:
    best = None
    for tid in omega_ids:
        try:
            head = heads[tid]
        except (KeyError, IndexError) as exc:
            raise ValueError(f"missing head for selected task {tid}") from exc
        logits = head.logits(rep)
        for c in range(logits.size):
            if best is None or logits[c] > best[0]:
                best = (float(logits[c]), tid, c, head.class_names[c])
    _, tid, c, name = best
    return tid, c, name


def adaptive_infer(
    x: np.ndarray,
    theta_pre: WeightSet,
    theta_mt: WeightSet,
    bundle: SvdBundle,
    heads: Mapping[int, ClassifierHead] | Sequence[ClassifierHead],
    cfg: RouterConfig,
) -> dict:
    """Two-pass adaptive inference for a single sample.

    First pass on the fixed merged model collects the routing activation;
    the router picks the task subset; their factors merge into the adaptive
    model; the selected heads read its last hidden representation and the
    highest logit wins (ties resolve toward lower head, then class, index).
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    z = _routing_activation(theta_mt, x[None, :], cfg.layer_index)[0]
    res = residuals(z, bundle, cfg.layer_index)
    routed = route(res, cfg)
    theta_mass = adaptive_model(theta_pre, bundle, routed.omega, cfg.alpha)
    _, acts = mlp_forward(theta_mass, x[None, :], return_activations=True)
    rep = acts[-1][0]
    omega_ids = [int(bundle.task_ids[p]) for p in routed.omega]
    tid, c, name = _classify(rep, omega_ids, heads)
    return {
        "class_index": c,
        "class_name": name,
        "head": tid,
        "omega": omega_ids,
        "weights": routed.weights.tolist(),
        "residuals": res.tolist(),
    }


def adaptive_infer_batched(
    X: np.ndarray,
    theta_pre: WeightSet,
    theta_mt: WeightSet,
    bundle: SvdBundle,
    heads: Mapping[int, ClassifierHead] | Sequence[ClassifierHead],
    cfg: RouterConfig,
) -> dict:
    """Batched inference with one shared selection from the mean residuals."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Z = _routing_activation(theta_mt, X, cfg.layer_index)
    res = np.stack([residuals(z, bundle, cfg.layer_index) for z in Z])
    routed = route(res.mean(axis=0), cfg)
    theta_mass = adaptive_model(theta_pre, bundle, routed.omega, cfg.alpha)
    _, acts = mlp_forward(theta_mass, X, return_activations=True)
    omega_ids = [int(bundle.task_ids[p]) for p in routed.omega]
    preds = []
    for rep in acts[-1]:
        tid, c, name = _classify(rep, omega_ids, heads)
        preds.append({"class_index": c, "class_name": name, "head": tid})
    return {"omega": omega_ids, "weights": routed.weights.tolist(), "predictions": preds}


def router_task_accuracy(
    theta_mt: WeightSet,
    bundle: SvdBundle,
    datasets: Sequence[Dataset],
    layer: int,
) -> float:
    """Fraction of samples routed (by smallest residual) to their own task.

    `datasets[pos]` holds held-out samples of the task at bundle position
    `pos` (whose id is ``bundle.task_ids[pos]``).
    """
    if len(datasets) != bundle.n_tasks:
        raise ValueError("one held-out dataset per bundled task required")
    correct = 0
    total = 0
    for pos, data in enumerate(datasets):
        expected = int(bundle.task_ids[pos])
        Z = _routing_activation(theta_mt, data.X, layer)
        for z in Z:
            correct += int(map_route_check(z, bundle, layer) == expected)
            total += 1
    return correct / total


def routing_layer_sweep(
    theta_mt: WeightSet,
    bundle: SvdBundle,
    datasets: Sequence[Dataset],
) -> list[tuple[int, float]]:
    """Router task-identification accuracy for every weight layer."""
    return [
        (layer, router_task_accuracy(theta_mt, bundle, datasets, layer))
        for layer in range(1, theta_mt.arch.n_layers + 1)
    ]
