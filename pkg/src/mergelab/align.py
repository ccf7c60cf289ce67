"""Permutation alignment and single-task merging.

Matching objectives treat each layer's bias as an extra weight column, so
biases carry row-matching signal but are never column-permuted.  Input and
output layers are never permuted.  The n-model matching optimizes factorized
per-model maps to a shared universe frame; pairwise maps are always composed
from them, which makes every cyclic composition the identity.

The multi-model objective is counted once per unordered model pair, so with
two models it coincides with the pairwise weight-matching objective.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .nnet import Dataset, _activation, evaluate, mlp_forward
from .rng import stream
from .weightspace import ArchSpec, WeightSet, combine, flatten

__all__ = [
    "PermSet",
    "UniverseMaps",
    "lap_max",
    "perm_matrix",
    "fw_pairwise",
    "fw_multi",
    "cycle_error",
    "apply_perm",
    "map_to_universe",
    "c2m3_merge",
    "merge_many",
    "activation_matching",
    "repair",
    "RepairResult",
    "loss_barrier",
]

_LINE_SEARCH_GRID = np.round(np.linspace(0.0, 1.0, 101), 2)
_DEFAULT_TOL = 1e-6
_DEFAULT_MAX_ITER = 200


def lap_max(score: np.ndarray) -> np.ndarray:
    """Assignment maximizing sum_i score[i, perm[i]].

    Among optimal assignments, returns the lexicographically smallest
    assignment vector: rows are fixed in order, each taking the smallest
    column that still permits an optimal completion (checked by re-solving
    the reduced problem, with a small relative tolerance).
    """
    score = np.asarray(score, dtype=np.float64)
    if score.ndim != 2 or score.shape[0] != score.shape[1]:
        raise ValueError("score matrix must be square")
    if not np.isfinite(score).all():
        raise ValueError("score matrix must be finite")
    n = score.shape[0]
    rows, cols = linear_sum_assignment(score, maximize=True)
    best = float(score[rows, cols].sum())
    tol = 1e-9 * max(1.0, abs(best))

    perm = np.empty(n, dtype=np.int64)
    available = list(range(n))
    value_left = best
    for i in range(n):
        rest_rows = np.arange(i + 1, n)
        chosen = None
        fallback, fallback_total = None, -np.inf
        for j in available:
            rest_cols = [c for c in available if c != j]
            if rest_rows.size:
                sub = score[np.ix_(rest_rows, rest_cols)]
                r, c = linear_sum_assignment(sub, maximize=True)
                sub_val = float(sub[r, c].sum())
            else:
                sub_val = 0.0
            total = score[i, j] + sub_val
            if total >= value_left - tol:
                chosen = j
                break
            if total > fallback_total:
                fallback, fallback_total = j, total
        if chosen is None:  # accumulated drift; take the best completion seen
            chosen = fallback
        perm[i] = chosen
        available.remove(chosen)
        value_left -= score[i, chosen]
    return perm


def perm_matrix(perm: np.ndarray) -> np.ndarray:
    """Permutation matrix P with P[i, perm[i]] = 1 (rows select sources)."""
    n = len(perm)
    mat = np.zeros((n, n))
    mat[np.arange(n), perm] = 1.0
    return mat


def _is_hard(p: np.ndarray) -> bool:
    binary = np.all((p == 0.0) | (p == 1.0))
    return bool(
        binary
        and np.all(p.sum(axis=0) == 1.0)
        and np.all(p.sum(axis=1) == 1.0)
    )


@dataclass(frozen=True)
class PermSet:
    """Per-hidden-layer square maps P_1..P_{L-1}; boundary maps are identity.

    Entries are doubly stochastic during optimization and exactly 0/1 after
    hardening.
    """

    perms: tuple[np.ndarray, ...]

    def __post_init__(self):
        frozen = []
        for p in self.perms:
            p = np.array(p, dtype=np.float64, copy=True)
            if p.ndim != 2 or p.shape[0] != p.shape[1]:
                raise ValueError("permutation blocks must be square")
            if (p < -1e-12).any():
                raise ValueError("permutation entries must be non-negative")
            if np.abs(p.sum(axis=0) - 1.0).max() > 1e-9 or np.abs(
                p.sum(axis=1) - 1.0
            ).max() > 1e-9:
                raise ValueError("rows and columns must each sum to 1")
            p.flags.writeable = False
            frozen.append(p)
        object.__setattr__(self, "perms", tuple(frozen))

    @classmethod
    def identity(cls, arch: ArchSpec) -> "PermSet":
        return cls(tuple(np.eye(w) for w in arch.layer_widths[1:-1]))

    def is_hard(self) -> bool:
        return all(_is_hard(p) for p in self.perms)

    def transpose(self) -> "PermSet":
        return PermSet(tuple(p.T for p in self.perms))

    def compose(self, other: "PermSet") -> "PermSet":
        """self after other: (self o other)[l] = self[l] @ other[l]."""
        return PermSet(tuple(a @ b for a, b in zip(self.perms, other.perms)))


@dataclass(frozen=True)
class UniverseMaps:
    """Per-model maps to a shared universe frame.

    ``maps[p]`` holds the hidden-layer permutations P^p such that
    transposing them carries model p into the universe.  Pairwise maps are
    never stored; they are always composed as P^p (P^q)^T.
    """

    maps: tuple[PermSet, ...]

    def pairwise(self, p: int, q: int) -> PermSet:
        """Map carrying model q into model p's frame."""
        return self.maps[p].compose(self.maps[q].transpose())


# -- matching objectives ----------------------------------------------------


def _augmented(model: WeightSet) -> list[np.ndarray]:
    """Per-layer [W | b] matrices (bias as an extra column)."""
    return [
        np.hstack([model.weight(i), model.bias(i)[:, None]])
        for i in range(1, model.arch.n_layers + 1)
    ]


def _full_perms(arch: ArchSpec, hidden: Sequence[np.ndarray]) -> list[np.ndarray]:
    """[I_{d0}, P_1, ..., P_{L-1}, I_{dL}] from the free hidden maps."""
    return (
        [np.eye(arch.layer_widths[0])]
        + [np.asarray(p) for p in hidden]
        + [np.eye(arch.layer_widths[-1])]
    )


def _col_block(p: np.ndarray) -> np.ndarray:
    """Column-side map with the bias column pinned: blockdiag(P, 1)."""
    n = p.shape[0]
    out = np.zeros((n + 1, n + 1))
    out[:n, :n] = p
    out[n, n] = 1.0
    return out


def _pairwise_objective(aw_a, aw_b, full_perms) -> float:
    total = 0.0
    for i, (wa, wb) in enumerate(zip(aw_a, aw_b), start=1):
        pc = _col_block(full_perms[i - 1])
        total += float(np.sum(wa * (full_perms[i] @ wb @ pc.T)))
    return total


def _universe_layer(aw, full_perms, i) -> np.ndarray:
    """Layer i of a model expressed in the universe frame."""
    return full_perms[i].T @ aw[i - 1] @ _col_block(full_perms[i - 1])


def _multi_objective(aws, perms_per_model) -> float:
    """Sum over unordered model pairs of layer-wise frame-aligned overlaps."""
    n_models = len(aws)
    arch_layers = len(aws[0])
    total = 0.0
    for i in range(1, arch_layers + 1):
        gs = [
            _universe_layer(aws[p], perms_per_model[p], i)
            for p in range(n_models)
        ]
        for p in range(n_models):
            for q in range(p + 1, n_models):
                total += float(np.sum(gs[p] * gs[q]))
    return total


def _line_search(evaluate_at) -> tuple[float, float]:
    """Max of the objective over the fixed alpha grid; ties take smallest."""
    best_alpha, best_val = 0.0, -np.inf
    for alpha in _LINE_SEARCH_GRID:
        val = evaluate_at(float(alpha))
        if val > best_val + 1e-15:
            best_alpha, best_val = float(alpha), val
    return best_alpha, best_val


def _check_same_arch(models: Sequence[WeightSet]) -> ArchSpec:
    arch = models[0].arch
    for m in models[1:]:
        if m.arch != arch:
            raise ValueError("models do not share an architecture")
    return arch


def fw_pairwise(
    a: WeightSet,
    b: WeightSet,
    tol: float = _DEFAULT_TOL,
    max_iter: int = _DEFAULT_MAX_ITER,
) -> tuple[PermSet, list[float]]:
    """Frank-Wolfe weight matching of model b onto model a.

    Maximizes the layer-wise overlap between a and the permuted b over the
    doubly stochastic relaxation: at each iterate the gradient w.r.t. every
    hidden map is assembled, projected to the best vertex by assignment, and
    the update interpolates toward it with a grid line search over the true
    objective.  Stops when the relative objective gain drops below `tol`.
    The returned maps are hardened to exact permutations.
    """
    arch = _check_same_arch([a, b])
    aw_a, aw_b = _augmented(a), _augmented(b)
    hidden = [np.eye(w) for w in arch.layer_widths[1:-1]]

    def objective(h):
        return _pairwise_objective(aw_a, aw_b, _full_perms(arch, h))

    trace = [objective(hidden)]
    for _ in range(max_iter):
        full = _full_perms(arch, hidden)
        directions = []
        for li in range(1, len(hidden) + 1):
            grad = aw_a[li - 1] @ _col_block(full[li - 1]) @ aw_b[li - 1].T
            d = hidden[li - 1].shape[0]
            grad = grad + (aw_a[li].T @ full[li + 1] @ aw_b[li])[:d, :d]
            directions.append(perm_matrix(lap_max(grad)))

        def at(alpha):
            mix = [
                (1 - alpha) * p + alpha * d for p, d in zip(hidden, directions)
            ]
            return objective(mix)

        alpha, val = _line_search(at)
        hidden = [(1 - alpha) * p + alpha * d for p, d in zip(hidden, directions)]
        gain = val - trace[-1]
        trace.append(val)
        if abs(gain) < tol * max(1.0, abs(trace[-2])):
            break
    hardened = [perm_matrix(lap_max(p)) for p in hidden]
    return PermSet(tuple(hardened)), trace


def fw_multi(
    models: Sequence[WeightSet],
    tol: float = _DEFAULT_TOL,
    max_iter: int = _DEFAULT_MAX_ITER,
) -> tuple[UniverseMaps, list[float]]:
    """Joint Frank-Wolfe matching of n >= 2 models through a universe frame.

    Each model gets its own per-layer maps, initialized to identity; the
    objective aligns every unordered pair in the universe frame, and the
    gradient for each map collects a row-permuting and a column-permuting
    contribution from every partner model.  Pairwise correspondences composed
    from the result are cycle-consistent by construction.

    With exactly two models the problem falls back to pairwise matching: the
    first model's frame is taken as the universe (its maps stay identity) and
    only the second model's maps are optimized.
    """
    if len(models) < 2:
        raise ValueError("need at least two models")
    arch = _check_same_arch(models)
    aws = [_augmented(m) for m in models]
    n_models = len(models)
    frozen_models = {0} if n_models == 2 else set()
    hidden = [
        [np.eye(w) for w in arch.layer_widths[1:-1]] for _ in range(n_models)
    ]

    def objective(hs):
        return _multi_objective(aws, [_full_perms(arch, h) for h in hs])

    n_hidden = len(arch.layer_widths) - 2
    trace = [objective(hidden)]
    for _ in range(max_iter):
        fulls = [_full_perms(arch, h) for h in hidden]
        directions = [
            [p.copy() for p in hidden[pm]] for pm in range(n_models)
        ]
        for pm in range(n_models):
            if pm in frozen_models:
                continue
            for li in range(1, n_hidden + 1):
                d = hidden[pm][li - 1].shape[0]
                grad = np.zeros((d, d))
                for qm in range(n_models):
                    if qm == pm:
                        continue
                    rows = (
                        aws[pm][li - 1]
                        @ _col_block(fulls[pm][li - 1])
                        @ _col_block(fulls[qm][li - 1]).T
                        @ aws[qm][li - 1].T
                        @ fulls[qm][li]
                    )
                    cols = (
                        aws[pm][li].T
                        @ fulls[pm][li + 1]
                        @ fulls[qm][li + 1].T
                        @ aws[qm][li]
                        @ _col_block(fulls[qm][li])
                    )[:d, :d]
                    grad += rows + cols
                directions[pm][li - 1] = perm_matrix(lap_max(grad))

        def at(alpha):
            mix = [
                [
                    (1 - alpha) * p + alpha * dd
                    for p, dd in zip(hidden[pm], directions[pm])
                ]
                for pm in range(n_models)
            ]
            return objective(mix)

        alpha, val = _line_search(at)
        hidden = [
            [
                (1 - alpha) * p + alpha * dd
                for p, dd in zip(hidden[pm], directions[pm])
            ]
            for pm in range(n_models)
        ]
        gain = val - trace[-1]
        trace.append(val)
        if abs(gain) < tol * max(1.0, abs(trace[-2])):
            break
    hardened = [
        PermSet(tuple(perm_matrix(lap_max(p)) for p in hidden[pm]))
        for pm in range(n_models)
    ]
    return UniverseMaps(tuple(hardened)), trace


def multi_objective_value(
    models: Sequence[WeightSet], maps: UniverseMaps
) -> float:
    """Objective of `fw_multi` evaluated at the given maps."""
    arch = _check_same_arch(models)
    aws = [_augmented(m) for m in models]
    perms = [_full_perms(arch, ps.perms) for ps in maps.maps]
    return _multi_objective(aws, perms)


def pairwise_objective_value(a: WeightSet, b: WeightSet, permset: PermSet) -> float:
    """Objective of `fw_pairwise` evaluated at the given maps."""
    arch = _check_same_arch([a, b])
    return _pairwise_objective(
        _augmented(a), _augmented(b), _full_perms(arch, permset.perms)
    )


# -- applying maps ----------------------------------------------------------


def apply_perm(model: WeightSet, permset: PermSet) -> WeightSet:
    """Reorder hidden neurons: W'_l = P_l W_l P_{l-1}^T, b'_l = P_l b_l.

    Requires hard permutation matrices; soft maps are rejected.  The network
    function is preserved.
    """
    if not permset.is_hard():
        raise ValueError("apply_perm requires hard permutation matrices")
    arch = model.arch
    if len(permset.perms) != arch.n_layers - 1:
        raise ValueError("permutation count does not match hidden layers")
    full = _full_perms(arch, permset.perms)
    layers = []
    for i in range(1, arch.n_layers + 1):
        w = full[i] @ model.weight(i) @ full[i - 1].T
        b = full[i] @ model.bias(i)
        layers.append((w, b))
    return WeightSet(arch, tuple(layers))


def map_to_universe(model: WeightSet, to_model: PermSet) -> WeightSet:
    """Carry a model into the universe frame given its model-side map."""
    return apply_perm(model, to_model.transpose())


def cycle_error(
    maps: UniverseMaps | Mapping[tuple[int, int], PermSet],
    model: WeightSet,
    cycle: Sequence[int],
) -> float:
    """L2 distance after carrying `model` around a closed cycle of maps.

    `cycle` lists model ids starting and ending at the model's own id.  With
    universe-factorized maps the composition is the identity and the error is
    exactly zero; independently fit pairwise maps generally drift.

    A mapping argument must provide the map carrying q into p under key
    ``(p, q)``.
    """
    if len(cycle) < 2 or cycle[0] != cycle[-1]:
        raise ValueError("cycle must start and end at the same model id")
    current = model
    for src, dst in zip(cycle, cycle[1:]):
        if isinstance(maps, UniverseMaps):
            step = maps.pairwise(dst, src)
        else:
            try:
                step = maps[(dst, src)]
            except KeyError as exc:
                raise ValueError(f"no map for pair {(dst, src)}") from exc
        current = apply_perm(current, step)
    return float(np.linalg.norm(flatten(current) - flatten(model)))


# -- merging ----------------------------------------------------------------


def c2m3_merge(
    models: Sequence[WeightSet],
    tol: float = _DEFAULT_TOL,
    max_iter: int = _DEFAULT_MAX_ITER,
) -> WeightSet:
    """Jointly align all models to the universe frame and average there."""
    maps, _ = fw_multi(models, tol=tol, max_iter=max_iter)
    mapped = [map_to_universe(m, ps) for m, ps in zip(models, maps.maps)]
    return combine([1.0 / len(mapped)] * len(mapped), mapped)


def merge_many(
    models: Sequence[WeightSet],
    max_rounds: int = 20,
    seed: int = 0,
    tol: float = _DEFAULT_TOL,
    max_iter: int = _DEFAULT_MAX_ITER,
) -> WeightSet:
    """Coordinate-descent merging: repeatedly re-match each model to the
    mean of the others (random order per round), then average.

    Stops when a full pass leaves every permutation at the identity or after
    `max_rounds`.
    """
    if len(models) < 2:
        raise ValueError("need at least two models")
    _check_same_arch(models)
    models = list(models)
    n = len(models)
    rng = stream(seed, "merge-many")
    eye = PermSet.identity(models[0].arch)
    for _ in range(max_rounds):
        changed = False
        for i in rng.permutation(n):
            others = [models[j] for j in range(n) if j != i]
            reference = combine([1.0 / (n - 1)] * (n - 1), others)
            permset, _ = fw_pairwise(reference, models[i], tol=tol, max_iter=max_iter)
            if any(
                not np.array_equal(p, e) for p, e in zip(permset.perms, eye.perms)
            ):
                changed = True
                models[i] = apply_perm(models[i], permset)
        if not changed:
            break
    return combine([1.0 / n] * n, models)


def activation_matching(a: WeightSet, b: WeightSet, probe: Dataset) -> PermSet:
    """Per-layer assignment on the activation cross-covariance of a and b.

    The probe is put into a canonical row order first, so the result does not
    depend on how its rows are arranged.
    """
    _check_same_arch([a, b])
    if probe.n < 1:
        raise ValueError("probe must be non-empty")
    order = np.lexsort([probe.y] + [probe.X[:, j] for j in range(probe.X.shape[1] - 1, -1, -1)])
    X = probe.X[order]
    _, acts_a = mlp_forward(a, X, return_activations=True)
    _, acts_b = mlp_forward(b, X, return_activations=True)
    perms = []
    for za, zb in zip(acts_a[1:], acts_b[1:]):
        cross = za.T @ zb
        perms.append(perm_matrix(lap_max(cross)))
    return PermSet(tuple(perms))


@dataclass
class RepairResult:
    weights: WeightSet
    frozen_neurons: list[tuple[int, int]]  # (layer, neuron) left uncorrected


def _hidden_unit_stats(w: WeightSet, X: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per hidden layer, per-neuron (mean, std) of the affine layer output."""
    act, _ = _activation(w.arch.activation)
    stats = []
    a = X
    for i in range(1, w.arch.n_layers):
        h = a @ w.weight(i).T + w.bias(i)
        stats.append((h.mean(axis=0), h.std(axis=0)))
        a = act(h)
    return stats


def repair(
    merged: WeightSet,
    endpoints: Sequence[WeightSet],
    weights: Sequence[float],
    probe: Dataset,
) -> RepairResult:
    """Restore per-neuron statistics of a merged model to the convex
    combination of its endpoints' statistics.

    Statistics are the per-neuron mean and standard deviation of each hidden
    layer's affine output on the probe; the correction rescales the layer's
    rows and shifts its biases.  Layers are corrected in order and each
    layer's merged statistics are re-measured with the earlier layers already
    corrected, so the corrected model matches the target statistics at every
    hidden layer.  Neurons whose target or measured spread is zero are left
    at scale 1 and reported.
    """
    if len(endpoints) != len(weights):
        raise ValueError("one weight per endpoint required")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise ValueError("endpoint weights must sum to 1")
    _check_same_arch(list(endpoints) + [merged])
    X = probe.X
    targets = []  # per hidden layer: (target mean, target std)
    per_endpoint = [_hidden_unit_stats(e, X) for e in endpoints]
    for li in range(merged.arch.n_layers - 1):
        mu = sum(w * per_endpoint[k][li][0] for k, w in enumerate(weights))
        sd = sum(w * per_endpoint[k][li][1] for k, w in enumerate(weights))
        targets.append((mu, sd))

    frozen: list[tuple[int, int]] = []
    layers = [list(pair) for pair in merged.layers]
    act, _ = _activation(merged.arch.activation)
    a = X
    for i in range(1, merged.arch.n_layers):
        w_i, b_i = layers[i - 1]
        h = a @ w_i.T + b_i
        mu_m, sd_m = h.mean(axis=0), h.std(axis=0)
        mu_t, sd_t = targets[i - 1]
        scale = np.ones_like(sd_m)
        ok = (sd_m > 0) & (sd_t > 0)
        scale[ok] = sd_t[ok] / sd_m[ok]
        for j in np.nonzero(~ok)[0]:
            frozen.append((i, int(j)))
        new_w = w_i * scale[:, None]
        new_b = scale * b_i + (mu_t - scale * mu_m)
        layers[i - 1] = [new_w, new_b]
        a = act(a @ new_w.T + new_b)
    fixed = WeightSet(merged.arch, tuple((w, b) for w, b in layers))
    return RepairResult(fixed, frozen)


def loss_barrier(
    a: WeightSet, b: WeightSet, dataset: Dataset, grid_points: int = 25
) -> dict:
    """Loss/accuracy along the linear weight interpolation and its barrier.

    The barrier is the largest excess of the interpolated loss over the
    average endpoint loss across a uniform grid on [0, 1]; it can be negative
    when the segment dips below the endpoint average everywhere.
    """
    if grid_points < 3:
        raise ValueError("grid_points must be >= 3")
    _check_same_arch([a, b])
    lams = np.linspace(0.0, 1.0, grid_points)
    curve = []
    for lam in lams:
        w = combine([1.0 - lam, lam], [a, b])
        res = evaluate(w, dataset)
        curve.append((float(lam), res["mean_loss"], res["accuracy"]))
    end_avg = 0.5 * (curve[0][1] + curve[-1][1])
    barrier = max(loss for _, loss, _ in curve) - end_avg
    return {"barrier": float(barrier), "curve": curve}
