"""Multidimensional two-parameter logistic response model and the
subset-based performance estimators built on it.

Fitting is joint MAP by backtracking gradient ascent with independent
Gaussian priors N(0, 1/u) on every discrimination vector, difficulty, and
ability; point estimates replace any hierarchical treatment.  Estimators mix
observed correctness on an evaluated subset with model-predicted correctness
on the remainder, assuming a merged model's ability is a box-constrained
linear combination of its endpoints' abilities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .rng import stream

__all__ = [
    "ItemParams",
    "FitResult",
    "XiFit",
    "irt_prob",
    "fit_items",
    "fit_ability",
    "fit_xi",
    "mp_irt",
    "gmp_irt",
    "fit_c_adaptive",
    "stability_harness",
    "unbiasedness_sim",
    "rank_correlation",
    "save_irt_json",
    "load_irt_json",
]

DEFAULT_ABILITY_DIM = 15
_C_GRID = np.round(np.linspace(0.0, 1.0, 101), 2)


@dataclass(frozen=True)
class ItemParams:
    """Per-item discrimination vectors and difficulties."""

    a: np.ndarray  # items x d
    beta: np.ndarray  # items
    norm_cap: float = 20.0

    def __post_init__(self):
        a = np.array(self.a, dtype=np.float64, copy=True)
        beta = np.array(self.beta, dtype=np.float64, copy=True)
        if a.ndim != 2 or beta.shape != (a.shape[0],):
            raise ValueError("a must be items x d with one difficulty per item")
        if not (np.isfinite(a).all() and np.isfinite(beta).all()):
            raise ValueError("item parameters must be finite")
        norms = np.linalg.norm(a, axis=1)
        if norms.size and norms.max() > self.norm_cap + 1e-9:
            raise ValueError("discrimination norm exceeds the configured cap")
        a.flags.writeable = False
        beta.flags.writeable = False
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "beta", beta)

    @property
    def n_items(self) -> int:
        return self.a.shape[0]

    @property
    def dim(self) -> int:
        return self.a.shape[1]

    def subset(self, idx: np.ndarray) -> "ItemParams":
        return ItemParams(self.a[idx], self.beta[idx], self.norm_cap)


def irt_prob(gamma: np.ndarray, a: np.ndarray, beta) -> np.ndarray | float:
    """Probability of a correct response: logistic(a . gamma - beta).

    `a` may be a single vector or an items x d matrix (then `beta` is a
    vector and the result is per-item).
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        if a.shape != gamma.shape:
            raise ValueError("ability and discrimination dimensions differ")
        return float(expit(a @ gamma - beta))
    if a.shape[1] != gamma.shape[0]:
        raise ValueError("ability and discrimination dimensions differ")
    return expit(a @ gamma - np.asarray(beta, dtype=np.float64))


def _bernoulli_ll(logits: np.ndarray, y: np.ndarray) -> float:
    # sum of y*l - softplus(l), stable for large |l|
    return float(np.sum(y * logits - np.logaddexp(0.0, logits)))


def _ascend(
    value_and_grad: Callable,
    params: list[np.ndarray],
    project: Callable[[list[np.ndarray]], list[np.ndarray]],
    steps: int,
    lr: float,
) -> tuple[list[np.ndarray], list[float]]:
    """Backtracking gradient ascent; the trace of accepted objective values
    is non-decreasing by construction."""
    params = project([p.copy() for p in params])
    val, grads = value_and_grad(params)
    trace = [val]
    for _ in range(steps):
        accepted = False
        trial_lr = lr
        for _ in range(40):
            prop = project([p + trial_lr * g for p, g in zip(params, grads)])
            new_val, new_grads = value_and_grad(prop)
            if new_val >= val:
                params, val, grads = prop, new_val, new_grads
                accepted = True
                break
            trial_lr /= 2.0
        if not accepted:
            break
        trace.append(val)
        lr = min(trial_lr * 1.1, lr * 2.0)
    return params, trace


@dataclass
class FitResult:
    items: ItemParams
    gammas: np.ndarray  # models x d
    log_posterior: float
    trace: list[float]


def _validate_binary(Y: np.ndarray) -> np.ndarray:
    Y = np.asarray(Y, dtype=np.float64)
    if not np.isin(Y, (0.0, 1.0)).all():
        raise ValueError("correctness entries must be 0 or 1")
    return Y


def fit_items(
    Y: np.ndarray,
    d: int = DEFAULT_ABILITY_DIM,
    prior_precisions: tuple[float, float, float] = (1.0, 1.0, 1.0),
    steps: int = 1500,
    lr: float = 0.05,
    seed: int = 0,
    norm_cap: float = 20.0,
) -> FitResult:
    """Joint MAP fit of item parameters and per-model abilities.

    `Y` is items x models correctness.  Priors are independent Gaussians
    with precisions (u_a, u_beta, u_gamma).  Initialization is a small
    seeded Gaussian; ascent uses backtracking so the log-posterior trace
    never decreases.  Discrimination vectors are projected onto the norm cap.
    """
    Y = _validate_binary(Y)
    if Y.ndim != 2 or Y.shape[0] < 2 or Y.shape[1] < 2:
        raise ValueError("need at least 2 items and 2 models")
    n_items, n_models = Y.shape
    u_a, u_b, u_g = prior_precisions
    rng = stream(seed, "irt-init")
    a0 = 0.1 * rng.standard_normal((n_items, d))
    b0 = 0.1 * rng.standard_normal(n_items)
    g0 = 0.1 * rng.standard_normal((n_models, d))

    def value_and_grad(params):
        a, b, g = params
        logits = a @ g.T - b[:, None]
        prior = -0.5 * (
            u_a * np.sum(a * a) + u_b * np.sum(b * b) + u_g * np.sum(g * g)
        )
        val = _bernoulli_ll(logits, Y) + prior
        if not np.isfinite(val):
            raise RuntimeError("non-finite log-posterior during item fitting")
        err = Y - expit(logits)
        return val, [
            err @ g - u_a * a,
            -err.sum(axis=1) - u_b * b,
            err.T @ a - u_g * g,
        ]

    def project(params):
        a, b, g = params
        norms = np.linalg.norm(a, axis=1, keepdims=True)
        scale = np.minimum(1.0, norm_cap / np.maximum(norms, 1e-300))
        return [a * scale, b, g]

    (a, b, g), trace = _ascend(value_and_grad, [a0, b0, g0], project, steps, lr)
    return FitResult(ItemParams(a, b, norm_cap), g, trace[-1], trace)


def fit_ability(
    y_col: np.ndarray,
    items: ItemParams,
    prior_precision: float = 1.0,
    steps: int = 500,
    lr: float = 0.1,
) -> np.ndarray:
    """MAP ability for one model's full correctness column, items frozen.

    Starts at the prior mean (zero), so uninformative items leave it there.
    """
    y = _validate_binary(y_col).ravel()
    if y.size != items.n_items:
        raise ValueError("one correctness entry per item required")

    def value_and_grad(params):
        (g,) = params
        logits = items.a @ g - items.beta
        val = _bernoulli_ll(logits, y) - 0.5 * prior_precision * float(g @ g)
        err = y - expit(logits)
        return val, [items.a.T @ err - prior_precision * g]

    (g,), _ = _ascend(value_and_grad, [np.zeros(items.dim)], lambda p: p, steps, lr)
    return g


@dataclass
class XiFit:
    xi: np.ndarray
    flat: bool  # likelihood carried no signal; xi is the uniform init


def fit_xi(
    y_sub: np.ndarray,
    endpoint_gammas: Sequence[np.ndarray],
    items_sub: ItemParams,
    steps: int = 300,
    lr: float = 0.5,
) -> XiFit:
    """Box-constrained MLE of the ability-mixing coefficients.

    `items_sub` holds the parameters of exactly the evaluated items.  The
    coefficients start uniform at 1/n and are clipped to [0, 1] after every
    step; a flat likelihood (zero gradient at the start) is flagged and the
    init returned.
    """
    y = _validate_binary(y_sub).ravel()
    if y.size == 0:
        raise ValueError("empty evaluated subset")
    if y.size != items_sub.n_items:
        raise ValueError("one correctness entry per evaluated item required")
    if len(endpoint_gammas) == 0:
        raise ValueError("need at least one endpoint ability")
    G = np.stack([np.asarray(g, dtype=np.float64) for g in endpoint_gammas])  # n x d
    n = G.shape[0]
    ag = items_sub.a @ G.T  # items x n

    def value_and_grad(params):
        (xi,) = params
        logits = ag @ xi - items_sub.beta
        err = y - expit(logits)
        return _bernoulli_ll(logits, y), [ag.T @ err]

    x0 = np.full(n, 1.0 / n)
    _, g0 = value_and_grad([x0])
    if np.linalg.norm(g0[0]) <= 1e-12:
        return XiFit(x0, flat=True)
    (xi,), _ = _ascend(
        value_and_grad, [x0], lambda p: [np.clip(p[0], 0.0, 1.0)], steps, lr
    )
    return XiFit(xi, flat=False)


def mixture_ability(xi: np.ndarray, endpoint_gammas: Sequence[np.ndarray]) -> np.ndarray:
    G = np.stack([np.asarray(g, dtype=np.float64) for g in endpoint_gammas])
    return np.asarray(xi, dtype=np.float64) @ G


def mp_irt(
    y_sub: np.ndarray,
    sub_idx: np.ndarray,
    xi: np.ndarray,
    endpoint_gammas: Sequence[np.ndarray],
    items: ItemParams,
    d_size: int | None = None,
) -> float:
    """Subset-weighted mix of observed correctness and predicted correctness
    on the unevaluated remainder.

    With the subset covering the whole dataset the estimate is exactly the
    observed mean.
    """
    y = _validate_binary(y_sub).ravel()
    sub_idx = np.asarray(sub_idx, dtype=np.int64)
    if y.size != sub_idx.size:
        raise ValueError("one correctness entry per subset index required")
    n = items.n_items if d_size is None else int(d_size)
    if sub_idx.size > n:
        raise ValueError("subset larger than the dataset")
    tau = sub_idx.size / n
    observed = tau * y.mean() if y.size else 0.0
    rest = np.setdiff1d(np.arange(n), sub_idx)
    if rest.size == 0:
        return float(y.mean())
    gamma = mixture_ability(xi, endpoint_gammas)
    p_hat = irt_prob(gamma, items.a[rest], items.beta[rest])
    return float(observed + (1.0 - tau) * np.mean(p_hat))


def gmp_irt(y_sub: np.ndarray, mp_estimate: float, c: float = 0.5) -> float:
    """Interpolate between observed subset accuracy and the model-based
    estimate with coefficient c."""
    if not 0.0 <= c <= 1.0:
        raise ValueError("c must lie in [0, 1]")
    y = _validate_binary(y_sub).ravel()
    return float(c * y.mean() + (1.0 - c) * mp_estimate)


def fit_c_adaptive(
    Y_full: np.ndarray,
    sub_idx: np.ndarray,
    items: ItemParams,
    gammas: Sequence[np.ndarray],
) -> float:
    """Average, over endpoint models, of the grid-optimal interpolation
    coefficient (ties toward smaller c).

    Each endpoint's own ability predicts the unevaluated items; the optimal
    c minimizes the absolute error against that endpoint's known
    full-dataset accuracy.
    """
    Y_full = _validate_binary(Y_full)
    sub_idx = np.asarray(sub_idx, dtype=np.int64)
    if Y_full.ndim != 2 or Y_full.shape[1] != len(gammas):
        raise ValueError("one full correctness column per endpoint required")
    best_cs = []
    for m, gamma in enumerate(gammas):
        truth = Y_full[:, m].mean()
        y_sub = Y_full[sub_idx, m]
        mp = mp_irt(y_sub, sub_idx, np.ones(1), [gamma], items, Y_full.shape[0])
        best_c, best_err = 0.0, np.inf
        for c in _C_GRID:
            err = abs(gmp_irt(y_sub, mp, float(c)) - truth)
            if err < best_err - 1e-15:
                best_c, best_err = float(c), err
        best_cs.append(best_c)
    return float(np.mean(best_cs))


def stability_harness(
    F: Callable[[object, np.ndarray], float],
    thetas: Sequence,
    n_items: int,
    subset_size: int,
    num_subsets: int,
    seed: int,
) -> dict:
    """Empirical subset-stability of a fitness over a finite candidate grid.

    ``F(theta, indices)`` evaluates the fitness on the indexed items.  Draws
    `num_subsets` uniform subsets, estimates the expected deviation per
    candidate, and checks two guarantees: per subset, minimizing on the
    subset lands within twice that subset's uniform deviation of the true
    minimum; and the averaged subset-minimum stays within the expected
    deviation of the true minimum.  Both are proved properties; a failure
    indicates an implementation bug.
    """
    thetas = list(thetas)
    if len(thetas) == 0:
        raise ValueError("empty candidate grid")
    if num_subsets < 2:
        raise ValueError("need at least two subsets")
    if not 1 <= subset_size <= n_items:
        raise ValueError("subset size out of range")
    full_idx = np.arange(n_items)
    f_full = np.array([F(t, full_idx) for t in thetas])
    star = int(np.argmin(f_full))
    deviations = np.empty((num_subsets, len(thetas)))
    per_subset = []
    for s in range(num_subsets):
        idx = stream(seed, "stability-subset", s).choice(
            n_items, size=subset_size, replace=False
        )
        idx.sort()
        f_sub = np.array([F(t, idx) for t in thetas])
        deviations[s] = np.abs(f_full - f_sub)
        eps_s = float(deviations[s].max())
        hat = int(np.argmin(f_sub))
        ok = f_full[hat] <= f_full[star] + 2.0 * eps_s + 1e-12
        per_subset.append(
            {
                "eps_uniform": eps_s,
                "sub_min": float(f_sub[hat]),
                "true_value_at_sub_argmin": float(f_full[hat]),
                "optimality_preserved": bool(ok),
            }
        )
    eps_hat = float(deviations.mean(axis=0).max())
    mean_sub_min = float(np.mean([r["sub_min"] for r in per_subset]))
    gap = abs(float(f_full[star]) - mean_sub_min)
    bound_holds = all(r["optimality_preserved"] for r in per_subset) and (
        gap <= eps_hat + 1e-12
    )
    return {
        "eps_hat": eps_hat,
        "gap": gap,
        "true_min": float(f_full[star]),
        "mean_subset_min": mean_sub_min,
        "bound_holds": bool(bound_holds),
        "per_subset": per_subset,
    }


def unbiasedness_sim(
    D_sizes: Sequence[int],
    trials: int,
    seed: int,
    n_items: int = 150,
    d: int = 5,
    xi_true: Sequence[float] = (0.7, 0.3),
) -> dict:
    """Synthetic-world error curve of the subset estimator across sizes.

    A known response world (items, endpoint abilities, true mixture) is
    sampled once per trial; for each subset size the mixing coefficients are
    refit on the subset and the estimate compared against the realized
    full-dataset accuracy.  Returns the mean absolute error per size.
    """
    sizes = [int(k) for k in D_sizes]
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sizes must be strictly increasing")
    if sizes[-1] > n_items:
        raise ValueError("largest size exceeds the item count")
    world = stream(seed, "sim-world")
    a = world.standard_normal((n_items, d))
    beta = world.standard_normal(n_items)
    items = ItemParams(a, beta, norm_cap=10.0 * np.sqrt(d) + 10.0)
    gammas = [world.standard_normal(d), world.standard_normal(d)]
    gamma_true = mixture_ability(np.asarray(xi_true), gammas)
    p_true = irt_prob(gamma_true, items.a, items.beta)
    errors = np.zeros(len(sizes))
    for trial in range(trials):
        rng = stream(seed, "sim-trial", trial)
        y_full = (rng.random(n_items) < p_true).astype(float)
        truth = y_full.mean()
        for si, k in enumerate(sizes):
            idx = stream(seed, "sim-subset", trial, si).choice(
                n_items, size=k, replace=False
            )
            idx.sort()
            fit = fit_xi(y_full[idx], gammas, items.subset(idx))
            est = mp_irt(y_full[idx], idx, fit.xi, gammas, items)
            errors[si] += abs(est - truth)
    errors /= trials
    return {"sizes": sizes, "errors": errors.tolist()}


def save_irt_json(path, items: ItemParams, gammas) -> None:
    """Persist a fitted response model as JSON.

    `gammas` maps model names to ability vectors (a sequence is keyed by
    position).  Layout: {"d": ..., "items": [{"a": [...], "beta": ...}],
    "gammas": {...}}.
    """
    import json

    if not isinstance(gammas, dict):
        gammas = {str(i): g for i, g in enumerate(gammas)}
    doc = {
        "d": items.dim,
        "items": [
            {"a": items.a[i].tolist(), "beta": float(items.beta[i])}
            for i in range(items.n_items)
        ],
        "gammas": {str(k): np.asarray(v, dtype=float).tolist() for k, v in gammas.items()},
        "norm_cap": items.norm_cap,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_irt_json(path) -> tuple[ItemParams, dict[str, np.ndarray]]:
    import json

    with open(path) as fh:
        doc = json.load(fh)
    a = np.array([item["a"] for item in doc["items"]], dtype=np.float64)
    beta = np.array([item["beta"] for item in doc["items"]], dtype=np.float64)
    if a.shape[1] != int(doc["d"]):
        raise ValueError("ability dimension inconsistent with items")
    items = ItemParams(a, beta, float(doc.get("norm_cap", 20.0)))
    gammas = {k: np.asarray(v, dtype=np.float64) for k, v in doc["gammas"].items()}
    return items, gammas


def rank_correlation(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("need two equal-length sequences of >= 2 values")
    rx = rankdata(x, method="average")
    ry = rankdata(y, method="average")
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = np.sqrt(np.sum(rx * rx) * np.sum(ry * ry))
    if denom == 0.0:
        return 0.0
    return float(np.clip(np.sum(rx * ry) / denom, -1.0, 1.0))
