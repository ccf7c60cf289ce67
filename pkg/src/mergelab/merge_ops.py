"""Parametric merge operators composed by the evolutionary search.

Coefficient semantics per method (all genes live in bounded boxes):

* ``average``          coeffs: none.
* ``task_arithmetic``  coeffs: one lambda per task, each in [0, 1].
* ``slerp``            coeffs: one interpolation t in [0, 1]; exactly 2 models.
* ``ties``             coeffs: (keep fraction in (0, 1], lambda in [0, 1]).
* ``dare_ta``          coeffs: per-task lambdas plus drop rate p in [0, 0.99].
* ``dare_ties``        coeffs: (keep fraction, lambda, drop rate p).

Stochastic methods (dare_*) require a seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .rng import stream
from .taskvec import task_arithmetic, task_vector
from .weightspace import TaskVector, WeightSet, combine, flatten, unflatten

__all__ = [
    "MergeRecipe",
    "METHODS",
    "weight_average",
    "slerp",
    "ties_merge",
    "dare",
    "apply_recipe",
    "recipe_bounds",
]

METHODS = ("average", "task_arithmetic", "slerp", "ties", "dare_ta", "dare_ties")
_STOCHASTIC = ("dare_ta", "dare_ties")
_DROP_CAP = 0.99


@dataclass(frozen=True)
class MergeRecipe:
    method: str
    coeffs: tuple[float, ...] = ()
    seed: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown merge method {self.method!r}")
        object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))
        if self.method in _STOCHASTIC and self.seed is None:
            raise ValueError(f"{self.method} requires a seed")
        if self.method not in _STOCHASTIC and self.seed is not None:
            raise ValueError(f"{self.method} takes no seed")
        for lo, hi, c in zip(*_bounds_for(self.method, len(self.coeffs)), self.coeffs):
            if not (lo <= c <= hi):
                raise ValueError(
                    f"coefficient {c} outside [{lo}, {hi}] for {self.method}"
                )

    def to_json_dict(self) -> dict:
        out = {"method": self.method, "coeffs": list(self.coeffs)}
        if self.seed is not None:
            out["seed"] = self.seed
        return out

    @classmethod
    def from_json_dict(cls, data: dict) -> "MergeRecipe":
        return cls(data["method"], tuple(data.get("coeffs", ())), data.get("seed"))


def _bounds_for(method: str, n_coeffs: int):
    if method == "average":
        los, his = [], []
    elif method == "task_arithmetic":
        los, his = [0.0] * n_coeffs, [1.0] * n_coeffs
    elif method == "slerp":
        los, his = [0.0], [1.0]
    elif method == "ties":
        los, his = [0.0, 0.0], [1.0, 1.0]
    elif method == "dare_ta":
        los = [0.0] * n_coeffs
        his = [1.0] * (n_coeffs - 1) + [_DROP_CAP]
    elif method == "dare_ties":
        los, his = [0.0, 0.0, 0.0], [1.0, 1.0, _DROP_CAP]
    else:  # pragma: no cover
        raise ValueError(method)
    if len(los) != n_coeffs:
        raise ValueError(
            f"{method} expects {len(los)} coefficients, got {n_coeffs}"
        )
    return los, his


def recipe_bounds(method: str, n_tasks: int) -> list[tuple[float, float]]:
    """Per-gene (lo, hi) boxes for a method applied to `n_tasks` models."""
    n = {
        "average": 0,
        "task_arithmetic": n_tasks,
        "slerp": 1,
        "ties": 2,
        "dare_ta": n_tasks + 1,
        "dare_ties": 3,
    }[method]
    los, his = _bounds_for(method, n)
    return list(zip(los, his))


def weight_average(models: Sequence[WeightSet]) -> WeightSet:
    """Element-wise uniform mean of the models."""
    if len(models) == 0:
        raise ValueError("need at least one model")
    return combine([1.0 / len(models)] * len(models), models)


def slerp(a: WeightSet, b: WeightSet, t: float) -> WeightSet:
    """Spherical interpolation of the full flattened parameter vectors.

    Falls back to linear interpolation when the vectors are (nearly)
    collinear.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    if a.arch != b.arch:
        raise ValueError("operands do not share an architecture")
    fa, fb = flatten(a), flatten(b)
    na, nb = np.linalg.norm(fa), np.linalg.norm(fb)
    if na == 0.0 or nb == 0.0:
        raise ValueError("slerp requires non-zero operands")
    omega = float(np.arccos(np.clip(fa @ fb / (na * nb), -1.0, 1.0)))
    if omega < 1e-6:
        out = (1.0 - t) * fa + t * fb
    else:
        s = np.sin(omega)
        out = (np.sin((1.0 - t) * omega) * fa + np.sin(t * omega) * fb) / s
    return unflatten(a.arch, out, like=WeightSet)


def _trim_top_fraction(flat: np.ndarray, keep_frac: float) -> np.ndarray:
    """Zero all but the ceil(keep_frac * P) largest-magnitude entries.

    Exactly that many entries survive; magnitude ties are broken by index.
    """
    p = flat.size
    keep = int(np.ceil(keep_frac * p))
    out = np.zeros_like(flat)
    if keep == 0:
        return out
    order = np.argsort(-np.abs(flat), kind="stable")
    out[order[:keep]] = flat[order[:keep]]
    return out


def ties_merge(
    theta_pre: WeightSet,
    taus: Sequence[TaskVector],
    trim_frac: float,
    lam: float,
) -> WeightSet:
    """Trim / elect sign / disjoint-merge the task vectors, then add.

    Per flattened coordinate: each task keeps only its top fraction of
    entries by magnitude; the sign vote is the sign of the summed surviving
    values; the merged value averages the surviving entries that agree with
    the vote (0 when the vote ties or nothing agrees).
    """
    if not 0.0 < trim_frac <= 1.0:
        raise ValueError("trim_frac must lie in (0, 1]")
    if len(taus) == 0:
        raise ValueError("need at least one task vector")
    trimmed = np.stack([_trim_top_fraction(flatten(t), trim_frac) for t in taus])
    votes = np.sign(trimmed.sum(axis=0))
    agree = (np.sign(trimmed) == votes) & (trimmed != 0.0) & (votes != 0.0)
    counts = agree.sum(axis=0)
    sums = np.where(agree, trimmed, 0.0).sum(axis=0)
    merged = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    tv = unflatten(theta_pre.arch, merged, like=TaskVector)
    return task_arithmetic(theta_pre, [tv], lam)


def dare(tau: TaskVector, p: float, seed: int) -> TaskVector:
    """Drop each coordinate independently with probability p and rescale the
    survivors by 1/(1-p); unbiased in expectation."""
    if not 0.0 <= p < 1.0:
        raise ValueError("p must lie in [0, 1)")
    flat = flatten(tau)
    if p == 0.0:
        return tau
    keep = stream(seed, "dare").random(flat.size) >= p
    out = np.where(keep, flat / (1.0 - p), 0.0)
    return unflatten(tau.arch, out, like=TaskVector)


def apply_recipe(
    recipe: MergeRecipe, theta_pre: WeightSet, models: Sequence[WeightSet]
) -> WeightSet:
    """Dispatch a recipe onto the base model and the fine-tuned models."""
    n = len(models)
    if n == 0:
        raise ValueError("need at least one model")
    if recipe.method == "slerp" and n != 2:
        raise ValueError("slerp requires exactly two models")
    expected = len(recipe_bounds(recipe.method, n))
    if len(recipe.coeffs) != expected:
        raise ValueError(
            f"{recipe.method} with {n} models expects {expected} coefficients"
        )
    if recipe.method == "average":
        return weight_average(models)
    if recipe.method == "slerp":
        return slerp(models[0], models[1], recipe.coeffs[0])
    taus = [task_vector(m, theta_pre) for m in models]
    if recipe.method == "task_arithmetic":
        scaled = [combine([lam], [t]) for lam, t in zip(recipe.coeffs, taus)]
        return task_arithmetic(theta_pre, scaled, 1.0)
    if recipe.method == "ties":
        keep, lam = recipe.coeffs
        return ties_merge(theta_pre, taus, keep, lam)
    if recipe.method == "dare_ta":
        *lams, p = recipe.coeffs
        dropped = [
            dare(t, p, stream(recipe.seed, "dare-ta", i).integers(2**63))
            for i, t in enumerate(taus)
        ]
        scaled = [combine([lam], [t]) for lam, t in zip(lams, dropped)]
        return task_arithmetic(theta_pre, scaled, 1.0)
    if recipe.method == "dare_ties":
        keep, lam, p = recipe.coeffs
        dropped = [
            dare(t, p, stream(recipe.seed, "dare-ties", i).integers(2**63))
            for i, t in enumerate(taus)
        ]
        return ties_merge(theta_pre, dropped, keep, lam)
    raise ValueError(recipe.method)  # pragma: no cover
