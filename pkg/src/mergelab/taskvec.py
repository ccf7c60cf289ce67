"""Task vectors, task arithmetic, and numerical checks of their
gradient-descent interpretation.

Under full-batch GD, a one-epoch task vector is the scaled negative task
gradient, so adding the scaled vectors to the base weights reproduces one
joint training step exactly.  Over k epochs, per-task and joint training
drift apart; the drift decomposes into a first-order gradient-mismatch term
that cancels across tasks and a second-order curvature term.  The quantities
below let tests verify the quadratic scaling of the gap and the cubic
scaling of the residual after removing the curvature term.

Index conventions (trajectory[j] is the joint model after j epochs):

* ``mismatch(t, theta)``: alpha * sum_t' grad_t'(theta) - grad_t(theta).
* ``p_t^k``: sum of mismatches over trajectory points 0..k.
* ``s_t^k``: sum over j of Hessian_t(trajectory[j+1]) applied to p_t^j.
* curvature term for a k-epoch gap: -alpha * sum_t s_t^{k-2}.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nnet import (
    ACTIVATION_DERIVATIVE_BOUNDS,
    Dataset,
    TrainConfig,
    hvp,
    loss_and_grad,
    train,
)
from .weightspace import ArchSpec, TaskVector, WeightSet, combine, cosine_sim, flatten

__all__ = [
    "task_vector",
    "task_arithmetic",
    "multitask_gd",
    "TheoryTerms",
    "theory_terms",
    "second_order_gap_check",
    "bound_C",
    "atm_delta_threshold",
    "gradient_diagnostics",
]


def task_vector(theta_t: WeightSet, theta_pre: WeightSet) -> TaskVector:
    """Element-wise displacement theta_t - theta_pre."""
    if theta_t.arch != theta_pre.arch:
        raise ValueError("operands do not share an architecture")
    diff = combine([1.0, -1.0], [theta_t, theta_pre])
    return TaskVector(diff.arch, diff.layers)


def task_arithmetic(
    theta_pre: WeightSet, taus: Sequence[TaskVector], lam: float
) -> WeightSet:
    """theta_pre + lam * sum_t taus[t]."""
    if len(taus) == 0:
        raise ValueError("need at least one task vector")
    out = combine([1.0] + [lam] * len(taus), [theta_pre] + list(taus))
    return WeightSet(out.arch, out.layers)


def _sum_grads(w: WeightSet, tasks: Sequence[Dataset]) -> TaskVector:
    grads = [loss_and_grad(w, t)[1] for t in tasks]
    return combine([1.0] * len(grads), grads)


def multitask_gd(
    theta0: WeightSet, tasks: Sequence[Dataset], step: float, epochs: int
) -> list[WeightSet]:
    """Full-batch GD on the summed per-task mean losses; returns the
    trajectory including the start point."""
    traj = [theta0]
    w = theta0
    for _ in range(epochs):
        g = _sum_grads(w, tasks)
        w = combine([1.0, -step], [w, g])
        traj.append(w)
    return traj


@dataclass
class TheoryTerms:
    """Per-task drift terms and the aggregate curvature term.

    ``r[t]`` is the gradient mismatch at the base point, ``p[t]`` its
    accumulation over the supplied trajectory (index k), ``s[t]`` the
    curvature accumulation entering the k-epoch gap (index k-2), and ``C``
    the aggregate such that the k-epoch gap is eta^2 * C up to cubic terms.
    """

    r: list[TaskVector]
    p: list[TaskVector]
    s: list[TaskVector]
    C: TaskVector
    alpha: float
    eta: float
    k: int


def _zero_like(w: WeightSet) -> TaskVector:
    return TaskVector(
        w.arch,
        tuple((np.zeros_like(wm), np.zeros_like(bv)) for wm, bv in w.layers),
    )


def theory_terms(
    tasks: Sequence[Dataset],
    mt_trajectory: Sequence[WeightSet],
    alpha: float,
    eta: float,
    k: int,
) -> TheoryTerms:
    """Evaluate the drift/curvature terms along a joint-training trajectory.

    The trajectory must have been produced with step ``alpha * eta`` on the
    summed loss (a mismatch is detected from its first step and reported as a
    warning; it cannot be verified beyond that).  Requires length >= k + 1.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(mt_trajectory) < k + 1:
        raise ValueError("trajectory too short for the requested k")
    theta_pre = mt_trajectory[0]
    T = len(tasks)

    g0 = _sum_grads(theta_pre, tasks)
    expected_step = -alpha * eta
    actual = flatten(mt_trajectory[1]) - flatten(theta_pre)
    ref = expected_step * flatten(g0)
    scale = max(1.0, float(np.abs(ref).max()))
    if np.abs(actual - ref).max() > 1e-6 * scale:
        warnings.warn(
            "trajectory first step does not look like alpha*eta on the summed "
            "loss; theory terms may not be meaningful",
            stacklevel=2,
        )

    # per-trajectory-point per-task gradients and the summed gradient
    grads = []  # grads[j][t]
    for j in range(k + 1):
        grads.append([loss_and_grad(mt_trajectory[j], tasks[t])[1] for t in range(T)])

    def mismatch(j: int, t: int) -> TaskVector:
        total = combine([alpha] * T, grads[j])
        return combine([1.0, -1.0], [total, grads[j][t]])

    r = [mismatch(0, t) for t in range(T)]
    p_running = [mismatch(0, t) for t in range(T)]  # p_t^0
    p_by_index = [[_p for _p in p_running]]
    for j in range(1, k + 1):
        p_running = [
            combine([1.0, 1.0], [p_running[t], mismatch(j, t)]) for t in range(T)
        ]
        p_by_index.append(list(p_running))
    p = p_by_index[k]

    # curvature accumulation entering the k-epoch gap: needs points 1..k-1
    s = []
    for t in range(T):
        acc = _zero_like(theta_pre)
        for j in range(0, k - 1):
            hv = hvp(mt_trajectory[j + 1], tasks[t], p_by_index[j][t])
            acc = combine([1.0, 1.0], [acc, hv])
        s.append(acc)
    C = combine([-alpha] * T, s) if T else _zero_like(theta_pre)
    return TheoryTerms(r=r, p=p, s=s, C=C, alpha=alpha, eta=eta, k=k)


def second_order_gap_check(
    tasks: Sequence[Dataset],
    theta_pre: WeightSet,
    alpha: float,
    etas: Sequence[float],
    k: int,
    gap_slope_window: tuple[float, float] = (1.7, 2.3),
    residual_slope_window: tuple[float, float] = (2.5, 3.5),
) -> dict:
    """Compare k-epoch task arithmetic against joint training across step
    sizes and fit log-log slopes of the gap and the curvature-corrected
    residual.

    The gap should scale quadratically with the step size and the residual
    after subtracting the curvature term cubically.  For k = 1 the gap is
    identically zero (up to rounding) and no slopes are fit.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(etas) < 3 or any(b >= a for a, b in zip(etas, etas[1:])):
        raise ValueError("etas must be strictly decreasing with >= 3 values")
    records = []
    for eta in etas:
        taus = []
        for t in tasks:
            res = train(theta_pre, t, TrainConfig(eta=eta, epochs=k))
            if res.diverged:
                raise RuntimeError(f"per-task training diverged at eta={eta}")
            taus.append(task_vector(res.trajectory[-1], theta_pre))
        theta_ta = task_arithmetic(theta_pre, taus, alpha)
        mt_traj = multitask_gd(theta_pre, tasks, alpha * eta, k)
        gap = flatten(theta_ta) - flatten(mt_traj[-1])
        if k >= 2:
            terms = theory_terms(tasks, mt_traj, alpha, eta, k)
            resid = gap - eta**2 * flatten(terms.C)
        else:
            resid = gap
        records.append(
            {
                "eta": float(eta),
                "gap_norm": float(np.linalg.norm(gap)),
                "gap_max": float(np.abs(gap).max()),
                "residual_norm": float(np.linalg.norm(resid)),
            }
        )
    out: dict = {"records": records, "k": k, "alpha": alpha}
    if k == 1:
        out["slopes"] = {"gap": None, "residual": None}
        out["pass"] = all(r["gap_norm"] == 0.0 or r["gap_max"] <= 1e-13 for r in records)
        return out
    loge = np.log([r["eta"] for r in records])
    slope_gap = float(np.polyfit(loge, np.log([r["gap_norm"] for r in records]), 1)[0])
    slope_resid = float(
        np.polyfit(loge, np.log([r["residual_norm"] for r in records]), 1)[0]
    )
    out["slopes"] = {"gap": slope_gap, "residual": slope_resid}
    out["pass"] = (
        gap_slope_window[0] <= slope_gap <= gap_slope_window[1]
        and residual_slope_window[0] <= slope_resid <= residual_slope_window[1]
    )
    return out


def bound_C(
    arch: ArchSpec,
    weight_norms: Sequence[float],
    M_x: float,
    h: int,
    T: int,
    alpha: float,
) -> dict:
    """Closed-form uniform bounds on the curvature term's 2-norm.

    `weight_norms` are per-layer spectral-norm bounds; `M_x` bounds input
    norms; `h` is the trajectory index entering the curvature sum.  Returns
    the general-activation bound and, for relu networks, the tighter relu
    form (the general form degenerates to 0 there because relu has zero
    second derivative).
    """
    if len(weight_norms) != arch.n_layers:
        raise ValueError("need one spectral norm bound per layer")
    if any(s <= 0 for s in weight_norms) or M_x <= 0:
        raise ValueError("weight norms and M_x must be positive")
    if h < 0:
        raise ValueError("h must be >= 0")
    beta, gamma = ACTIVATION_DERIVATIVE_BOUNDS[arch.activation]
    L = arch.n_layers
    pi = float(np.prod(weight_norms))
    binom = (h + 1) * (h + 2) / 2.0
    task_factor = binom * abs(alpha * T - 1)
    h_general = 2.0 * gamma * M_x**2 * pi**2 * beta ** (2 * L - 2)
    g_general = np.sqrt(2.0) * M_x * pi * beta ** (L - 1)
    general = T * task_factor * h_general * g_general
    out = {"general": float(general), "relu": None}
    if arch.activation == "relu":
        h_relu = 0.5 * np.sqrt(2.0) * M_x**3 * pi**3 * beta ** (3 * L - 3)
        g_relu = np.sqrt(2.0) * M_x * pi
        out["relu"] = float((T / 2.0) * task_factor * h_relu * g_relu)
    return out


def atm_delta_threshold(deltas: Sequence[tuple[float, int]]) -> dict:
    """Loss-drop threshold test for epoch-wise merged training.

    `deltas` holds per-task (mean-loss decrease, sample count) pairs; a
    positive decrease means the task improved.  Computes the stated
    threshold `delta` alongside `delta_sufficient`, the threshold the
    bounding argument actually supports: exceeding the latter guarantees the
    sample-weighted mean loss also decreases.  (The stated form uses the
    smallest increasing / largest decreasing counts; the chain of
    inequalities behind it requires the largest increasing / smallest
    decreasing counts instead, so only `delta_sufficient` is a guarantee.)
    """
    if len(deltas) == 0:
        raise ValueError("need at least one task delta")
    T = len(deltas)
    dec = [(d, n) for d, n in deltas if d > 0]
    inc = [(d, n) for d, n in deltas if d <= 0]
    if inc and not dec:
        raise ValueError("threshold undefined: no task with decreasing loss")
    if inc:
        inc_abs = sum(abs(d) for d, _ in inc)
        delta = (
            (1.0 / T)
            * (1.0 - min(n for _, n in inc) / max(n for _, n in dec))
            * inc_abs
        )
        ratio = max(n for _, n in inc) / min(n for _, n in dec)
        delta_sufficient = (1.0 / T) * max(0.0, ratio - 1.0) * inc_abs
    else:
        delta = 0.0
        delta_sufficient = 0.0
    pa_atm = sum(d for d, _ in deltas) / T
    total_n = sum(n for _, n in deltas)
    target_delta = sum(d * n for d, n in deltas) / total_n
    return {
        "delta": float(delta),
        "delta_sufficient": float(delta_sufficient),
        "pa_atm_delta": float(pa_atm),
        "hypothesis_holds": bool(pa_atm > delta),
        "conclusion_guaranteed": bool(pa_atm > delta_sufficient),
        "target_delta": float(target_delta),
        "target_decreases": bool(target_delta > 0),
    }


def gradient_diagnostics(trajectory: Sequence[WeightSet], dataset: Dataset) -> dict:
    """Per-epoch normalized gradient norms and cumulative-displacement
    cosines along a training trajectory."""
    if len(trajectory) < 2:
        raise ValueError("trajectory too short")
    norms = []
    for w in trajectory[:-1]:
        _, g = loss_and_grad(w, dataset)
        norms.append(float(np.linalg.norm(flatten(g))))
    total = sum(norms)
    shares = [n / total if total > 0 else 0.0 for n in norms]
    tau1 = task_vector(trajectory[1], trajectory[0])
    cosines = []
    flags = []
    for w in trajectory[1:]:
        tau_k = task_vector(w, trajectory[0])
        val, degenerate = cosine_sim(tau1, tau_k, return_degenerate=True)
        cosines.append(val)
        flags.append(degenerate)
    return {
        "epoch_grad_norm_shares": shares,
        "cum_cosines": cosines,
        "degenerate_cosines": flags,
    }
