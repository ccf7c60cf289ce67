"""Per-layer SVD of task matrices: low-rank truncation, interference
measurement, orthogonalized merging, and compression.

Per-layer task matrices are decomposed with a deterministic sign convention
(each left singular vector's largest-magnitude entry is made positive, ties
to the earliest index) so that bundles are reproducible across runs.  Biases
and other 1-D parameters are not decomposed: merging falls back to task
arithmetic on them and compression stores them verbatim.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .weightspace import (
    ArchSpec,
    TaskVector,
    WeightSet,
    combine,
    read_container,
    write_container,
)

__all__ = [
    "SvdBundle",
    "layer_svd",
    "truncate",
    "sti",
    "procrustes",
    "whiten",
    "tsv_merge",
    "tsv_compress",
    "reconstruct",
    "storage_params",
    "procrustes_error_compare",
    "equal_blocks_procrustes_error",
    "merge_rank",
    "save_bundle",
    "load_bundle",
]

_WHITEN_FLOOR = 1e-12


def layer_svd(delta: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reduced SVD of a layer matrix with a deterministic sign convention.

    Returns (U, sigma, V) with delta ~= U @ diag(sigma) @ V.T; singular
    values below 1e-12 of the largest are zeroed.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if delta.ndim != 2:
        raise ValueError("layer matrices must be 2-D")
    if not np.isfinite(delta).all():
        raise ValueError("layer matrix must be finite")
    u, s, vh = np.linalg.svd(delta, full_matrices=False)
    v = vh.T
    if s.size and s[0] > 0:
        s = np.where(s < 1e-12 * s[0], 0.0, s)
    for j in range(u.shape[1]):
        idx = int(np.argmax(np.abs(u[:, j])))
        if u[idx, j] < 0:
            u[:, j] = -u[:, j]
            v[:, j] = -v[:, j]
    return u, s, v


@dataclass(frozen=True)
class SvdBundle:
    """Per-layer, per-task truncated singular triples plus bias displacewments.

    ``triples[l][t] = (U, sigma, V)`` for layer l+1 and bundled task t;
    ``bias_deltas[t][l]`` is that task's bias displacement at layer l+1.
    ``task_ids`` map bundle positions back to the caller's task indices.
    """

    arch: ArchSpec
    task_ids: tuple[int, ...]
    ranks: tuple[int, ...]
    triples: tuple[tuple[tuple[np.ndarray, np.ndarray, np.ndarray], ...], ...]
    bias_deltas: tuple[tuple[np.ndarray, ...], ...]

    def __post_init__(self):
        if len(self.ranks) != self.arch.n_layers:
            raise ValueError("one rank per layer required")
        if len(self.triples) != self.arch.n_layers:
            raise ValueError("one triple row per layer required")
        T = len(self.task_ids)
        for li, row in enumerate(self.triples, start=1):
            if len(row) != T:
                raise ValueError("one triple per task per layer required")
            rows, cols = self.arch.layer_shape(li)
            for u, s, v in row:
                k = s.size
                if u.shape != (rows, k) or v.shape != (cols, k):
                    raise ValueError(f"layer {li}: inconsistent factor shapes")
                if np.any(np.diff(s) > 1e-12) or np.any(s < 0):
                    raise ValueError("singular values must be descending >= 0")
                if k:
                    if np.abs(u.T @ u - np.eye(k)).max() > 1e-9:
                        raise ValueError("left factors must be orthonormal")
                    if np.abs(v.T @ v - np.eye(k)).max() > 1e-9:
                        raise ValueError("right factors must be orthonormal")
        if len(self.bias_deltas) != T:
            raise ValueError("one bias row per task required")

    @property
    def n_tasks(self) -> int:
        return len(self.task_ids)

    def position(self, task_id: int) -> int:
        try:
            return self.task_ids.index(task_id)
        except ValueError as exc:
            raise KeyError(f"unknown task id {task_id}") from exc

    def right_basis(self, layer: int, position: int) -> np.ndarray:
        """Right singular vectors of a bundled task at `layer` (1-based)."""
        return self.triples[layer - 1][position][2]


def _as_layer_matrices(tau) -> list[np.ndarray]:
    if isinstance(tau, TaskVector):
        return [tau.weight(i) for i in range(1, tau.arch.n_layers + 1)]
    return [np.asarray(m, dtype=np.float64) for m in tau]


def bundle_tasks(
    arch: ArchSpec,
    taus: Sequence[TaskVector],
    ranks: Sequence[int],
    task_ids: Sequence[int] | None = None,
) -> SvdBundle:
    """Decompose each task's layer matrices and keep the top `ranks[l]`."""
    if task_ids is None:
        task_ids = tuple(range(len(taus)))
    triples = []
    for li in range(1, arch.n_layers + 1):
        k = int(ranks[li - 1])
        if k < 1 or k > min(arch.layer_shape(li)):
            raise ValueError(f"rank {k} out of range at layer {li}")
        row = []
        for tau in taus:
            u, s, v = layer_svd(tau.weight(li))
            row.append((u[:, :k].copy(), s[:k].copy(), v[:, :k].copy()))
        triples.append(tuple(row))
    biases = tuple(
        tuple(tau.bias(i).copy() for i in range(1, arch.n_layers + 1))
        for tau in taus
    )
    return SvdBundle(arch, tuple(task_ids), tuple(int(r) for r in ranks), tuple(triples), biases)


def truncate(bundle: SvdBundle, k: int) -> SvdBundle:
    """Keep the top-k components per task per layer."""
    if k < 1 or any(k > r for r in bundle.ranks):
        raise ValueError("k out of range for this bundle")
    triples = tuple(
        tuple((u[:, :k].copy(), s[:k].copy(), v[:, :k].copy()) for u, s, v in row)
        for row in bundle.triples
    )
    return SvdBundle(
        bundle.arch,
        bundle.task_ids,
        tuple(min(k, r) for r in bundle.ranks),
        triples,
        bundle.bias_deltas,
    )


def sti(task_deltas: Sequence, k: int) -> tuple[float, list[float]]:
    """Singular-task interference of the rank-k decompositions.

    Concatenates the per-task rank-k factors per layer and measures the
    entry-wise L1 norm of (U^T U - I) Sigma (V^T V - I); zero when all task
    subspaces are mutually orthogonal.  Returns the sum over layers and the
    per-layer values.
    """
    if len(task_deltas) < 2:
        raise ValueError("need at least two tasks")
    mats = [_as_layer_matrices(t) for t in task_deltas]
    n_layers = len(mats[0])
    per_layer = []
    for li in range(n_layers):
        us, ss, vs = [], [], []
        for t in range(len(mats)):
            u, s, v = layer_svd(mats[t][li])
            us.append(u[:, :k])
            ss.append(s[:k])
            vs.append(v[:, :k])
        U = np.hstack(us)
        V = np.hstack(vs)
        sigma = np.diag(np.concatenate(ss))
        gu = U.T @ U - np.eye(U.shape[1])
        gv = V.T @ V - np.eye(V.shape[1])
        per_layer.append(float(np.abs(gu @ sigma @ gv).sum()))
    return float(sum(per_layer)), per_layer


def procrustes(x: np.ndarray) -> np.ndarray:
    """Nearest matrix with orthonormal columns in Frobenius norm: P Q^T from
    the SVD x = P D Q^T."""
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("input must be finite")
    p, _, qt = np.linalg.svd(x, full_matrices=False)
    return p @ qt


def whiten(x: np.ndarray) -> np.ndarray:
    """x (x^T x)^{-1/2} with eigenvalues floored at 1e-12 in magnitude."""
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("input must be finite")
    gram = x.T @ x
    lam, q = np.linalg.eigh(gram)
    inv_sqrt = 1.0 / np.sqrt(np.abs(lam) + _WHITEN_FLOOR)
    return x @ (q * inv_sqrt) @ q.T


def merge_rank(arch: ArchSpec, layer: int, n_tasks: int) -> int:
    """Per-layer retained rank for merging: floor(min dim / T), at least 1."""
    return max(1, min(arch.layer_shape(layer)) // n_tasks)


def tsv_merge(
    theta_pre: WeightSet, taus: Sequence[TaskVector], alpha: float = 1.0
) -> WeightSet:
    """Low-rank orthogonalized merge of the task matrices onto the base.

    Per layer: each task keeps its top floor(min_dim / T) components (at
    least one); the kept left/right factors are concatenated, orthogonalized
    with Procrustes, and recombined with the block-diagonal singular values;
    the result is added to the base with coefficient alpha.  Biases fall
    back to task arithmetic with coefficient alpha / T.
    """
    if len(taus) == 0:
        raise ValueError("need at least one task vector")
    arch = theta_pre.arch
    for t in taus:
        if t.arch != arch:
            raise ValueError("task vectors do not share the base architecture")
    T = len(taus)
    layers = []
    for li in range(1, arch.n_layers + 1):
        k = merge_rank(arch, li, T)
        us, ss, vs = [], [], []
        for tau in taus:
            u, s, v = layer_svd(tau.weight(li))
            us.append(u[:, :k])
            ss.append(s[:k])
            vs.append(v[:, :k])
        U = np.hstack(us)
        V = np.hstack(vs)
        sigma = np.diag(np.concatenate(ss))
        u_perp = procrustes(U)
        v_perp = procrustes(V)
        merged = u_perp @ sigma @ v_perp.T
        w = theta_pre.weight(li) + alpha * merged
        b = theta_pre.bias(li) + (alpha / T) * sum(tau.bias(li) for tau in taus)
        layers.append((w, b))
    return WeightSet(arch, tuple(layers))


def tsv_compress(
    tau: TaskVector, k: int | Sequence[int], task_id: int = 0
) -> SvdBundle:
    """Store one task's layer matrices as rank-k triples; biases verbatim.

    `k` may be a single rank or one rank per layer.
    """
    arch = tau.arch
    if isinstance(k, (int, np.integer)):
        ranks = [int(k)] * arch.n_layers
    else:
        ranks = [int(x) for x in k]
    return bundle_tasks(arch, [tau], ranks, task_ids=(task_id,))


def reconstruct(bundle: SvdBundle, task_id: int) -> TaskVector:
    """Rebuild one bundled task's displacement from its stored factors."""
    pos = bundle.position(task_id)
    layers = []
    for li in range(1, bundle.arch.n_layers + 1):
        u, s, v = bundle.triples[li - 1][pos]
        layers.append((u @ np.diag(s) @ v.T, bundle.bias_deltas[pos][li - 1].copy()))
    return TaskVector(bundle.arch, tuple(layers))


def storage_params(arch: ArchSpec, k_prime: int) -> dict:
    """Parameter counts of raw layers versus rank-k' factored storage.

    A layer compresses iff k' < d*m / (d + m + 1); `k_bound` reports the
    tightest per-layer bound and `compresses` whether every layer satisfies
    it.  Bias vectors are counted identically on both sides.
    """
    if k_prime < 1:
        raise ValueError("k_prime must be >= 1")
    params_nn = 0
    params_tsv = 0
    bounds = []
    for li in range(1, arch.n_layers + 1):
        d, m = arch.layer_shape(li)
        params_nn += d * m + arch.layer_widths[li]
        params_tsv += d * k_prime + k_prime + k_prime * m + arch.layer_widths[li]
        bounds.append(d * m / (d + m + 1))
    return {
        "params_nn": int(params_nn),
        "params_tsv": int(params_tsv),
        "compresses": bool(all(k_prime < b for b in bounds)),
        "k_bound": float(min(bounds)),
    }


def _random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def hypothesis_rank_bound(T: int, n: int) -> float:
    """Largest k for which truncated orthogonalization is provably no worse:
    n (T - 2 sqrt(T)) / T."""
    return n * (T - 2.0 * np.sqrt(T)) / T


def procrustes_error_compare(
    T: int, n: int, k: int, trials: int, seed: int
) -> dict:
    """Compare Procrustes error on concatenations of T random orthogonal
    n x n blocks against their k-column truncations.

    Within the hypothesis k <= n (T - 2 sqrt(T)) / T the truncated error is
    provably no larger; inputs outside it are refused.
    """
    if T <= 4:
        raise ValueError("T must exceed 4 (the bound is vacuous otherwise)")
    if k < 1:
        raise ValueError("k must be >= 1")
    bound = hypothesis_rank_bound(T, n)
    if k > bound:
        raise ValueError(
            f"k={k} violates the hypothesis k <= n(T - 2 sqrt(T))/T = {bound:.3f}; "
            "choose a smaller rank"
        )
    from .rng import stream

    full_errors, trunc_errors = [], []
    for trial in range(trials):
        rng = stream(seed, "procrustes-compare", trial)
        blocks = [_random_orthogonal(n, rng) for _ in range(T)]
        U = np.hstack(blocks)
        U_hat = np.hstack([b[:, :k] for b in blocks])
        full_errors.append(float(np.linalg.norm(U - procrustes(U))))
        trunc_errors.append(float(np.linalg.norm(U_hat - procrustes(U_hat))))
    holds = all(f >= t - 1e-9 for f, t in zip(full_errors, trunc_errors))
    return {
        "full_errors": full_errors,
        "trunc_errors": trunc_errors,
        "theorem_holds": bool(holds),
        "k_bound": float(bound),
    }


def equal_blocks_procrustes_error(T: int, n: int, seed: int) -> float:
    """Procrustes error of T identical orthogonal blocks; equals
    sqrt(n) (sqrt(T) - 1) analytically."""
    from .rng import stream

    q = _random_orthogonal(n, stream(seed, "equal-blocks"))
    U = np.hstack([q] * T)
    return float(np.linalg.norm(U - procrustes(U)))


# -- persistence --------------------------------------------------------------


def save_bundle(bundle: SvdBundle, path) -> None:
    """Persist a bundle in the MWS container.

    Tensor names follow ``U.L{l}.T{i}`` / ``S.L{l}.T{i}`` / ``V.L{l}.T{i}``
    with ``b.L{l}`` for a single-task bundle and ``b.L{l}.T{i}`` otherwise.
    """
    manifest = {
        "widths": list(bundle.arch.layer_widths),
        "activation": bundle.arch.activation,
        "has_bias": bundle.arch.has_bias,
        "rank": int(max(bundle.ranks)),
        "tasks": bundle.n_tasks,
        "task_ids": list(bundle.task_ids),
        "ranks": list(bundle.ranks),
    }
    tensors = []
    single = bundle.n_tasks == 1
    for li in range(1, bundle.arch.n_layers + 1):
        for pos in range(bundle.n_tasks):
            u, s, v = bundle.triples[li - 1][pos]
            tensors.append((f"U.L{li}.T{pos}", u))
            tensors.append((f"S.L{li}.T{pos}", s))
            tensors.append((f"V.L{li}.T{pos}", v))
        for pos in range(bundle.n_tasks):
            name = f"b.L{li}" if single else f"b.L{li}.T{pos}"
            tensors.append((name, bundle.bias_deltas[pos][li - 1]))
    write_container(path, manifest, tensors)


def load_bundle(path) -> SvdBundle:
    manifest, tensors = read_container(path)
    arch = ArchSpec(
        tuple(manifest["widths"]), manifest["activation"], bool(manifest["has_bias"])
    )
    n_tasks = int(manifest["tasks"])
    task_ids = tuple(manifest.get("task_ids", range(n_tasks)))
    ranks = tuple(int(r) for r in manifest.get("ranks", [manifest["rank"]] * arch.n_layers))
    triples = []
    biases: list[list[np.ndarray]] = [[] for _ in range(n_tasks)]
    for li in range(1, arch.n_layers + 1):
        row = []
        for pos in range(n_tasks):
            row.append(
                (
                    tensors[f"U.L{li}.T{pos}"],
                    tensors[f"S.L{li}.T{pos}"],
                    tensors[f"V.L{li}.T{pos}"],
                )
            )
            bname = f"b.L{li}" if n_tasks == 1 else f"b.L{li}.T{pos}"
            biases[pos].append(tensors[bname])
        triples.append(tuple(row))
    return SvdBundle(
        arch,
        task_ids,
        ranks,
        tuple(triples),
        tuple(tuple(b) for b in biases),
    )
