"""Evolutionary merging: subset extraction, response-model fitness
estimation, and genetic search over merge-recipe coefficients.

Candidate fitness never touches the full evaluation set during search: the
merged model answers only the extracted subset, the mixing coefficients of
its ability are refit there, and the estimator fills in the remainder.  All
randomness derives from the run seed through named streams, and candidate
recipes of stochastic merge methods share one fixed drop-mask seed per run,
so fitness is a deterministic function of the genes and the whole pipeline
is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .irt import ItemParams, fit_items, fit_xi, gmp_irt, mp_irt
from .merge_ops import MergeRecipe, apply_recipe, recipe_bounds
from .nnet import Dataset, mlp_forward
from .rng import stream
from .taskvec import task_vector
from .weightspace import WeightSet, combine

__all__ = [
    "Genome",
    "FitnessReport",
    "TaskEvalContext",
    "GaConfig",
    "Problem",
    "Merge3Config",
    "extract",
    "sbx",
    "poly_mutate",
    "evaluate_candidate",
    "ga_run",
    "pareto_front",
    "nsga_run",
    "merge3_run",
    "negative_transfer_rate",
    "correctness_vector",
]

_STOCHASTIC_METHODS = ("dare_ta", "dare_ties")


@dataclass(frozen=True)
class Genome:
    recipe: MergeRecipe
    bounds: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.bounds) != len(self.recipe.coeffs):
            raise ValueError("one bound pair per gene required")
        for (lo, hi), g in zip(self.bounds, self.recipe.coeffs):
            if not lo <= g <= hi:
                raise ValueError(f"gene {g} outside [{lo}, {hi}]")

    @property
    def genes(self) -> np.ndarray:
        return np.array(self.recipe.coeffs)


def extract(n_or_data, k: int, seed: int) -> np.ndarray:
    """Uniform sample of k item indices without replacement, sorted."""
    n = n_or_data if isinstance(n_or_data, (int, np.integer)) else len(n_or_data)
    if not 1 <= k <= n:
        raise ValueError("subset size out of range")
    idx = stream(seed, "extract").choice(n, size=k, replace=False)
    idx.sort()
    return idx


def _clip(genes: np.ndarray, bounds) -> np.ndarray:
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    return np.clip(genes, lo, hi)


def sbx(
    parent_a: np.ndarray,
    parent_b: np.ndarray,
    eta_c: float,
    seed: int,
    bounds: Sequence[tuple[float, float]],
) -> tuple[np.ndarray, np.ndarray]:
    """Simulated binary crossover with boundary clipping."""
    a = np.asarray(parent_a, dtype=np.float64)
    b = np.asarray(parent_b, dtype=np.float64)
    if a.shape != b.shape or a.size != len(bounds):
        raise ValueError("parents and bounds must agree in length")
    u = stream(seed, "sbx").random(a.size)
    bq = np.where(
        u <= 0.5,
        (2.0 * u) ** (1.0 / (eta_c + 1.0)),
        (1.0 / (2.0 * (1.0 - u))) ** (1.0 / (eta_c + 1.0)),
    )
    c1 = 0.5 * ((1.0 + bq) * a + (1.0 - bq) * b)
    c2 = 0.5 * ((1.0 - bq) * a + (1.0 + bq) * b)
    return _clip(c1, bounds), _clip(c2, bounds)


def poly_mutate(
    genes: np.ndarray,
    eta_m: float,
    rate: float,
    seed: int,
    bounds: Sequence[tuple[float, float]],
) -> np.ndarray:
    """Polynomial mutation per gene with probability `rate`, clipped."""
    g = np.array(genes, dtype=np.float64, copy=True)
    if g.size != len(bounds):
        raise ValueError("genes and bounds must agree in length")
    rng = stream(seed, "pm")
    hit = rng.random(g.size) < rate
    r = rng.random(g.size)
    delta = np.where(
        r < 0.5,
        (2.0 * r) ** (1.0 / (eta_m + 1.0)) - 1.0,
        1.0 - (2.0 * (1.0 - r)) ** (1.0 / (eta_m + 1.0)),
    )
    span = np.array([hi - lo for lo, hi in bounds])
    g = np.where(hit, g + delta * span, g)
    return _clip(g, bounds)


@dataclass
class TaskEvalContext:
    """Frozen per-task material for estimator-based candidate evaluation."""

    dataset: Dataset
    sub_idx: np.ndarray
    items: ItemParams
    endpoint_gammas: list[np.ndarray]
    estimator: str = "gmp"  # observed | mp | gmp
    c: float = 0.5


@dataclass
class FitnessReport:
    per_task: list[dict]
    evaluation_count: int
    quarantined: bool = False

    def chosen(self) -> list[float]:
        return [t["chosen_estimate"] for t in self.per_task]


def correctness_vector(model: WeightSet, dataset: Dataset, idx=None) -> np.ndarray:
    """Binary per-item correctness of the model on (a subset of) a dataset."""
    X = dataset.X if idx is None else dataset.X[idx]
    y = dataset.y if idx is None else dataset.y[idx]
    pred = np.argmax(mlp_forward(model, X), axis=1)
    return (pred == y).astype(float)


def evaluate_candidate(
    genome: Genome,
    theta_pre: WeightSet,
    endpoints: Sequence[WeightSet],
    contexts: Sequence[TaskEvalContext],
) -> FitnessReport:
    """Merge per the genome's recipe and estimate per-task accuracy from the
    extracted subsets.

    Any failure quarantines the candidate with zero estimates so the search
    loop keeps going.
    """
    count = 0
    try:
        merged = apply_recipe(genome.recipe, theta_pre, list(endpoints))
        per_task = []
        for ctx in contexts:
            y_sub = correctness_vector(merged, ctx.dataset, ctx.sub_idx)
            count += y_sub.size
            fit = fit_xi(y_sub, ctx.endpoint_gammas, ctx.items.subset(ctx.sub_idx))
            mp = mp_irt(
                y_sub, ctx.sub_idx, fit.xi, ctx.endpoint_gammas, ctx.items,
                ctx.dataset.n,
            )
            gmp = gmp_irt(y_sub, mp, ctx.c)
            observed = float(y_sub.mean())
            chosen = {"observed": observed, "mp": mp, "gmp": gmp}[ctx.estimator]
            per_task.append(
                {
                    "observed_sub_acc": observed,
                    "mp_irt": mp,
                    "gmp_irt": gmp,
                    "chosen_estimate": float(chosen),
                }
            )
        return FitnessReport(per_task, count)
    except (ValueError, RuntimeError):
        zeros = [
            {
                "observed_sub_acc": 0.0,
                "mp_irt": 0.0,
                "gmp_irt": 0.0,
                "chosen_estimate": 0.0,
            }
            for _ in contexts
        ]
        return FitnessReport(zeros, count, quarantined=True)


@dataclass(frozen=True)
class GaConfig:
    pop: int = 25
    iters: int = 7
    seed: int = 0
    estimator: str = "gmp"
    eta_c: float = 15.0
    eta_m: float = 20.0
    mutation_rate: float | None = None  # default 1/genome_length
    tournament: int = 2
    elitism: int = 1


@dataclass
class Problem:
    """Search problem: gene boxes, a fitness callable, and seed genomes.

    `fitness` maps a gene vector to a float (single objective) or a vector
    (multi objective); larger is better when `maximize` is set.
    """

    bounds: list[tuple[float, float]]
    fitness: Callable[[np.ndarray], float | np.ndarray]
    initial: list[np.ndarray] = field(default_factory=list)
    maximize: bool = True


def _initial_population(problem: Problem, pop: int, seed: int) -> list[np.ndarray]:
    genes = [
        _clip(np.asarray(g, dtype=np.float64), problem.bounds)
        for g in problem.initial
    ][:pop]
    rng = stream(seed, "init-pop")
    lo = np.array([b[0] for b in problem.bounds])
    hi = np.array([b[1] for b in problem.bounds])
    while len(genes) < pop:
        genes.append(lo + rng.random(len(problem.bounds)) * (hi - lo))
    return genes


def _tournament(fits: list[float], rng, size: int) -> int:
    picks = rng.integers(0, len(fits), size=size)
    best = int(picks[0])
    for i in picks[1:]:
        if fits[int(i)] > fits[best] or (fits[int(i)] == fits[best] and int(i) < best):
            best = int(i)
    return best


@dataclass
class GaResult:
    best_genes: np.ndarray
    best_fitness: float
    history: list[float]
    population: list[np.ndarray]
    fitnesses: list[float]
    generations: list[dict] = field(default_factory=list)


def ga_run(config: GaConfig, problem: Problem) -> GaResult:
    """Single-objective genetic search: tournament selection, crossover,
    mutation, one elite carried per generation (so the best-so-far history
    never decreases)."""
    sign = 1.0 if problem.maximize else -1.0
    rate = (
        config.mutation_rate
        if config.mutation_rate is not None
        else 1.0 / max(1, len(problem.bounds))
    )
    pop = _initial_population(problem, config.pop, config.seed)
    fits = [sign * float(problem.fitness(g)) for g in pop]
    history = [max(fits)]

    def snapshot():
        return {
            "genomes": [g.tolist() for g in pop],
            "estimates": [sign * f for f in fits],
        }

    generations = [snapshot()]
    for gen in range(config.iters):
        order = sorted(range(len(pop)), key=lambda i: (-fits[i], i))
        new = [pop[order[i]].copy() for i in range(config.elitism)]
        rng = stream(config.seed, "select", gen)
        pair = 0
        while len(new) < config.pop:
            i = _tournament(fits, rng, config.tournament)
            j = _tournament(fits, rng, config.tournament)
            c1, c2 = sbx(
                pop[i], pop[j], config.eta_c,
                stream(config.seed, "sbx-seed", gen, pair).integers(2**63),
                problem.bounds,
            )
            for ci, child in enumerate((c1, c2)):
                if len(new) >= config.pop:
                    break
                mutated = poly_mutate(
                    child, config.eta_m, rate,
                    stream(config.seed, "pm-seed", gen, pair, ci).integers(2**63),
                    problem.bounds,
                )
                new.append(mutated)
            pair += 1
        pop = new
        fits = [sign * float(problem.fitness(g)) for g in pop]
        history.append(max(max(fits), history[-1]))
        generations.append(snapshot())
    best = int(np.argmax(fits))
    if history[-1] > fits[best]:
        # the elite of an earlier generation was the overall best; it is
        # carried in slot 0, so this cannot happen with deterministic fitness
        best = 0
    return GaResult(
        pop[best].copy(),
        sign * fits[best],
        [sign * h for h in history],
        pop,
        [sign * f for f in fits],
        generations,
    )


def pareto_front(points: Sequence[Sequence[float]], minimize: bool = True) -> list[int]:
    """Indices of the non-dominated points; duplicates are all kept."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("points must share one objective arity")
    if not minimize:
        pts = -pts
    keep = []
    for i in range(pts.shape[0]):
        dominated = False
        for j in range(pts.shape[0]):
            if i == j:
                continue
            if np.all(pts[j] <= pts[i]) and np.any(pts[j] < pts[i]):
                dominated = True
                break
        if not dominated:
            keep.append(i)
    return keep


def _fast_nondominated_sort(pts: np.ndarray) -> list[list[int]]:
    n = pts.shape[0]
    dominates = [[] for _ in range(n)]
    counts = np.zeros(n, dtype=int)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            if np.all(pts[i] <= pts[j]) and np.any(pts[i] < pts[j]):
                dominates[i].append(j)
            elif np.all(pts[j] <= pts[i]) and np.any(pts[j] < pts[i]):
                counts[i] += 1
    fronts = [[i for i in range(n) if counts[i] == 0]]
    while fronts[-1]:
        nxt = []
        for i in fronts[-1]:
            for j in dominates[i]:
                counts[j] -= 1
                if counts[j] == 0:
                    nxt.append(j)
        fronts.append(sorted(nxt))
    return fronts[:-1]


def _crowding(pts: np.ndarray, front: list[int]) -> dict[int, float]:
    dist = {i: 0.0 for i in front}
    if len(front) <= 2:
        return {i: np.inf for i in front}
    for m in range(pts.shape[1]):
        order = sorted(front, key=lambda i: (pts[i, m], i))
        span = pts[order[-1], m] - pts[order[0], m]
        dist[order[0]] = dist[order[-1]] = np.inf
        if span == 0:
            continue
        for a, b, c in zip(order, order[1:], order[2:]):
            dist[b] += (pts[c, m] - pts[a, m]) / span
    return dist


@dataclass
class NsgaResult:
    front: list[tuple[np.ndarray, np.ndarray]]
    generations: list[dict] = field(default_factory=list)

    def __iter__(self):
        return iter(self.front)

    def __len__(self):
        return len(self.front)


def nsga_run(config: GaConfig, problem: Problem) -> NsgaResult:
    """Elitist non-dominated sorting search over >= 2 objectives; returns the
    final population's non-dominated genomes with their objective vectors,
    plus per-generation population snapshots."""
    sign = -1.0 if problem.maximize else 1.0  # internally minimize
    rate = (
        config.mutation_rate
        if config.mutation_rate is not None
        else 1.0 / max(1, len(problem.bounds))
    )

    def eval_all(genes_list):
        vals = [sign * np.asarray(problem.fitness(g), dtype=np.float64) for g in genes_list]
        if any(v.ndim != 1 or v.size < 2 for v in vals):
            raise ValueError("nsga_run needs at least two objectives")
        return vals

    pop = _initial_population(problem, config.pop, config.seed)
    objs = eval_all(pop)

    def snapshot():
        return {
            "genomes": [g.tolist() for g in pop],
            "estimates": [(sign * o).tolist() for o in objs],
        }

    generations = [snapshot()]
    for gen in range(config.iters):
        pts = np.stack(objs)
        fronts = _fast_nondominated_sort(pts)
        rank = {}
        crowd = {}
        for r, front in enumerate(fronts):
            c = _crowding(pts, front)
            for i in front:
                rank[i] = r
                crowd[i] = c[i]
        rng = stream(config.seed, "nsga-select", gen)

        def pick():
            i, j = int(rng.integers(len(pop))), int(rng.integers(len(pop)))
            ki = (rank[i], -crowd[i], i)
            kj = (rank[j], -crowd[j], j)
            return i if ki <= kj else j

        children = []
        pair = 0
        while len(children) < config.pop:
            c1, c2 = sbx(
                pop[pick()], pop[pick()], config.eta_c,
                stream(config.seed, "nsga-sbx", gen, pair).integers(2**63),
                problem.bounds,
            )
            for ci, child in enumerate((c1, c2)):
                if len(children) >= config.pop:
                    break
                children.append(
                    poly_mutate(
                        child, config.eta_m, rate,
                        stream(config.seed, "nsga-pm", gen, pair, ci).integers(2**63),
                        problem.bounds,
                    )
                )
            pair += 1
        union = pop + children
        union_objs = objs + eval_all(children)
        pts = np.stack(union_objs)
        fronts = _fast_nondominated_sort(pts)
        chosen: list[int] = []
        for front in fronts:
            if len(chosen) + len(front) <= config.pop:
                chosen.extend(front)
            else:
                c = _crowding(pts, front)
                rest = sorted(front, key=lambda i: (-c[i], i))
                chosen.extend(rest[: config.pop - len(chosen)])
                break
        pop = [union[i] for i in chosen]
        objs = [union_objs[i] for i in chosen]
        generations.append(snapshot())
    pts = np.stack(objs)
    front = _fast_nondominated_sort(pts)[0]
    return NsgaResult(
        [(pop[i].copy(), sign * objs[i]) for i in sorted(front)], generations
    )


def negative_transfer_rate(Y_endpoints: np.ndarray, Y_merged: np.ndarray) -> dict:
    """Among items some endpoint solves, the fraction the merged model gets
    wrong; 0 with a flag when no endpoint solves anything."""
    Y_endpoints = np.asarray(Y_endpoints, dtype=np.float64)
    Y_merged = np.asarray(Y_merged, dtype=np.float64).ravel()
    if Y_endpoints.ndim != 2 or Y_endpoints.shape[0] != Y_merged.size:
        raise ValueError("endpoint matrix rows must match merged vector length")
    solvable = Y_endpoints.max(axis=1) > 0
    denom = int(solvable.sum())
    if denom == 0:
        return {"ntr": 0.0, "degenerate": True}
    misses = np.logical_and(solvable, Y_merged == 0).sum()
    return {"ntr": float(misses / denom), "degenerate": False}


@dataclass(frozen=True)
class Merge3Config:
    subset_size: int
    pop: int = 25
    iters: int = 7
    seed: int = 0
    method: str = "task_arithmetic"
    estimator: str = "gmp"
    c: float = 0.5
    algorithm: str = "ga"  # ga | nsga2
    scalarize: str = "min"  # min | mean (ga with several tasks)
    ability_dim: int = 15
    item_fit_steps: int = 800

    def __post_init__(self):
        from .merge_ops import METHODS

        if self.method not in METHODS:
            raise ValueError(f"unknown merge method {self.method!r}")
        if self.estimator not in ("observed", "mp", "gmp"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.algorithm not in ("ga", "nsga2"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.scalarize not in ("min", "mean"):
            raise ValueError(f"unknown scalarization {self.scalarize!r}")
        if not 0.0 <= self.c <= 1.0:
            raise ValueError("c must lie in [0, 1]")
        if self.subset_size < 1 or self.pop < 2 or self.iters < 1:
            raise ValueError("subset_size, pop, iters must be positive")


def _identity_genomes(method: str, n_endpoints: int) -> list[np.ndarray]:
    if method == "task_arithmetic":
        genes = [np.eye(n_endpoints)[j] for j in range(n_endpoints)]
        genes.append(np.full(n_endpoints, 1.0 / n_endpoints))
        return genes
    if method == "slerp":
        return [np.array([0.0]), np.array([1.0]), np.array([0.5])]
    if method == "ties":
        return [np.array([1.0, 1.0]), np.array([1.0, 0.5])]
    if method == "dare_ta":
        genes = [np.append(np.eye(n_endpoints)[j], 0.0) for j in range(n_endpoints)]
        genes.append(np.append(np.full(n_endpoints, 1.0 / n_endpoints), 0.0))
        return genes
    if method == "dare_ties":
        return [np.array([1.0, 1.0, 0.0]), np.array([1.0, 0.5, 0.0])]
    return []


def _probe_models(
    theta_pre: WeightSet, endpoints: Sequence[WeightSet]
) -> list[WeightSet]:
    taus = [task_vector(e, theta_pre) for e in endpoints]
    probes = [theta_pre] + list(endpoints)
    probes.append(combine([1.0 / len(endpoints)] * len(endpoints), list(endpoints)))
    for tau in taus:
        probes.append(combine([1.0, 0.5], [theta_pre, tau]))
    return probes


def _genome_factory(method: str, n_endpoints: int, seed: int):
    bounds = tuple(recipe_bounds(method, n_endpoints))
    recipe_seed = (
        int(stream(seed, "recipe-seed").integers(2**63))
        if method in _STOCHASTIC_METHODS
        else None
    )

    def make(genes: np.ndarray) -> Genome:
        recipe = MergeRecipe(method, tuple(float(g) for g in genes), recipe_seed)
        return Genome(recipe, bounds)

    return make, list(bounds)


def merge3_run(
    endpoints: Sequence[WeightSet],
    theta_pre: WeightSet,
    tasks: Sequence[Dataset],
    config: Merge3Config,
) -> dict:
    """Extract subsets, fit the response model, evolve merge coefficients,
    and report the winner re-evaluated on the full datasets.

    The report carries per-generation history (or the non-dominated front),
    the final genome(s), their estimates, full-data truth accuracies, the
    endpoint and naive-average baselines, and the winner's negative-transfer
    rates.
    """
    endpoints = list(endpoints)
    tasks = list(tasks)
    if len(endpoints) < 1 or len(tasks) < 1:
        raise ValueError("need at least one endpoint and one task")
    for e in endpoints:
        if e.arch != theta_pre.arch:
            raise ValueError("all models must share an architecture")

    probes = _probe_models(theta_pre, endpoints)
    contexts = []
    for ti, data in enumerate(tasks):
        sub_idx = extract(data.n, config.subset_size, stream(config.seed, "extract", ti).integers(2**63))
        Y = np.column_stack([correctness_vector(p, data) for p in probes])
        fitres = fit_items(
            Y,
            d=config.ability_dim,
            steps=config.item_fit_steps,
            seed=int(stream(config.seed, "items", ti).integers(2**63)),
        )
        endpoint_gammas = [fitres.gammas[1 + j] for j in range(len(endpoints))]
        contexts.append(
            TaskEvalContext(
                dataset=data,
                sub_idx=sub_idx,
                items=fitres.items,
                endpoint_gammas=endpoint_gammas,
                estimator=config.estimator,
                c=config.c,
            )
        )

    make_genome, bounds = _genome_factory(config.method, len(endpoints), config.seed)

    def report_of(genes: np.ndarray) -> FitnessReport:
        return evaluate_candidate(make_genome(genes), theta_pre, endpoints, contexts)

    def scalar_fitness(genes: np.ndarray) -> float:
        chosen = report_of(genes).chosen()
        return min(chosen) if config.scalarize == "min" else float(np.mean(chosen))

    def vector_fitness(genes: np.ndarray) -> np.ndarray:
        return np.asarray(report_of(genes).chosen())

    ga_cfg = GaConfig(
        pop=config.pop, iters=config.iters, seed=config.seed, estimator=config.estimator
    )
    initial = _identity_genomes(config.method, len(endpoints))

    def truth_of(genes: np.ndarray) -> dict:
        merged = apply_recipe(make_genome(genes).recipe, theta_pre, endpoints)
        accs = [float(correctness_vector(merged, d).mean()) for d in tasks]
        ntrs = []
        for d in tasks:
            ys = np.column_stack([correctness_vector(e, d) for e in endpoints])
            ntrs.append(negative_transfer_rate(ys, correctness_vector(merged, d)))
        return {"accuracies": accs, "min_accuracy": min(accs), "ntr": ntrs}

    if config.algorithm == "ga":
        result = ga_run(ga_cfg, Problem(bounds, scalar_fitness, initial))
        best_genes = result.best_genes
        winners = [best_genes]
        history = result.history
        generations = result.generations
        front = None
    elif config.algorithm == "nsga2":
        if len(tasks) < 2:
            raise ValueError("nsga2 requires at least two objectives")
        nsga = nsga_run(ga_cfg, Problem(bounds, vector_fitness, initial))
        # winner for reporting: best worst-task estimate on the front
        best_genes = max(
            (g for g, _ in nsga.front), key=lambda g: min(vector_fitness(g))
        )
        winners = [g for g, _ in nsga.front]
        history = None
        generations = nsga.generations
        front = [
            {"genes": g.tolist(), "estimates": v.tolist()} for g, v in nsga.front
        ]
    else:
        raise ValueError(f"unknown algorithm {config.algorithm!r}")

    # baselines computed directly (not through recipes, which may not cover
    # the uniform average for every method)
    naive = combine([1.0 / len(endpoints)] * len(endpoints), endpoints)
    baseline_models = {"naive_average": naive}
    for j, e in enumerate(endpoints):
        baseline_models[f"endpoint_{j}"] = e
    baselines = {}
    for name, model in baseline_models.items():
        accs = [float(correctness_vector(model, d).mean()) for d in tasks]
        baselines[name] = {"accuracies": accs, "min_accuracy": min(accs)}

    best_report = report_of(best_genes)
    return {
        "method": config.method,
        "algorithm": config.algorithm,
        "best_genes": best_genes.tolist(),
        "best_estimates": best_report.chosen(),
        "best_truth": truth_of(best_genes),
        "history": history,
        "generations": generations,
        "front": front,
        "baselines": baselines,
        "subset_size": config.subset_size,
        "seed": config.seed,
        "winners": [g.tolist() for g in winners],
    }
