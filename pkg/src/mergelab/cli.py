"""Command-line front end: orchestrates experiments and emits CSV/JSON.

Every run writes a manifest (config hash, seed, tool version, status) into
the output directory.  Reports are byte-reproducible for identical inputs:
floats print with 17 significant digits (12 in interpolation-curve CSVs),
JSON keys are sorted, and no timestamps are recorded.

Exit codes: 0 success, 2 validation error (bad flags, schema violation,
missing file), 1 runtime failure after validation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import align as al
from . import evolve as ev
from . import irt as ir
from . import mass as ms
from . import merge_ops as mo
from . import nnet as nn
from . import taskvec as tv
from . import tsv as ts
from . import weightspace as wsp

_ENV_SEED = "MERGELAB_SEED"


class CliValidationError(ValueError):
    """Bad invocation or config; maps to exit code 2."""


# -- deterministic serialization ---------------------------------------------


def _fmt_float(x: float, digits: int = 17) -> str:
    if x != x or x in (float("inf"), float("-inf")):
        return "null"  # undefined values stay parseable
    return format(float(x), f".{digits}g")


def _json_text(obj, digits: int = 17) -> str:
    def render(o):
        if isinstance(o, float):
            return _fmt_float(o, digits)
        if isinstance(o, bool) or o is None:
            return json.dumps(o)
        if isinstance(o, (int, str)):
            return json.dumps(o)
        if isinstance(o, (list, tuple)):
            return "[" + ", ".join(render(v) for v in o) + "]"
        if isinstance(o, dict):
            items = sorted(o.items(), key=lambda kv: str(kv[0]))
            return (
                "{"
                + ", ".join(f"{json.dumps(str(k))}: {render(v)}" for k, v in items)
                + "}"
            )
        if isinstance(o, np.ndarray):
            return render(o.tolist())
        if isinstance(o, (np.floating,)):
            return _fmt_float(float(o), digits)
        if isinstance(o, (np.integer,)):
            return json.dumps(int(o))
        raise TypeError(f"cannot serialize {type(o).__name__}")

    return render(obj) + "\n"


def _write_json(path: Path, obj, digits: int = 17) -> None:
    path.write_text(_json_text(obj, digits))


def _write_csv(path: Path, header: list[str], rows, digits: int = 17) -> None:
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for v in row:
            if isinstance(v, (float, np.floating)):
                cells.append(_fmt_float(float(v), digits))
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")


# -- config plumbing ----------------------------------------------------------


def _require(cfg: dict, key: str, kind=None):
    if key not in cfg:
        raise CliValidationError(f"config missing required key {key!r}")
    val = cfg[key]
    if kind is not None and not isinstance(val, kind):
        raise CliValidationError(f"config key {key!r} has the wrong type")
    return val


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliValidationError(f"config file not found: {path}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliValidationError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise CliValidationError("config must be a JSON object")
    return cfg


def _config_hash(obj) -> str:
    canonical = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(canonical).hexdigest()


def _resolve_seed(args, cfg: dict) -> int:
    if args.seed is not None:
        return int(args.seed)
    if "seed" in cfg:
        return int(cfg["seed"])
    if os.environ.get(_ENV_SEED):
        try:
            return int(os.environ[_ENV_SEED])
        except ValueError as exc:
            raise CliValidationError(f"{_ENV_SEED} is not an integer") from exc
    return 0


def _dataset_from(cfg, what: str) -> nn.Dataset:
    if not isinstance(cfg, dict):
        raise CliValidationError(f"{what} must be an object")
    if "csv" in cfg:
        path = Path(cfg["csv"])
        if not path.is_file():
            raise CliValidationError(f"{what}: csv not found: {path}")
        return nn.load_dataset_csv(path)
    for key in ("classes", "dims", "samples", "seed", "separation"):
        if key not in cfg:
            raise CliValidationError(f"{what} missing key {key!r}")
    return nn.make_dataset(
        int(cfg["classes"]),
        int(cfg["dims"]),
        int(cfg["samples"]),
        int(cfg["seed"]),
        float(cfg["separation"]),
    )


def _arch_from(cfg) -> wsp.ArchSpec:
    if not isinstance(cfg, dict) or "widths" not in cfg:
        raise CliValidationError("arch must be an object with 'widths'")
    return wsp.ArchSpec(
        tuple(cfg["widths"]), cfg.get("activation", "relu"), bool(cfg.get("has_bias", True))
    )


def _model_from(path, what: str) -> wsp.WeightSet:
    p = Path(path)
    if not p.is_file():
        raise CliValidationError(f"{what}: model file not found: {p}")
    return wsp.load_weights(p)


def _models_from(cfg: dict, key: str) -> list[wsp.WeightSet]:
    paths = _require(cfg, key, list)
    if not paths:
        raise CliValidationError(f"config key {key!r} must list at least one model")
    return [_model_from(p, key) for p in paths]


# -- subcommands ---------------------------------------------------------------


def cmd_train(args, cfg: dict, out: Path, seed: int) -> None:
    arch = _arch_from(_require(cfg, "arch", dict))
    data = _dataset_from(_require(cfg, "dataset", dict), "dataset")
    tr = _require(cfg, "train", dict)
    train_cfg = nn.TrainConfig(
        eta=float(_require(tr, "eta")),
        epochs=int(_require(tr, "epochs")),
        mode=tr.get("mode", "full_batch_gd"),
        batch_size=tr.get("batch_size"),
        seed=int(tr.get("seed", seed)),
    )
    w0 = nn.init_weights(arch, int(cfg.get("init_seed", seed)))
    result = nn.train(w0, data, train_cfg)
    final = result.trajectory[-1]
    wsp.save_weights(final, out / "model.mws")
    metrics = nn.evaluate(final, data)
    _write_json(
        out / "metrics.json",
        {
            "train_accuracy": metrics["accuracy"],
            "train_mean_loss": metrics["mean_loss"],
            "epochs_completed": len(result.trajectory) - 1,
            "diverged": result.diverged,
        },
    )


def cmd_align(args, cfg: dict, out: Path, seed: int) -> None:
    models = _models_from(cfg, "models")
    mode = cfg.get("mode", "multi")
    tol = float(cfg.get("tol", 1e-6))
    max_iter = int(cfg.get("max_iter", 200))
    if mode == "multi":
        if len(models) < 2:
            raise CliValidationError("multi alignment needs >= 2 models")
        maps, trace = al.fw_multi(models, tol=tol, max_iter=max_iter)
        mapped = [al.map_to_universe(m, ps) for m, ps in zip(models, maps.maps)]
        merged = wsp.combine([1.0 / len(mapped)] * len(mapped), mapped)
        cycles = {}
        n = len(models)
        for a in range(n):
            for b in range(n):
                if a != b:
                    cyc = [a, b, a]
                    cycles["->".join(map(str, cyc))] = al.cycle_error(
                        maps, models[a], cyc
                    )
                for c in range(n):
                    if len({a, b, c}) == 3:
                        cyc = [a, b, c, a]
                        cycles["->".join(map(str, cyc))] = al.cycle_error(
                            maps, models[a], cyc
                        )
        _write_json(out / "cycles.json", cycles)
    elif mode == "merge_many":
        merged = al.merge_many(models, seed=seed, tol=tol, max_iter=max_iter)
        trace = []
    elif mode == "pairwise":
        if len(models) != 2:
            raise CliValidationError("pairwise alignment needs exactly 2 models")
        permset, trace = al.fw_pairwise(models[0], models[1], tol=tol, max_iter=max_iter)
        aligned = al.apply_perm(models[1], permset)
        wsp.save_weights(aligned, out / "aligned_1.mws")
        merged = wsp.combine([0.5, 0.5], [models[0], aligned])
    elif mode == "activation":
        if len(models) != 2:
            raise CliValidationError("activation matching needs exactly 2 models")
        probe = _dataset_from(_require(cfg, "probe", dict), "probe")
        permset = al.activation_matching(models[0], models[1], probe)
        aligned = al.apply_perm(models[1], permset)
        wsp.save_weights(aligned, out / "aligned_1.mws")
        merged = wsp.combine([0.5, 0.5], [models[0], aligned])
        trace = []
    else:
        raise CliValidationError(f"unknown align mode {mode!r}")
    if "repair_probe" in cfg:
        probe = _dataset_from(cfg["repair_probe"], "repair_probe")
        weights = [1.0 / len(models)] * len(models)
        merged = al.repair(merged, models, weights, probe).weights
    wsp.save_weights(merged, out / "merged.mws")
    if trace:
        _write_csv(out / "trace.csv", ["iteration", "objective"], list(enumerate(trace)))
    if "data" in cfg:
        data = _dataset_from(cfg["data"], "data")
        _write_json(out / "metrics.json", nn.evaluate(merged, data))


def cmd_merge(args, cfg: dict, out: Path, seed: int) -> None:
    base = _model_from(_require(cfg, "base", str), "base")
    models = _models_from(cfg, "models")
    rcfg = _require(cfg, "recipe", dict)
    try:
        recipe = mo.MergeRecipe(
            _require(rcfg, "method", str),
            tuple(rcfg.get("coeffs", ())),
            rcfg.get("seed"),
        )
    except ValueError as exc:
        raise CliValidationError(f"invalid recipe: {exc}") from exc
    merged = mo.apply_recipe(recipe, base, models)
    wsp.save_weights(merged, out / "merged.mws")
    _write_json(out / "recipe.json", recipe.to_json_dict())


def cmd_barrier(args, cfg: dict, out: Path, seed: int) -> None:
    a_path = args.a or cfg.get("a")
    b_path = args.b or cfg.get("b")
    data_path = args.data or cfg.get("data")
    if not (a_path and b_path and data_path):
        raise CliValidationError("barrier needs --a, --b and --data")
    a = _model_from(a_path, "a")
    b = _model_from(b_path, "b")
    data_file = Path(data_path)
    if not data_file.is_file():
        raise CliValidationError(f"data file not found: {data_file}")
    data = nn.load_dataset_csv(data_file)
    grid = int(args.grid or cfg.get("grid", 25))
    res = al.loss_barrier(a, b, data, grid_points=grid)
    _write_csv(
        out / "curve.csv", ["lambda", "loss", "accuracy"], res["curve"], digits=12
    )
    _write_json(out / "summary.json", {"barrier": res["barrier"], "grid_points": grid})


def cmd_taskvec_verify(args, cfg: dict, out: Path, seed: int) -> None:
    arch = _arch_from(_require(cfg, "arch", dict))
    tasks = [
        _dataset_from(t, f"tasks[{i}]")
        for i, t in enumerate(_require(cfg, "tasks", list))
    ]
    k = int(args.k if args.k is not None else cfg.get("k", 1))
    alpha = float(cfg.get("alpha", 1.0 / len(tasks)))
    etas = [float(e) for e in cfg.get("etas", [1e-2, 5e-3, 2.5e-3])]
    theta_pre = nn.init_weights(arch, int(cfg.get("init_seed", seed)))
    res = tv.second_order_gap_check(tasks, theta_pre, alpha, etas, k)
    report = {
        "k": k,
        "alpha": alpha,
        "records": res["records"],
        "slopes": res["slopes"],
        "pass": res["pass"],
    }
    if k == 1:
        scale = 1.0 + float(np.abs(wsp.flatten(theta_pre)).max())
        report["first_epoch_tolerance"] = 1e-13 * scale
        report["first_epoch_exact"] = all(
            r["gap_max"] <= 1e-13 * scale for r in res["records"]
        )
    if "bound" in cfg:
        bcfg = cfg["bound"]
        report["bound"] = tv.bound_C(
            arch,
            [float(s) for s in _require(bcfg, "weight_norms", list)],
            float(_require(bcfg, "M_x")),
            int(_require(bcfg, "h")),
            int(_require(bcfg, "T")),
            float(_require(bcfg, "alpha")),
        )
    if "diagnostics" in cfg:
        dcfg = cfg["diagnostics"]
        task_idx = int(dcfg.get("task_index", 0))
        if not 0 <= task_idx < len(tasks):
            raise CliValidationError("diagnostics.task_index out of range")
        traj = nn.train(
            theta_pre,
            tasks[task_idx],
            nn.TrainConfig(
                eta=float(dcfg.get("eta", etas[0])),
                epochs=int(dcfg.get("epochs", 5)),
            ),
        ).trajectory
        diag = tv.gradient_diagnostics(traj, tasks[task_idx])
        report["diagnostics"] = {
            "epoch_grad_norm_shares": diag["epoch_grad_norm_shares"],
            "cum_cosines": diag["cum_cosines"],
        }
    _write_json(out / "report.json", report)


def cmd_tsv(args, cfg: dict, out: Path, seed: int) -> None:
    base = _model_from(_require(cfg, "base", str), "base")
    op = cfg.get("op", "merge")
    if op == "storage":
        report = ts.storage_params(base.arch, int(_require(cfg, "k")))
        _write_json(out / "storage.json", report)
        return
    models = _models_from(cfg, "models")
    taus = [tv.task_vector(m, base) for m in models]
    if op == "merge":
        merged = ts.tsv_merge(base, taus, alpha=float(cfg.get("alpha", 1.0)))
        wsp.save_weights(merged, out / "merged.mws")
    elif op == "compress":
        idx = int(cfg.get("task_index", 0))
        if not 0 <= idx < len(taus):
            raise CliValidationError("task_index out of range")
        k = cfg.get("k")
        if k is None:
            arch = base.arch
            k = [
                ts.merge_rank(arch, li, len(taus))
                for li in range(1, arch.n_layers + 1)
            ]
        bundle = ts.tsv_compress(taus[idx], k, task_id=idx)
        ts.save_bundle(bundle, out / "bundle.mws")
        _write_json(
            out / "storage.json",
            ts.storage_params(base.arch, int(max(bundle.ranks))),
        )
    elif op == "sti":
        k = int(cfg.get("k", 1))
        total, per_layer = ts.sti(taus, k)
        _write_json(out / "sti.json", {"total": total, "per_layer": per_layer, "k": k})
    else:
        raise CliValidationError(f"unknown tsv op {op!r}")


def cmd_mass(args, cfg: dict, out: Path, seed: int) -> None:
    base = _model_from(_require(cfg, "base", str), "base")
    experts = _models_from(cfg, "models")
    tasks = [
        _dataset_from(t, f"tasks[{i}]")
        for i, t in enumerate(_require(cfg, "tasks", list))
    ]
    if len(tasks) != len(experts):
        raise CliValidationError("one task dataset per expert required")
    rcfg = cfg.get("router", {})
    deltas = [tv.task_vector(e, base) for e in experts]
    layer = int(rcfg.get("layer_index", base.arch.n_layers))
    router = ms.RouterConfig(
        layer_index=layer,
        eta=float(rcfg.get("eta", 0.2)),
        top_k=int(rcfg.get("top_k", 3)),
        epsilon=float(rcfg.get("epsilon", 0.3)),
        temperature=float(rcfg.get("temperature", 1.0)),
        alpha=float(rcfg.get("alpha", 1.0)),
    )
    fixed = ms.fixed_merge(base, deltas, router)
    heads = {i: ms.head_from_model(e) for i, e in enumerate(experts)}
    eval_tasks = [tasks[i] for i in fixed.accepted]
    sweep = ms.routing_layer_sweep(fixed.theta_mt, fixed.bundle, eval_tasks)
    _write_csv(out / "sweep.csv", ["layer", "routing_accuracy"], sweep)
    if cfg.get("use_best_layer", True):
        best_layer = max(sweep, key=lambda t: t[1])[0]
        router = ms.RouterConfig(
            layer_index=best_layer,
            eta=router.eta,
            top_k=router.top_k,
            epsilon=router.epsilon,
            temperature=router.temperature,
            alpha=router.alpha,
        )
    per_sample = []
    hits = 0
    count = 0
    limit = int(cfg.get("max_report_samples", 50))
    for tid, data in zip(fixed.accepted, eval_tasks):
        for row, label in zip(data.X, data.y):
            res = ms.adaptive_infer(
                row, base, fixed.theta_mt, fixed.bundle, heads, router
            )
            hits += int(res["class_index"] == int(label))
            count += 1
            if len(per_sample) < limit:
                per_sample.append(
                    {
                        "task": tid,
                        "label": int(label),
                        "residuals": res["residuals"],
                        "weights": res["weights"],
                        "omega": res["omega"],
                        "head": res["head"],
                        "class": res["class_index"],
                    }
                )
    _write_json(
        out / "routing_report.json",
        {
            "accepted_tasks": fixed.accepted,
            "router_layer": router.layer_index,
            "adaptive_accuracy": hits / count if count else 0.0,
            "samples": per_sample,
        },
    )


def cmd_evolve(args, cfg: dict, out: Path, seed: int) -> None:
    base = _model_from(_require(cfg, "base", str), "base")
    endpoints = _models_from(cfg, "endpoints")
    tasks = [
        _dataset_from(t, f"tasks[{i}]")
        for i, t in enumerate(_require(cfg, "tasks", list))
    ]
    config = ev.Merge3Config(
        subset_size=int(_require(cfg, "subset_size")),
        pop=int(cfg.get("pop", 25)),
        iters=int(cfg.get("iters", 7)),
        seed=seed,
        method=cfg.get("method", "task_arithmetic"),
        estimator=cfg.get("estimator", "gmp"),
        c=float(cfg.get("c", 0.5)),
        algorithm=cfg.get("algorithm", "ga"),
        scalarize=cfg.get("scalarize", "min"),
        ability_dim=int(cfg.get("ability_dim", 15)),
        item_fit_steps=int(cfg.get("item_fit_steps", 800)),
    )
    report = ev.merge3_run(endpoints, base, tasks, config)
    _write_json(out / "report.json", report)
    if report["history"] is not None:
        _write_csv(
            out / "history.csv",
            ["gen", "best_estimate"],
            list(enumerate(report["history"])),
        )
    make_genome, _ = ev._genome_factory(config.method, len(endpoints), seed)
    best = mo.apply_recipe(
        make_genome(np.asarray(report["best_genes"])).recipe, base, endpoints
    )
    wsp.save_weights(best, out / "merged_best.mws")


def cmd_report(args, cfg: dict, out: Path | None, seed: int) -> None:
    path = Path(args.input)
    if not path.is_file():
        raise CliValidationError(f"input not found: {path}")
    if path.suffix == ".mws":
        manifest, tensors = wsp.read_container(path)
        print(_json_text(manifest).rstrip())
        for name, arr in tensors.items():
            print(f"{name}\tshape={list(arr.shape)}")
    else:
        try:
            obj = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CliValidationError(f"cannot read {path}: {exc}") from exc
        print(_json_text(obj).rstrip())


_COMMANDS = {
    "train": cmd_train,
    "align": cmd_align,
    "merge": cmd_merge,
    "barrier": cmd_barrier,
    "taskvec-verify": cmd_taskvec_verify,
    "tsv": cmd_tsv,
    "mass": cmd_mass,
    "evolve": cmd_evolve,
    "report": cmd_report,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mergelab", description="Desk-scale weight-space merging laboratory"
    )
    sub = parser.add_subparsers(dest="command")
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--threads", type=int, default=0)
        if name == "barrier":
            p.add_argument("--a")
            p.add_argument("--b")
            p.add_argument("--data")
            p.add_argument("--grid", type=int, default=None)
        if name == "taskvec-verify":
            p.add_argument("--k", type=int, default=None)
        if name == "report":
            p.add_argument("--in", dest="input", required=True)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args, unknown = parser.parse_known_args(argv)
    if unknown:
        print(f"error: unknown arguments: {unknown}", file=sys.stderr)
        return 2
    if args.command is None:
        parser.print_help()
        return 2
    if args.command not in _COMMANDS:
        print(f"error: unknown subcommand {args.command!r}", file=sys.stderr)
        return 2

    try:
        cfg = _load_config(args.config)
        seed = _resolve_seed(args, cfg)
        if args.command == "report":
            cmd_report(args, cfg, None, seed)
            return 0
        if args.out is None:
            raise CliValidationError("--out is required")
        out = Path(args.out)
    except CliValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    out.mkdir(parents=True, exist_ok=True)
    hash_source = {
        "command": args.command,
        "config": cfg,
        "flags": {
            k: getattr(args, k)
            for k in ("a", "b", "data", "grid", "k")
            if hasattr(args, k) and getattr(args, k) is not None
        },
    }
    manifest = {
        "command": args.command,
        "config_hash": _config_hash(hash_source),
        "seed": seed,
        "threads": args.threads,
        "tool_version": __version__,
        "status": "ok",
    }
    try:
        try:
            _COMMANDS[args.command](args, cfg, out, seed)
        except CliValidationError:
            raise
        except Exception as exc:  # runtime failure after validation
            manifest["status"] = "error"
            manifest["error"] = f"{type(exc).__name__}: {exc}"
            _write_json(out / "manifest.json", manifest)
            print(f"error: {exc}", file=sys.stderr)
            return 1
    except CliValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    _write_json(out / "manifest.json", manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
