"""Command-line entry point: ``grammamba <subcommand> --run-dir DIR [options]``.

Configuration precedence is command-line flags, then the JSON config file,
then built-in defaults. Unknown config keys are rejected.

Exit codes: 0 success, 2 configuration or usage error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
import time
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import tensor as T
from .data import (CHECKPOINT_VERSION, DATASET_VERSION, generate_positioning, generate_synthetic,
                   load_adapters, load_checkpoint, load_dataset, save_adapters, save_checkpoint,
                   save_dataset)
from .errors import ConfigError, DataError, NumericError, ProtocolError
from .lora import build_freeze_plan, trainable_fraction
from .model import GramMambaModel, ModelConfig
from .ssm import init_block, selective_scan
from .training import (IMPUTE_METHODS, TrainConfig, adapt, evaluate, impute_baseline,
                       simulate_missing, train)

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

DEFAULTS = {
    "seed": 0,
    "data": {
        "task": "classification",
        "n_classes": 4,
        "n_modalities": 2,
        "modality_names": ["ACC", "GYO"],
        "channels": 3,
        "length": 48,
        "samples_per_class": 200,
        "n_samples": 600,
        "noise_sigma": 0.2,
        "cross_modal_coupling": 0.8,
        "sample_rate": 100.0,
    },
    "model": {
        "feature_dim": 16,
        "state_dim": 8,
        "inner_dim": 16,
        "depth": 1,
        "fusion_dim": 512,
        "lora_rank": 1,
        "lora_scaling": None,
        "beta": 0.1,
        "delta_init": 0.05,
        "feature_bias_init": 0.1,
    },
    "train": {"epochs": 50, "batch_size": 32, "learning_rate": 5e-3, "grad_clip": 5.0},
    "adapt": {"epochs": 40, "batch_size": 32, "learning_rate": 1e-2, "grad_clip": 5.0},
    "impute": {"knot_stride": 4},
    "bench": {"lengths": [256, 512, 1024, 2048], "inner_dim": 16, "state_dim": 16, "repeats": 3},
}

# keys whose default is null but accept a number
_NULLABLE_NUMBERS = {("model", "inner_dim"), ("model", "lora_scaling")}


def _check_value(path: tuple, default, value) -> None:
    where = ".".join(path)
    if path in _NULLABLE_NUMBERS:
        if value is not None and (isinstance(value, bool) or not isinstance(value, (int, float))):
            raise ConfigError(f"{where}: expected a number or null")
        return
    if path == ("data", "channels"):
        items = value if isinstance(value, list) else [value]
        if not items or not all(isinstance(v, int) and not isinstance(v, bool) for v in items):
            raise ConfigError(f"{where}: expected an int or a list of ints")
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {type(value).__name__}")


def merge_config(base: dict, override: dict, path: tuple = ()) -> dict:
    """Deep-merge ``override`` into a copy of ``base``; unknown keys raise."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {'.'.join(path + (key,))!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{'.'.join(path + (key,))}: expected an object")
            out[key] = merge_config(base[key], value, path + (key,))
        else:
            _check_value(path + (key,), base[key], value)
            out[key] = value
    return out


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    p = Path(path)
    if not p.exists():
        shipped = resources.files("grammamba") / "configs" / p.name
        if not shipped.is_file():
            raise ConfigError(f"config file {path} not found")
        text = shipped.read_text()
    else:
        text = p.read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return merge_config(DEFAULTS, raw)


def _modality_names(cfg: dict) -> list[str]:
    d = cfg["data"]
    names = list(d["modality_names"])
    if len(names) != d["n_modalities"]:
        raise ConfigError("data.modality_names must list data.n_modalities names")
    return names


def make_dataset(cfg: dict):
    d = cfg["data"]
    names = _modality_names(cfg)
    if d["task"] == "classification":
        return generate_synthetic(d["n_classes"], d["n_modalities"], d["length"], d["channels"],
                                  d["samples_per_class"], d["noise_sigma"], d["cross_modal_coupling"],
                                  cfg["seed"], names, d["sample_rate"])
    if d["task"] == "positioning":
        return generate_positioning(d["n_modalities"], d["length"], d["channels"], d["n_samples"],
                                    d["noise_sigma"], cfg["seed"], names, d["sample_rate"])
    raise ConfigError(f"data.task must be 'classification' or 'positioning', got {d['task']!r}")


def make_model_config(cfg: dict, ds=None) -> ModelConfig:
    d = cfg["data"]
    if ds is not None:
        modalities, mode, n_out = ds.modalities, ds.mode, ds.n_classes
    else:
        names = _modality_names(cfg)
        chans = d["channels"] if isinstance(d["channels"], list) else [d["channels"]] * len(names)
        modalities = [{"name": n, "channels": c, "sample_rate": d["sample_rate"]} for n, c in zip(names, chans)]
        mode = "classification" if d["task"] == "classification" else "regression"
        n_out = d["n_classes"] if mode == "classification" else 2
    return ModelConfig(modalities=modalities, n_outputs=n_out, mode=mode, seed=cfg["seed"], **cfg["model"])


def make_train_config(cfg: dict, section: str) -> TrainConfig:
    return TrainConfig(seed=cfg["seed"], **cfg[section])


# ---------------------------------------------------------------- run directory


class Run:
    def __init__(self, run_dir: str, command: str, cfg: dict, argv: list[str]):
        self.dir = Path(run_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.cfg = cfg
        info = {"command": command, "argv": argv, "version": __version__, "seed": cfg["seed"],
                "dataset_format_version": DATASET_VERSION, "checkpoint_format_version": CHECKPOINT_VERSION,
                "config": cfg, "started": time.strftime("%Y-%m-%dT%H:%M:%S")}
        (self.dir / "run.json").write_text(json.dumps(info, indent=2))

    def metric(self, record: dict) -> None:
        line = json.dumps({"command": self.command, **record})
        print(line, flush=True)
        with open(self.dir / "metrics.jsonl", "a") as fh:
            fh.write(line + "\n")

    def report(self, report: dict) -> None:
        text = json.dumps({"command": self.command, **report}, indent=2)
        (self.dir / "report.json").write_text(text)
        (self.dir / f"report.{self.command}.json").write_text(text)

    def path(self, name: str) -> Path:
        return self.dir / name


def _dataset_path(args, run: Run, degraded: bool = False) -> Path:
    if args.data:
        return Path(args.data)
    if degraded and run.path("dataset_missing").exists():
        return run.path("dataset_missing")
    return run.path("dataset")


def _split_list(value: Optional[str]) -> Optional[list[str]]:
    if value is None:
        return None
    return [v.strip() for v in value.split(",") if v.strip()]


def _resolve_available(args, model: GramMambaModel, ds) -> list[str]:
    avail = _split_list(args.available)
    missing = _split_list(args.missing)
    if avail is not None and missing is not None:
        raise ConfigError("give --available or --missing, not both")
    if missing is not None:
        unknown = set(missing) - set(model.modality_names)
        if unknown:
            raise ProtocolError(f"unknown modalities {sorted(unknown)}")
        avail = [n for n in model.modality_names if n not in missing]
    if avail is None:
        avail = list(ds.splits["train"].available)
    if not avail:
        raise ProtocolError("no modality to adapt with")
    return avail


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args, run: Run) -> dict:
    ds = make_dataset(run.cfg)
    out = _dataset_path(args, run)
    save_dataset(ds, out)
    counts = {s: sp.num_windows for s, sp in ds.splits.items()}
    return {"dataset": str(out), "mode": ds.mode, "windows": counts, "modalities": ds.modality_names}


def cmd_train(args, run: Run) -> dict:
    ds = load_dataset(_dataset_path(args, run))
    model = GramMambaModel(make_model_config(run.cfg, ds))
    rep = train(model, ds, make_train_config(run.cfg, "train"), on_epoch=run.metric)
    save_checkpoint(model, run.path("model.gmmb"), {"train_config": run.cfg["train"]})
    return {"validation": rep.to_dict(), "num_parameters": model.num_parameters(),
            "checkpoint": str(run.path("model.gmmb"))}


def cmd_simulate_missing(args, run: Run) -> dict:
    missing = _split_list(args.missing)
    if not missing:
        raise ConfigError("simulate-missing needs --missing")
    ds = load_dataset(_dataset_path(args, run))
    deg = simulate_missing(ds, missing)
    save_dataset(deg, run.path("dataset_missing"))
    return {"missing": missing, "available": deg.splits["train"].available,
            "dataset": str(run.path("dataset_missing"))}


def cmd_adapt(args, run: Run) -> dict:
    model = load_checkpoint(run.path("model.gmmb"))
    ds = load_dataset(_dataset_path(args, run, degraded=True))
    avail = _resolve_available(args, model, ds)
    if set(avail) != set(ds.splits["train"].available):
        ds = simulate_missing(ds, [n for n in model.modality_names if n not in avail])
    res = adapt(model, ds, avail, make_train_config(run.cfg, "adapt"), on_epoch=run.metric)
    plan = build_freeze_plan(model, avail)
    keys = list(avail) + ["fusion"]
    save_adapters(model, run.path("adapter.gmmb"), keys, {"available": avail})
    return {**res.to_dict(), "adapter": str(run.path("adapter.gmmb")),
            "frozen_tensors_verified": len(plan.frozen_names)}


def _load_model_for_eval(args, run: Run) -> GramMambaModel:
    model = load_checkpoint(run.path("model.gmmb"))
    if args.adapter:
        load_adapters(model, args.adapter)
    return model


def cmd_evaluate(args, run: Run) -> dict:
    model = _load_model_for_eval(args, run)
    ds = load_dataset(_dataset_path(args, run))
    avail = _split_list(args.available)
    if args.missing:
        avail = [n for n in model.modality_names if n not in _split_list(args.missing)]
    if avail is None:
        avail = list(ds.splits["test"].available)
    return {"available": avail,
            "validation": evaluate(model, ds.splits["val"], avail).to_dict(),
            "test": evaluate(model, ds.splits["test"], avail).to_dict()}


def cmd_compare_imputation(args, run: Run) -> dict:
    model = load_checkpoint(run.path("model.gmmb"))
    ds = load_dataset(_dataset_path(args, run, degraded=True))
    if args.missing:
        ds = simulate_missing(ds, _split_list(args.missing))
    avail = list(ds.splits["test"].available)
    if set(avail) == set(model.modality_names):
        raise ConfigError("compare-imputation needs a degraded dataset or --missing")
    methods = [args.method] if args.method else list(IMPUTE_METHODS)
    results = {}
    for method in methods:
        filled = impute_baseline(ds, method, run.cfg["impute"]["knot_stride"])
        rep = evaluate(model, filled.splits["test"])
        results[method] = rep.to_dict()
        run.metric({"method": method, **_headline(rep.to_dict())})
    results["no_adaptation"] = evaluate(model, ds.splits["test"], avail).to_dict()
    adapter = Path(args.adapter) if args.adapter else run.path("adapter.gmmb")
    if adapter.exists():
        load_adapters(model, adapter)
        results["adapted"] = evaluate(model, ds.splits["test"], avail).to_dict()
        run.metric({"method": "adapted", **_headline(results["adapted"])})
    return {"available": avail, "results": results}


def _headline(rep: dict) -> dict:
    keys = ("overall_accuracy", "macro_f1", "mean_error", "median_error")
    return {k: rep[k] for k in keys if rep.get(k) is not None}


def bench_scan(lengths, inner_dim: int = 16, state_dim: int = 16, repeats: int = 3,
               seed: int = 0) -> dict:
    """Time one selective scan per length and fit ``t = a L + b``."""
    rng = np.random.default_rng(seed)
    params = init_block(inner_dim, inner_dim, state_dim, inner_dim, rng)
    times = []
    with T.no_grad():
        for L in lengths:
            x = T.Tensor(rng.normal(size=(1, L, inner_dim)))
            best = float("inf")
            for _ in range(repeats):
                t0 = time.perf_counter()
                selective_scan(x, params)
                best = min(best, time.perf_counter() - t0)
            times.append(best)
    L_arr, t_arr = np.asarray(lengths, dtype=float), np.asarray(times)
    slope, intercept = np.polyfit(L_arr, t_arr, 1)
    fit = slope * L_arr + intercept
    ss_res = float(np.sum((t_arr - fit) ** 2))
    ss_tot = float(np.sum((t_arr - t_arr.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return {"lengths": list(lengths), "seconds": times, "slope": float(slope), "intercept": float(intercept),
            "r_squared": r2, "ratio_longest_shortest": times[-1] / times[0]}


def cmd_bench_scan(args, run: Run) -> dict:
    b = run.cfg["bench"]
    res = bench_scan(b["lengths"], b["inner_dim"], b["state_dim"], b["repeats"], run.cfg["seed"])
    for L, t in zip(res["lengths"], res["seconds"]):
        run.metric({"length": L, "seconds": t})
    run.metric({"r_squared": res["r_squared"], "ratio_longest_shortest": res["ratio_longest_shortest"]})
    return res


def cmd_count_params(args, run: Run) -> dict:
    model = GramMambaModel(make_model_config(run.cfg))
    first = model.modality_names[0]
    plan = build_freeze_plan(model, [n for n in model.modality_names if n != first] or [first])
    live = sum(model.named_parameters()[n].size for n in plan.trainable_names)
    return {"total": model.num_parameters(), "trainable_single_missing": live,
            "trainable_fraction": trainable_fraction(model, plan), "dropped": first}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "simulate-missing": cmd_simulate_missing,
    "adapt": cmd_adapt,
    "evaluate": cmd_evaluate,
    "compare-imputation": cmd_compare_imputation,
    "bench-scan": cmd_bench_scan,
    "count-params": cmd_count_params,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grammamba", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file (or name of a shipped config)")
        p.add_argument("--run-dir", required=True, help="directory for datasets, checkpoints and reports")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--data", help="dataset directory (default: inside the run directory)")
        p.add_argument("--missing", help="comma-separated modalities to drop")
        p.add_argument("--available", help="comma-separated modalities to keep")
        p.add_argument("--method", choices=IMPUTE_METHODS, help="single imputation method")
        p.add_argument("--adapter", help="adapter checkpoint to apply")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        run = Run(args.run_dir, args.command, cfg, argv)
        report = COMMANDS[args.command](args, run)
        run.report(report)
        print(json.dumps({"command": args.command, "status": "ok", "report": str(run.path("report.json"))}))
        return 0
    except (ConfigError, ProtocolError) as exc:
        print(f"{args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"{args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"{args.command}: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
