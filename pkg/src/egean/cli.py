"""Command-line entry point.

Every config key can be overridden with a dotted flag, e.g.
``egean train --data.path runs/simulate-abc --train.epochs 3``.  The only
environment override is ``EGEAN_OUTPUT_ROOT``.

Exit codes: 0 success, 2 I/O or configuration error, 3 enumeration size
refusal, 4 numeric abort.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml

from .data import Schema, load_dataset, write_dataset, dataset_from_world
from .model import EgeanModel, ModelConfig, load_checkpoint, save_checkpoint
from .synthetic import (MAX_ENUMERATION_PAIRS, WorldSpec, exact_expected_loss, generate_world,
                        monte_carlo_stats, sample_observations, write_stats_csv)
from .train import (MetricsReport, NumericAbort, TrainConfig, evaluate, export_embeddings,
                    finetune_multitask, pretrain_exposure)

log = logging.getLogger("egean")

EXIT_OK, EXIT_CONFIG, EXIT_SIZE, EXIT_NUMERIC = 0, 2, 3, 4

COMMANDS = ("simulate", "pretrain", "train", "evaluate", "bench-estimators", "export-embeddings")

REQUIRED = {
    "simulate": ["world.n_pairs"],
    "bench-estimators": ["world.n_pairs"],
    "pretrain": ["data.path"],
    "train": ["data.path"],
    "evaluate": ["data.path", "checkpoint"],
    "export-embeddings": ["data.path", "checkpoint"],
}

ABLATIONS = {
    "without-EN": "exposure_network_on",
    "without-TPN": "task_personalized_network_on",
    "without-ML": "metric_learning_on",
}


class ConfigError(Exception):
    pass


class SizeRefusal(Exception):
    pass


def _plain_defaults(cls) -> dict:
    return {f.name: list(f.default) if isinstance(f.default, tuple) else f.default for f in fields(cls)}


def default_config() -> dict:
    world = _plain_defaults(WorldSpec)
    world["n_pairs"] = None
    model = _plain_defaults(ModelConfig)
    train = _plain_defaults(TrainConfig)
    return {
        "output_root": "runs",
        "world": world,
        "model": model,
        "train": train,
        "data": {"path": None},
        "checkpoint": None,
        "bench": {
            "estimators": ["naive", "pvdr", "dr"],
            "lambdas": [0.0, 0.25, 0.5, 0.75, 1.0],
            "mode": "exact",
            "replicates": 1000,
            "seed": 0,
            "rhat_scale": 0.5,
            "imputation_noise": 0.0,
        },
    }


def _parse_value(text: str):
    # JSON first: YAML 1.1 reads "1e-3" as a string
    try:
        return json.loads(text)
    except ValueError:
        pass
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def _coerce(old, new, key: str):
    """Check ``new`` against the type of the value it replaces."""
    if old is None or new is None:
        return new
    if isinstance(old, bool):
        if not isinstance(new, bool):
            raise ConfigError(f"config key {key!r} expects true/false, got {new!r}")
        return new
    if isinstance(old, (int, float)):
        if isinstance(new, bool) or not isinstance(new, (int, float)):
            if isinstance(old, float) and isinstance(new, str):
                try:
                    return float(new)
                except ValueError:
                    pass
            raise ConfigError(f"config key {key!r} expects a number, got {new!r}")
        return float(new) if isinstance(old, float) else new
    if isinstance(old, list) and not isinstance(new, list):
        raise ConfigError(f"config key {key!r} expects a list, got {new!r}")
    return new


def _set(cfg: dict, dotted: str, value) -> None:
    node = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    if isinstance(node[parts[-1]], dict):
        raise ConfigError(f"config key {dotted!r} is a section, not a value")
    node[parts[-1]] = _coerce(node[parts[-1]], value, dotted)


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for key, val in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {path!r} must be a mapping")
            _merge(base[key], val, path + ".")
        else:
            base[key] = _coerce(base[key], val, path)


def _get(cfg: dict, dotted: str):
    node = cfg
    for part in dotted.split("."):
        node = node[part]
    return node


def resolve_config(command: str, config_path: Optional[str], overrides: List[str],
                   ablate: List[str]) -> dict:
    cfg = default_config()
    if config_path:
        try:
            loaded = yaml.safe_load(Path(config_path).read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a mapping")
        _merge(cfg, loaded)
    tokens = list(overrides)
    while tokens:
        tok = tokens.pop(0)
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
        elif tokens:
            raw = tokens.pop(0)
        else:
            raise ConfigError(f"flag {tok} needs a value")
        _set(cfg, key, _parse_value(raw))
    for name in ablate:
        cfg["model"][ABLATIONS[name]] = False
    env_root = os.environ.get("EGEAN_OUTPUT_ROOT")
    if env_root:
        cfg["output_root"] = env_root
    for key in REQUIRED[command]:
        if _get(cfg, key) is None:
            raise ConfigError(f"missing required config key {key!r}")
    return cfg


def content_hash(command: str, cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k != "output_root"}
    blob = json.dumps({"command": command, "config": body}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _tuple_fields(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def world_spec(cfg: dict) -> WorldSpec:
    return WorldSpec(**_tuple_fields(cfg["world"]))


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig.from_dict(cfg["model"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg["train"])


def _run_dir(command: str, cfg: dict) -> Path:
    digest = content_hash(command, cfg)
    path = Path(cfg["output_root"]) / f"{command}-{digest}"
    try:
        path.mkdir(parents=True, exist_ok=True)
        echo = {"command": command, "config": cfg, "content_hash": digest,
                "seed": _seed_of(command, cfg)}
        (path / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot write run directory {path}: {exc}") from None
    return path


def _seed_of(command: str, cfg: dict) -> int:
    if command == "simulate":
        return cfg["world"]["seed"]
    if command == "bench-estimators":
        return cfg["bench"]["seed"]
    return cfg["train"]["seed"]


# ---------------------------------------------------------------------------
# data directories written by ``simulate``


def load_data_dir(path):
    path = Path(path)
    if not (path / "dataset.csv").is_file() or not (path / "schema.json").is_file():
        raise ConfigError(f"data directory {path} lacks dataset.csv or schema.json")
    schema = Schema.load(path / "schema.json")
    dataset, manifest = load_dataset(path / "dataset.csv", schema)
    truth = None
    if (path / "truth.csv").is_file():
        with open(path / "truth.csv", newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        truth = np.array([int(r["r"]) for r in rows], dtype=np.int64)
    return dataset, manifest, truth


def cmd_simulate(cfg: dict) -> Path:
    spec = world_spec(cfg)
    world = generate_world(spec)
    obs = sample_observations(world, spec.seed)
    dataset = dataset_from_world(world, obs)
    out = _run_dir("simulate", cfg)
    write_dataset(out / "dataset.csv", dataset)
    dataset.schema.save(out / "schema.json")
    dataset.manifest().save(out / "manifest.json")
    with open(out / "truth.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["pair_id", "p", "q", "r"])
        for i in range(len(world)):
            writer.writerow([i, repr(float(world.p[i])), repr(float(world.q[i])), int(obs.r[i])])
    return out


def _write_diagnostics(out: Path, exc: NumericAbort) -> None:
    body = dict(exc.diagnostics, message=str(exc))
    (out / "diagnostics.json").write_text(json.dumps(body, indent=2, sort_keys=True, default=str) + "\n")


def cmd_pretrain(cfg: dict) -> Path:
    dataset, _, _ = load_data_dir(cfg["data"]["path"])
    model = EgeanModel(dataset.schema, model_config(cfg))
    tcfg = train_config(cfg)
    out = _run_dir("pretrain", cfg)
    try:
        report = pretrain_exposure(model, dataset, tcfg)
    except NumericAbort as exc:
        _write_diagnostics(out, exc)
        raise
    save_checkpoint(model, out / "checkpoint.ckpt", {"stage": "pretrain"})
    report.save(out / "pretrain.json")
    return out


def cmd_train(cfg: dict) -> Path:
    dataset, _, truth = load_data_dir(cfg["data"]["path"])
    mcfg, tcfg = model_config(cfg), train_config(cfg)
    out = _run_dir("train", cfg)
    if cfg["checkpoint"]:
        model, _ = _load_model(cfg["checkpoint"])
    else:
        model = EgeanModel(dataset.schema, mcfg)
    try:
        if cfg["checkpoint"]:
            report = MetricsReport(seed=tcfg.seed)
        else:
            report = pretrain_exposure(model, dataset, tcfg)
        report = finetune_multitask(model, dataset, tcfg, truth, report)
    except NumericAbort as exc:
        _write_diagnostics(out, exc)
        raise
    save_checkpoint(model, out / "checkpoint.ckpt", {"stage": "finetune"})
    report.save(out / "metrics.json")
    report.save_traces(out / "traces.csv")
    (out / "trainable_parameters.txt").write_text("\n".join(model.trainable_names()) + "\n")
    return out


def _load_model(path):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from None


def cmd_evaluate(cfg: dict) -> Path:
    dataset, _, truth = load_data_dir(cfg["data"]["path"])
    model, _ = _load_model(cfg["checkpoint"])
    out = _run_dir("evaluate", cfg)
    report = evaluate(model, dataset, truth, MetricsReport(seed=cfg["train"]["seed"],
                                                           config_hash=content_hash("evaluate", cfg)))
    report.save(out / "metrics.json")
    return out


def cmd_export(cfg: dict) -> Path:
    dataset, _, _ = load_data_dir(cfg["data"]["path"])
    model, _ = _load_model(cfg["checkpoint"])
    out = _run_dir("export-embeddings", cfg)
    export_embeddings(model, dataset, out / "embeddings")
    return out


def cmd_bench_estimators(cfg: dict) -> Path:
    bench = cfg["bench"]
    spec = world_spec(cfg)
    if bench["mode"] not in ("exact", "mc", "both"):
        raise ConfigError("bench.mode must be exact, mc or both")
    if bench["mode"] in ("exact", "both") and spec.n_pairs > MAX_ENUMERATION_PAIRS:
        raise SizeRefusal(
            f"exact enumeration is limited to {MAX_ENUMERATION_PAIRS} pairs (world.n_pairs={spec.n_pairs}); "
            "use --bench.mode mc for larger worlds")
    world = generate_world(spec)
    logit_q = np.log(world.q / (1.0 - world.q))
    r_hat = 1.0 / (1.0 + np.exp(-bench["rhat_scale"] * logit_q))
    noise = np.random.default_rng([bench["seed"], 0x1AB]).standard_normal(len(world))
    e_hat = world.expected_errors(r_hat) * np.exp(bench["imputation_noise"] * noise)
    rows = []
    for est in bench["estimators"]:
        mc = {}
        if bench["mode"] in ("mc", "both"):
            mc = {st.lam: st for st in monte_carlo_stats(world, est, bench["lambdas"], bench["replicates"],
                                                         bench["seed"], r_hat=r_hat, e_hat=e_hat)}
        for lam in bench["lambdas"]:
            row = {"estimator": est, "lambda": float(lam), "exact_bias": "", "exact_variance": "",
                   "excluded_mass": ""}
            if bench["mode"] in ("exact", "both"):
                res = exact_expected_loss(world, r_hat, lam=lam, estimator=est, e_hat=e_hat)
                row.update(bias=res.bias, variance=res.variance, ci_halfwidth=0.0, replicates=0,
                           clamp_events=0, exact_bias=res.bias, exact_variance=res.variance,
                           excluded_mass=res.excluded_mass / res.total_mass)
            if lam in mc:
                st = mc[float(lam)]
                row.update(bias=st.bias, variance=st.variance, ci_halfwidth=st.ci_halfwidth,
                           replicates=st.replicates, clamp_events=st.clamp_events)
            rows.append(row)
    out = _run_dir("bench-estimators", cfg)
    write_stats_csv(out / "stats.csv", rows)
    return out


HANDLERS = {
    "simulate": cmd_simulate,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "bench-estimators": cmd_bench_estimators,
    "export-embeddings": cmd_export,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="egean",
        description="Counterfactual CVR estimation lab: simulate MNAR data, train EGEAN, benchmark estimators.",
        epilog="Any config key may be overridden with a dotted flag, e.g. --train.epochs 3 or --world.seed=7.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HANDLERS[name].__doc__ or name,
                           epilog="Dotted flags (--section.key VALUE) override config keys.")
        p.add_argument("--config", help="YAML or JSON config file")
        p.add_argument("--ablate", action="append", default=[], choices=sorted(ABLATIONS),
                       help="disable one EGEAN component (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args.config, rest, args.ablate)
        out = HANDLERS[args.command](cfg)
    except (ConfigError, ValueError, TypeError, OSError) as exc:
        print(f"egean {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SizeRefusal as exc:
        print(f"egean {args.command}: {exc}", file=sys.stderr)
        return EXIT_SIZE
    except NumericAbort as exc:
        print(f"egean {args.command}: numeric abort: {exc}; diagnostics: {json.dumps(exc.diagnostics)}",
              file=sys.stderr)
        return EXIT_NUMERIC
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
