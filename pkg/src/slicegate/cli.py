"""Command-line entry point: gen-data, train, eval, ablate, report.

Every command is deterministic given (config, seed); the SLICEGATE_SEED
environment variable overrides the seed from any source. Exit codes:
0 success, 2 configuration errors, 3 data errors, 4 numeric failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from slicegate.errors import ConfigError, DataError, NumericError, SlicegateError
from slicegate.runtime import pin_blas_threads

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_DOMAIN_ALIASES = {
    "train": "train-domain", "shift": "shift-domain", "modality": "modality-domain",
    "train-domain": "train-domain", "shift-domain": "shift-domain",
    "modality-domain": "modality-domain",
}


def _strict_dataclass(cls, payload: dict, where: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - fields
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}")
    try:
        return cls(**payload)
    except TypeError as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def load_run_config(path) -> dict:
    """Strict JSON config: sections seed / output_dir / data / model / train.

    Unknown keys at any level are rejected; the file round-trips losslessly
    through `render_run_config`.
    """
    from slicegate.data import GenConfig
    from slicegate.model import ModelConfig
    from slicegate.training import TrainConfig

    try:
        payload = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    known = {"seed", "output_dir", "domains", "data", "model", "train"}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {path}")
    model_section = dict(payload.get("model", {}))
    if "class_names" in model_section:
        model_section["class_names"] = tuple(model_section["class_names"])
    config = {
        "seed": int(payload.get("seed", 0)),
        "output_dir": payload.get("output_dir", "runs"),
        "domains": tuple(payload.get("domains", ("train-domain",))),
        "data": _strict_dataclass(GenConfig, payload.get("data", {}), "data section"),
        "model": _strict_dataclass(ModelConfig, model_section, "model section"),
        "train": None,
    }
    train_section = dict(payload.get("train", {}))
    if "seed" in train_section:
        raise ConfigError("set the seed at the top level, not inside train")
    config["train"] = _strict_dataclass(
        TrainConfig, {**train_section, "seed": config["seed"]}, "train section")
    return config


def render_run_config(config: dict) -> str:
    payload = {
        "seed": config["seed"],
        "output_dir": config["output_dir"],
        "domains": list(config["domains"]),
        "data": dataclasses.asdict(config["data"]),
        "model": {**dataclasses.asdict(config["model"]),
                  "class_names": list(config["model"].class_names)},
        "train": {k: v for k, v in dataclasses.asdict(config["train"]).items()
                  if k != "seed"},
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def _resolve_seed(args, config_seed: int) -> int:
    env = os.environ.get("SLICEGATE_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"SLICEGATE_SEED must be an integer, got {env!r}") from None
    if getattr(args, "seed", None) is not None:
        return args.seed
    return config_seed


def _base_config(args) -> dict:
    from slicegate.data import GenConfig
    from slicegate.model import ModelConfig
    from slicegate.training import TrainConfig

    if getattr(args, "config", None):
        return load_run_config(args.config)
    return {"seed": 0, "output_dir": "runs", "domains": ("train-domain",),
            "data": GenConfig(), "model": ModelConfig(), "train": TrainConfig()}


def cmd_gen_data(args) -> int:
    from slicegate.data import generate_dataset

    config = _base_config(args)
    seed = _resolve_seed(args, config["seed"])
    domains = config["domains"]
    if args.domains:
        try:
            domains = tuple(_DOMAIN_ALIASES[d.strip()] for d in args.domains.split(","))
        except KeyError as exc:
            raise ConfigError(f"unknown domain {exc.args[0]!r}") from None
    if "train-domain" not in domains:
        domains = ("train-domain",) + domains
    out = Path(args.out) if args.out else Path(config["output_dir"]) / "data"
    manifest = generate_dataset(out, seed=seed, domains=domains, config=config["data"])
    seeds = [r["volume_id"] for r in manifest["volumes"]]
    if len(set(seeds)) != len(seeds):
        raise DataError("volume id collision in generated dataset")
    print(f"wrote {len(manifest['volumes'])} volumes to {out} (seed {seed})")
    return EXIT_OK


def cmd_train(args) -> int:
    from slicegate.training import train

    config = _base_config(args)
    seed = _resolve_seed(args, config["seed"])
    overrides = {"seed": seed}
    for key in ("model_kind", "epochs", "steps_per_epoch", "batch_size",
                "lr_multiplier", "init_checkpoint"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if args.gate_clamp:
        overrides["gate_clamp_zero"] = True
    train_config = dataclasses.replace(config["train"], **overrides)
    out = Path(args.out or config["output_dir"])
    result = train(train_config, args.data, out, model_config=None, log=print)
    print(f"best epoch {result.best.epoch}: val mean dice "
          f"{result.best.val_mean_dice:.4f} -> {result.best.path}")
    return EXIT_OK


def _load_model(args):
    from slicegate.checkpoint import build_model_from_checkpoint, load_checkpoint, read_checkpoint
    from slicegate.model import BaselineModel
    from slicegate.adapter import TemporalModel
    from slicegate.checkpoint import config_from_dict

    if getattr(args, "arch", None):
        meta, _ = read_checkpoint(args.checkpoint)
        cls = TemporalModel if args.arch == "temporal" else BaselineModel
        model = cls(config_from_dict(meta["config"]), seed=int(meta["seed"]))
        load_checkpoint(args.checkpoint, model)
    else:
        model = build_model_from_checkpoint(args.checkpoint)
    if getattr(args, "gate_clamp", False):
        if model.kind != "temporal":
            raise ConfigError("--gate-clamp needs a temporal architecture")
        model.gate_clamp_zero = True
    return model


def cmd_eval(args) -> int:
    from slicegate.checkpoint import build_model_from_checkpoint
    from slicegate.data import load_split
    from slicegate.evaluation import evaluate, render_comparison_table, write_report

    domain = _DOMAIN_ALIASES.get(args.domain)
    if domain is None:
        raise ConfigError(f"unknown domain {args.domain!r}")
    model = _load_model(args)
    volumes = load_split(args.data, args.split, domain=domain)
    report, _ = evaluate(model, volumes, model.config.class_names, domain_tag=domain)
    out = Path(args.out)
    stem = f"eval_{model.kind}_{domain.split('-')[0]}"
    json_path, csv_path = write_report(out, stem, report)
    print(f"mean dice {report.mean:.4f} over {len(report.per_pair)} pairs -> {json_path}")
    if args.baseline_checkpoint:
        other = build_model_from_checkpoint(args.baseline_checkpoint)
        other_report, _ = evaluate(other, volumes, other.config.class_names,
                                   domain_tag=domain)
        write_report(out, f"eval_{other.kind}_{domain.split('-')[0]}_reference",
                     other_report)
        table = render_comparison_table(other_report, report)
        (out / f"compare_{domain.split('-')[0]}.txt").write_text(table)
        print(table, end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from slicegate.data import load_split
    from slicegate.evaluation import evaluate, prompt_ablation, write_report

    model = _load_model(args)
    volumes = load_split(args.data, args.split, domain="train-domain")
    correct, _ = evaluate(model, volumes, model.config.class_names)
    corrupted, extras = prompt_ablation(model, volumes, args.mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(out, f"ablation_{args.mode}", corrupted)
    drop = 100.0 * (1.0 - corrupted.mean / correct.mean) if correct.mean > 0 else 0.0
    summary = {
        "mode": args.mode,
        "correct_mean_dice": correct.mean,
        "corrupted_mean_dice": corrupted.mean,
        "drop_percent": drop,
        "prompt_map": extras["prompt_map"],
    }
    (out / f"ablation_{args.mode}_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True))
    print(f"correct {correct.mean:.4f} -> {args.mode} {corrupted.mean:.4f} "
          f"({drop:+.1f}% drop)")
    for cls, wrong in sorted(extras["prompt_map"].items()):
        print(f"  prompt map: {cls!r} -> {wrong!r}")
    return EXIT_OK


def cmd_report(args) -> int:
    from slicegate.evaluation import DiceReport, render_comparison_table

    baseline = DiceReport.from_json(Path(args.baseline).read_text())
    temporal = DiceReport.from_json(Path(args.temporal).read_text())
    table = render_comparison_table(baseline, temporal)
    if args.out:
        Path(args.out).write_text(table)
    print(table, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slicegate",
        description="Temporally-gated adapter benchmark: data, training, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic SVOL dataset")
    p.add_argument("--config")
    p.add_argument("--out", help="output directory for volumes + manifest")
    p.add_argument("--seed", type=int)
    p.add_argument("--domains", help="comma list: train,shift,modality")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="dataset manifest path")
    p.add_argument("--model", dest="model_kind", choices=("baseline", "temporal"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr-multiplier", dest="lr_multiplier", type=float)
    p.add_argument("--init-checkpoint", dest="init_checkpoint",
                   help="warm-start weights (adapter tensors may be absent)")
    p.add_argument("--seed", type=int)
    p.add_argument("--gate-clamp", action="store_true",
                   help="diagnostic: force the adapter gate to zero")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", default="train")
    p.add_argument("--split", default="test")
    p.add_argument("--arch", choices=("baseline", "temporal"),
                   help="force the architecture the checkpoint loads into")
    p.add_argument("--gate-clamp", action="store_true")
    p.add_argument("--baseline-checkpoint",
                   help="second checkpoint for a per-class delta table")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="prompt-corruption ablation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", required=True, choices=("blank", "wrong"))
    p.add_argument("--split", default="test")
    p.add_argument("--arch", choices=("baseline", "temporal"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render a baseline-vs-temporal table")
    p.add_argument("--baseline", required=True, help="baseline DiceReport JSON")
    p.add_argument("--temporal", required=True, help="temporal DiceReport JSON")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    pin_blas_threads()
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SlicegateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
