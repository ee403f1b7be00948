"""Loss assembly, differential-rate parameter groups, and the epoch loop."""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

import slicegate.numerics as N
from slicegate.adapter import TemporalModel
from slicegate.checkpoint import load_checkpoint, save_checkpoint
from slicegate.data import build_sample_index, load_split, sample_batch
from slicegate.errors import ConfigError, NumericError
from slicegate.evaluation import evaluate
from slicegate.model import BaselineModel, ModelConfig
from slicegate.numerics import AdamW, ParamGroup, SchedulerState, Tensor, apply_lrs, lr_at_epoch

DICE_SMOOTH = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lambda_gate: float = 0.001
    lr_encoder: float = 1e-6
    lr_decoder: float = 1e-5
    lr_adapter: float = 5e-5
    lr_multiplier: float = 100.0  # toy-scale global factor; ratios preserved
    weight_decay: float = 1e-4
    t0: int = 5
    seed: int = 0
    model_kind: str = "temporal"
    steps_per_epoch: int | None = None  # None: one pass over the index
    eval_batch_slices: int = 16
    gate_clamp_zero: bool = False  # diagnostic: force the adapter inert
    # warm start: load these weights before training (adapter tensors may be
    # absent and then keep their init, mirroring adapter-on-pretrained-base)
    init_checkpoint: str | None = None

    def __post_init__(self):
        if not self.lr_encoder < self.lr_decoder < self.lr_adapter:
            raise ConfigError("learning rates must satisfy encoder < decoder < adapter")
        if self.lambda_gate < 0:
            raise ConfigError("lambda_gate must be >= 0")
        if self.model_kind not in ("baseline", "temporal"):
            raise ConfigError(f"unknown model kind {self.model_kind!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


@dataclass
class CheckpointRecord:
    epoch: int
    val_mean_dice: float
    path: Path


@dataclass
class TrainResult:
    best: CheckpointRecord
    metrics_path: Path
    manifest_path: Path
    last_path: Path


def dice_loss(probs: Tensor, target) -> Tensor:
    """Soft Dice: 1 - (2.sum(p*t) + s) / (sum(p) + sum(t) + s), averaged
    over leading batch axes. No thresholding; smoothing s = 1e-6."""
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=probs.dtype))
    if probs.shape != t.shape:
        raise NumericError(f"dice_loss shape mismatch: {probs.shape} vs {t.shape}")
    axes = (-2, -1)
    inter = N.reduce_sum(N.mul(probs, t), axis=axes)
    denom = N.add(N.reduce_sum(probs, axis=axes), N.reduce_sum(t, axis=axes))
    ratio = N.div(N.add(N.mul(inter, 2.0), DICE_SMOOTH), N.add(denom, DICE_SMOOTH))
    return N.reduce_mean(N.add(N.mul(ratio, -1.0), 1.0))


def bce_loss(logits: Tensor, target) -> Tensor:
    """Numerically-stable binary cross-entropy, mean over pixels."""
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=logits.dtype))
    if logits.shape != t.shape:
        raise NumericError(f"bce_loss shape mismatch: {logits.shape} vs {t.shape}")
    return N.bce_with_logits(logits, t)


def total_loss(logits: Tensor, target, penalty=None, lambda_gate: float = 0.001):
    """bce + dice + lambda * gate penalty. Returns (loss, components).

    penalty may be a Tensor (to keep it on the tape), a GateDiagnostics,
    or None for the baseline model (zero contribution).
    """
    bce = bce_loss(logits, target)
    dice = dice_loss(N.sigmoid(logits), target)
    loss = N.add(bce, dice)
    penalty_value = 0.0
    if penalty is not None and lambda_gate != 0.0:
        pen = penalty if isinstance(penalty, Tensor) else Tensor(
            np.asarray(getattr(penalty, "penalty", penalty), dtype=logits.dtype))
        loss = N.add(loss, N.mul(pen, lambda_gate))
        penalty_value = float(pen.data)
    elif penalty is not None:
        penalty_value = float(penalty.data if isinstance(penalty, Tensor)
                              else getattr(penalty, "penalty", penalty))
    components = {"bce": float(bce.data), "dice": float(dice.data),
                  "penalty": penalty_value, "total": float(loss.data)}
    return loss, components


def make_param_groups(model, config: TrainConfig) -> list[ParamGroup]:
    """Three differential-rate groups (two for the baseline), routed by the
    parameter name prefix; every parameter must land in exactly one."""
    scale = config.lr_multiplier
    routing = {
        "encoder.": "encoder", "prompt.": "encoder",
        "decoder.": "decoder", "adapter.": "adapter",
    }
    rates = {"encoder": config.lr_encoder * scale,
             "decoder": config.lr_decoder * scale,
             "adapter": config.lr_adapter * scale}
    buckets: dict[str, list] = {}
    for name, p in sorted(model.params.items()):
        group = next((g for prefix, g in routing.items() if name.startswith(prefix)), None)
        if group is None:
            raise ConfigError(f"parameter {name!r} has no module prefix")
        buckets.setdefault(group, []).append(p)
    groups = [ParamGroup(name, ps, rates[name], config.weight_decay)
              for name, ps in sorted(buckets.items())]
    total = sum(p.data.size for g in groups for p in g.parameters)
    if total != model.store.total_count():
        raise ConfigError("parameter census mismatch: some parameters are unrouted")
    return groups


def build_model(config: TrainConfig, model_config: ModelConfig):
    cls = TemporalModel if config.model_kind == "temporal" else BaselineModel
    model = cls(model_config, seed=config.seed)
    if config.model_kind == "temporal":
        model.gate_clamp_zero = config.gate_clamp_zero
    return model


def train(config: TrainConfig, manifest_path, out_dir,
          model_config: ModelConfig | None = None, log=None) -> TrainResult:
    """Run the full protocol: weighted batches, warm-restart cosine rates,
    per-epoch validation Dice, best-checkpoint selection (ties go to the
    earliest epoch). Every random draw derives from config.seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()

    train_volumes = load_split(manifest_path, "train")
    val_volumes = load_split(manifest_path, "val")
    manifest = json.loads(Path(manifest_path).read_text())
    class_names = tuple(manifest["class_names"])
    if model_config is None:
        model_config = ModelConfig(class_names=class_names)
    elif tuple(model_config.class_names) != class_names:
        raise ConfigError("model class names disagree with the dataset manifest")

    model = build_model(config, model_config)
    if config.init_checkpoint:
        load_checkpoint(config.init_checkpoint, model)
    groups = make_param_groups(model, config)
    optimizer = AdamW(groups)
    scheduler = SchedulerState({g.name: g.learning_rate for g in groups}, t0=config.t0)

    index = build_sample_index(
        list(train_volumes), seed=_salted(config.seed, 102))
    sampler_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 100]))
    droppath_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 101]))
    steps_per_epoch = config.steps_per_epoch or math.ceil(
        len(index.entries) / config.batch_size)

    lens_probe = _lens_probe_stacks(index, train_volumes)

    rows = []
    best: CheckpointRecord | None = None
    best_path = out / "checkpoint_best.ckpt"
    last_path = out / "checkpoint_last.ckpt"

    for epoch in range(config.epochs):
        sums = {"bce": 0.0, "dice": 0.0, "penalty": 0.0, "total": 0.0}
        gate_sum, gate_n = 0.0, 0
        for step in range(steps_per_epoch):
            apply_lrs(optimizer, lr_at_epoch(scheduler, epoch + step / steps_per_epoch))
            stacks = sample_batch(index, train_volumes, config.batch_size, sampler_rng)
            targets = np.stack([s.target_mask for s in stacks]).astype(model_config.np_dtype)
            ids = np.array([model.prompt_table.class_id(s.class_name) for s in stacks])
            if config.model_kind == "temporal":
                arr = np.stack([s.slices for s in stacks])
                logits, g, penalty = model.forward_batch(
                    arr, ids, training=True, rng=droppath_rng)
                gate_sum += float(g.data.mean())
                gate_n += 1
            else:
                arr = np.stack([s.slices[2] for s in stacks])
                logits = model.forward_batch(arr, ids)
                penalty = None
            loss, components = total_loss(logits, targets, penalty, config.lambda_gate)
            if not np.isfinite(components["total"]):
                batch_id = [(s.class_name, s.center_z) for s in stacks]
                raise NumericError(
                    f"non-finite loss at epoch {epoch} step {step}; batch {batch_id}")
            optimizer.zero_grad()
            loss.backward()
            if config.gate_clamp_zero:
                fill_missing_grads(groups)
            optimizer.step()
            for k in sums:
                sums[k] += components[k]

        val_report, _ = evaluate(model, val_volumes, class_names,
                                 batch_slices=config.eval_batch_slices)
        row = {
            "epoch": epoch,
            "split": "val",
            "mean_dice": val_report.mean,
            **{f"dice_{c}": val_report.per_class_mean.get(c, float("nan"))
               for c in sorted(class_names)},
            "mean_gate": gate_sum / gate_n if gate_n else 0.0,
            "lens_gate": _probe_gate(model, lens_probe),
            "loss_bce": sums["bce"] / steps_per_epoch,
            "loss_dice": sums["dice"] / steps_per_epoch,
            "loss_penalty": sums["penalty"] / steps_per_epoch,
            "loss_total": sums["total"] / steps_per_epoch,
        }
        rows.append(row)
        if log is not None:
            log(f"epoch {epoch}: val mean dice {val_report.mean:.4f} "
                f"(train loss {row['loss_total']:.4f}, gate {row['mean_gate']:.4f})")
        save_checkpoint(last_path, model)
        if best is None or val_report.mean > best.val_mean_dice:
            best = CheckpointRecord(epoch=epoch, val_mean_dice=val_report.mean,
                                    path=best_path)
            save_checkpoint(best_path, model)

    metrics_path = out / "metrics.csv"
    metrics_path.write_text(_render_metrics(rows))
    manifest_path_out = out / "run_manifest.json"
    manifest_path_out.write_text(json.dumps({
        "config": dataclasses.asdict(config),
        "model_config": {**dataclasses.asdict(model_config),
                         "class_names": list(model_config.class_names)},
        "dataset_manifest": str(manifest_path),
        "best_epoch": best.epoch,
        "best_val_mean_dice": best.val_mean_dice,
        "wall_seconds": time.time() - started,
    }, indent=2, sort_keys=True))
    return TrainResult(best=best, metrics_path=metrics_path,
                       manifest_path=manifest_path_out, last_path=last_path)


def select_best(records: list[CheckpointRecord]) -> CheckpointRecord:
    """Highest validation Dice; ties resolved to the earliest epoch."""
    if not records:
        raise ConfigError("no checkpoint records")
    best = records[0]
    for r in records[1:]:
        if r.val_mean_dice > best.val_mean_dice:
            best = r
    return best


def fill_missing_grads(groups):
    """Zero-fill gradients for deliberately dead paths (clamped gate).

    Only the training loop in that diagnostic mode uses this; the optimizer
    itself stays strict about missing gradients.
    """
    for g in groups:
        for p in g.parameters:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def _salted(seed: int, salt: int) -> int:
    return int(np.random.SeedSequence([seed, salt]).generate_state(1)[0])


def _lens_probe_stacks(index, volumes, count: int = 16):
    """Fixed unaugmented LENS-positive stacks for the gate-drift log."""
    picked = [e for e in index.entries
              if e.class_name == "lens" and not e.is_negative][:count]
    return [volumes.stack(e) for e in picked]


def _probe_gate(model, stacks) -> float:
    if model.kind != "temporal" or not stacks:
        return 0.0
    arr = np.stack([s.slices for s in stacks])
    ids = np.array([model.prompt_table.class_id(s.class_name) for s in stacks])
    with N.no_grad():
        _, g, _ = model.forward_batch(arr, ids)
    return float(g.data.mean())


def _render_metrics(rows) -> str:
    if not rows:
        return ""
    header = list(rows[0])
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for key in header:
            v = row[key]
            cells.append(str(v) if isinstance(v, (int, str)) else f"{v:.8f}")
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
