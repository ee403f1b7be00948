"""Volumetric Dice, temporal-consistency metrics, and ablation protocols.

Prediction is slice-wise in evaluation mode: slice tokens are encoded once
per volume in fixed-size chunks and cached, then reused for every queried
class. The temporal path builds its 5-slice windows by indexing that same
cache, so a gate-clamped temporal model and the baseline see bit-identical
decoder inputs, which is what makes the gate-zero equivalence checks exact.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import slicegate.numerics as N
from slicegate.data import ContextStack, LabeledVolume, VolumeSet, preprocess_volume, window_indices
from slicegate.errors import DataError, NumericError
from slicegate.model import BLANK_PROMPT
from slicegate.numerics import Tensor

DEFAULT_THRESHOLD = 0.5
DEFAULT_FP_AREA = 10


@dataclass
class DiceReport:
    """Per-(volume, class) Dice plus aggregated means."""

    per_pair: dict  # (volume_id, class_name) -> dice
    per_class_mean: dict
    mean: float
    domain_tag: str = "train-domain"
    model_kind: str = ""

    def to_json(self) -> str:
        payload = {
            "mean": self.mean,
            "per_class_mean": dict(sorted(self.per_class_mean.items())),
            "per_pair": {f"{vid}|{cls}": v for (vid, cls), v in sorted(self.per_pair.items())},
            "domain_tag": self.domain_tag,
            "model_kind": self.model_kind,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DiceReport":
        d = json.loads(text)
        per_pair = {tuple(k.split("|")): v for k, v in d["per_pair"].items()}
        return cls(per_pair=per_pair, per_class_mean=d["per_class_mean"],
                   mean=d["mean"], domain_tag=d["domain_tag"], model_kind=d["model_kind"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["volume_id", "class_name", "dice"])
        for (vid, cls), v in sorted(self.per_pair.items()):
            writer.writerow([vid, cls, f"{v:.6f}"])
        return buf.getvalue()


class VolumePredictor:
    """Cached slice tokens for one volume; per-class mask prediction."""

    def __init__(self, model, volume: LabeledVolume, batch_slices: int = 16,
                 preprocessed: np.ndarray | None = None):
        self.model = model
        self.volume = volume
        self.batch_slices = batch_slices
        self.pre = preprocess_volume(volume) if preprocessed is None else preprocessed
        with N.no_grad():
            chunks = [self.model.encode(self.pre[lo:lo + batch_slices]).data
                      for lo in range(0, volume.z, batch_slices)]
        self.tokens = np.concatenate(chunks, axis=0)  # (Z, L, D_v)

    def predict(self, class_name: str, prompt_name: str | None = None,
                threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
        """(Z, H, W) boolean mask for the queried class. prompt_name lets
        ablations corrupt the prompt while scoring against class_name's GT."""
        prompt = class_name if prompt_name is None else prompt_name
        cid = self.model.prompt_table.class_id(prompt)
        z = self.volume.z
        out = np.zeros((z,) + self.pre.shape[1:], dtype=bool)
        with N.no_grad():
            for lo in range(0, z, self.batch_slices):
                zs = range(lo, min(lo + self.batch_slices, z))
                ids = np.full(len(zs), cid)
                if self.model.kind == "temporal":
                    logits = self._temporal_logits(zs, ids)
                else:
                    tokens = Tensor(self.tokens[lo:lo + self.batch_slices])
                    logits = self.model.decode(tokens, self.model.prompt_vectors(ids))
                logits.require_finite("volume prediction")
                out[lo:lo + self.batch_slices] = _stable_sigmoid(logits.data) > threshold
        return out

    def _temporal_logits(self, zs, ids):
        windows = np.stack([self.tokens[list(window_indices(z, self.volume.z)[0])]
                            for z in zs])  # (B, 5, L, D)
        adapter = self.model.adapter
        h_single = Tensor(np.ascontiguousarray(windows[:, 2]))
        h = adapter.project_tokens(Tensor(windows))
        h = adapter.temporal_attend(h)
        h = adapter.spatial_refine(h)
        h_center, _, _ = adapter.gate_fuse(h, h_single,
                                           clamp_zero=self.model.gate_clamp_zero)
        return self.model.decode(h_center, self.model.prompt_vectors(ids))

    def mean_gate(self, zs=None) -> float:
        """Mean adapter gate over the given slices (all by default)."""
        if self.model.kind != "temporal":
            raise NumericError("gate diagnostics need a temporal model")
        zs = range(self.volume.z) if zs is None else zs
        values = []
        with N.no_grad():
            for lo in range(0, len(zs), self.batch_slices):
                part = list(zs)[lo:lo + self.batch_slices]
                windows = np.stack([self.tokens[list(window_indices(z, self.volume.z)[0])]
                                    for z in part])
                adapter = self.model.adapter
                h = adapter.project_tokens(Tensor(windows))
                h = adapter.temporal_attend(h)
                h = adapter.spatial_refine(h)
                _, g, _ = adapter.gate_fuse(h, Tensor(np.ascontiguousarray(windows[:, 2])))
                values.append(g.data.mean())
        return float(np.mean(values))


def predict_volume(model, volume: LabeledVolume, class_name: str,
                   batch_slices: int = 16) -> np.ndarray:
    """Slice-wise prediction stacked into a (Z, H, W) boolean mask."""
    return VolumePredictor(model, volume, batch_slices=batch_slices).predict(class_name)


def volume_dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P.G| / (|P|+|G|); both-empty counts as 1.0, one-empty as 0.0."""
    if pred.shape != gt.shape:
        raise NumericError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    p_sum, g_sum = int(p.sum()), int(g.sum())
    if p_sum == 0 and g_sum == 0:
        return 1.0
    inter = int((p & g).sum())
    return 2.0 * inter / (p_sum + g_sum)


def aggregate(pairs: dict, domain_tag: str = "train-domain",
              model_kind: str = "") -> DiceReport:
    """Mean over all included (volume, class) pairs; per-class means over
    each class's included volumes. Inclusion is the caller's job (a pair
    appears iff the class is present in that volume's ground truth)."""
    if not pairs:
        raise DataError("no (volume, class) pairs to aggregate")
    ordered = dict(sorted(pairs.items()))  # canonical order: exact means
    per_class: dict[str, list[float]] = {}
    for (vid, cls), v in ordered.items():
        if not 0.0 <= v <= 1.0:
            raise NumericError(f"dice {v} outside [0, 1] for {vid}/{cls}")
        per_class.setdefault(cls, []).append(v)
    per_class_mean = {cls: float(np.mean(vs)) for cls, vs in per_class.items()}
    return DiceReport(per_pair=ordered, per_class_mean=per_class_mean,
                      mean=float(np.mean(list(ordered.values()))),
                      domain_tag=domain_tag, model_kind=model_kind)


def fp_slice_rate(pred: np.ndarray, gt: np.ndarray,
                  tau_area: int = DEFAULT_FP_AREA) -> float | None:
    """Among slices with no GT foreground, the fraction whose predicted
    foreground exceeds tau_area pixels. None when every slice has GT."""
    if pred.shape != gt.shape:
        raise NumericError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    gt_absent = ~gt.astype(bool).any(axis=(1, 2))
    if not gt_absent.any():
        return None
    areas = pred.astype(bool).sum(axis=(1, 2))
    return float((areas[gt_absent] > tau_area).mean())


def evaluate(model, volumes: VolumeSet, class_names, domain_tag: str = "train-domain",
             batch_slices: int = 16, prompt_map: dict | None = None,
             collect_masks: tuple[str, ...] = ()) -> tuple[DiceReport, dict]:
    """Dice over every (volume, class) pair where the class has GT support.

    prompt_map corrupts the queried prompt per class (ablations); masks for
    classes named in collect_masks are returned alongside for consistency
    metrics. Also returns per-pair fp-slice rates under key "fp_rates".
    """
    from slicegate.data import CLASS_IDS

    pairs = {}
    masks = {}
    fp_rates = {}
    for vid in sorted(volumes.volumes):
        vol = volumes.volumes[vid]
        predictor = VolumePredictor(model, vol, batch_slices=batch_slices,
                                    preprocessed=volumes.preprocessed(vid))
        for cls in class_names:
            gt = vol.labels == CLASS_IDS[cls]
            if not gt.any():
                continue  # absent classes are excluded from the means
            prompt = prompt_map.get(cls) if prompt_map else None
            pred = predictor.predict(cls, prompt_name=prompt)
            pairs[(vid, cls)] = volume_dice(pred, gt)
            rate = fp_slice_rate(pred, gt)
            if rate is not None:
                fp_rates[(vid, cls)] = rate
            if cls in collect_masks:
                masks[(vid, cls)] = pred
    report = aggregate(pairs, domain_tag=domain_tag, model_kind=model.kind)
    return report, {"masks": masks, "fp_rates": fp_rates}


def mean_fp_rate(extras: dict, class_name: str) -> float | None:
    rates = [v for (vid, cls), v in extras["fp_rates"].items() if cls == class_name]
    return float(np.mean(rates)) if rates else None


def derangement(class_names) -> dict:
    """Fixed wrong-prompt mapping: every class queried as a different one."""
    names = sorted(class_names)
    if len(names) < 2:
        raise DataError("wrong-prompt ablation needs a vocabulary of size >= 2")
    return {c: names[(i + 1) % len(names)] for i, c in enumerate(names)}


def prompt_ablation(model, volumes: VolumeSet, mode: str,
                    domain_tag: str = "train-domain",
                    batch_slices: int = 16) -> tuple[DiceReport, dict]:
    """Blank mode queries the reserved empty prompt for every class; wrong
    mode queries a fixed derangement. Dice is scored against the true GT."""
    class_names = model.config.class_names
    if mode == "blank":
        prompt_map = {c: BLANK_PROMPT for c in class_names}
    elif mode == "wrong":
        prompt_map = derangement(class_names)
    else:
        raise DataError(f"unknown ablation mode {mode!r}; expected blank or wrong")
    report, extras = evaluate(model, volumes, class_names, domain_tag=domain_tag,
                              batch_slices=batch_slices, prompt_map=prompt_map)
    extras["prompt_map"] = prompt_map
    return report, extras


def relative_drop(train_mean: float, domain_mean: float) -> float:
    """(train - domain) / train; the cross-domain degradation measure."""
    if train_mean <= 0:
        raise NumericError("train-domain mean must be positive for a relative drop")
    return (train_mean - domain_mean) / train_mean


def cross_domain_eval(model, domain_volumes: VolumeSet, train_domain_mean: float,
                      domain_tag: str, batch_slices: int = 16) -> tuple[DiceReport, float]:
    """Zero-shot evaluation on another domain (no adaptation of any kind),
    plus the relative drop against the given train-domain mean."""
    report, _ = evaluate(model, domain_volumes, model.config.class_names,
                         domain_tag=domain_tag, batch_slices=batch_slices)
    return report, relative_drop(train_domain_mean, report.mean)


def render_comparison_table(baseline: DiceReport, temporal: DiceReport) -> str:
    """Plain-text per-class table: class, baseline, temporal, delta."""
    classes = sorted(set(baseline.per_class_mean) | set(temporal.per_class_mean))
    rows = [("class", "baseline", "temporal", "delta")]
    for cls in classes:
        b = baseline.per_class_mean.get(cls)
        t = temporal.per_class_mean.get(cls)
        rows.append((cls,
                     "-" if b is None else f"{b:.3f}",
                     "-" if t is None else f"{t:.3f}",
                     "-" if None in (b, t) else f"{t - b:+.3f}"))
    rows.append(("mean", f"{baseline.mean:.3f}", f"{temporal.mean:.3f}",
                 f"{temporal.mean - baseline.mean:+.3f}"))
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def write_report(out_dir, stem: str, report: DiceReport) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / f"{stem}.json"
    csv_path = out / f"{stem}.csv"
    json_path.write_text(report.to_json())
    csv_path.write_text(report.to_csv())
    return json_path, csv_path


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
