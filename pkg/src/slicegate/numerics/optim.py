"""AdamW with parameter groups, plus the warm-restart cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from slicegate.errors import NumericError
from slicegate.numerics.tensor import Tensor


@dataclass
class ParamGroup:
    """Named set of parameters sharing a learning rate and weight decay."""

    name: str
    parameters: list[Tensor]
    learning_rate: float
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise NumericError(f"group {self.name}: negative learning rate")
        if self.weight_decay < 0:
            raise NumericError(f"group {self.name}: negative weight decay")


class AdamW:
    """Decoupled-weight-decay Adam. betas (0.9, 0.999), eps 1e-8.

    Decay multiplies parameters by (1 - lr*wd) before the moment update
    and is skipped entirely for groups with weight_decay == 0.
    """

    def __init__(self, groups: list[ParamGroup], betas=(0.9, 0.999), eps=1e-8):
        names = [g.name for g in groups]
        if len(set(names)) != len(names):
            raise NumericError("duplicate parameter group names")
        seen = set()
        for g in groups:
            for p in g.parameters:
                if id(p) in seen:
                    raise NumericError(f"parameter {p.name} appears in two groups")
                seen.add(id(p))
        self.groups = groups
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self._m = {id(p): np.zeros_like(p.data) for g in groups for p in g.parameters}
        self._v = {id(p): np.zeros_like(p.data) for g in groups for p in g.parameters}

    def zero_grad(self):
        for g in self.groups:
            for p in g.parameters:
                p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for group in self.groups:
            lr, wd = group.learning_rate, group.weight_decay
            for p in group.parameters:
                if p.grad is None:
                    raise NumericError(
                        f"missing gradient for parameter {p.name!r} in group {group.name!r}")
                g = p.grad
                if wd > 0.0 and lr != 0.0:
                    p.data *= 1.0 - lr * wd
                m = self._m[id(p)]
                v = self._v[id(p)]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * (g * g)
                if lr != 0.0:
                    p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class SchedulerState:
    """Warm-restart cosine schedule; cycle-length multiplier is fixed at 1."""

    base_lr_per_group: dict[str, float]
    t0: int = 5
    eta_min: float = 0.0

    def __post_init__(self):
        if self.t0 <= 0:
            raise NumericError("scheduler period t0 must be positive")


def lr_at_epoch(state: SchedulerState, epoch: float) -> dict[str, float]:
    """Cosine from base to eta_min over each t0-epoch cycle, restarting at base.

    lr = eta_min + (base - eta_min) * (1 + cos(pi * t/T)) / 2 with t the
    position inside the current cycle, so lr(0) == base exactly and every
    multiple of t0 restarts at base exactly.
    """
    if epoch < 0:
        raise NumericError("epoch must be >= 0")
    t = math.fmod(epoch, state.t0)
    frac = 0.5 * (1.0 + math.cos(math.pi * t / state.t0))
    return {name: state.eta_min + (base - state.eta_min) * frac
            for name, base in state.base_lr_per_group.items()}


def apply_lrs(optimizer: AdamW, lrs: dict[str, float]):
    for group in optimizer.groups:
        group.learning_rate = lrs[group.name]
