from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

PHASES = ("pretrain", "finetune", "distill", "scratch")


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    weight_clip: float | None = 5.0
    grad_clip: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None],
              state: OptimState, lr: float) -> bool:
    """In-place Adam update followed by element-wise weight clipping.

    Returns False (and leaves everything untouched) if any gradient is non-finite.
    Missing gradients count as zero.
    """
    g = {k: (grads.get(k) if grads.get(k) is not None else np.zeros_like(p)) for k, p in params.items()}
    for k, gk in g.items():
        if not np.all(np.isfinite(gk)):
            log.warning("adam: non-finite gradient in %s at step %d; update skipped", k, state.step + 1)
            return False
    if state.grad_clip is not None:
        total = np.sqrt(sum(float((gk * gk).sum()) for gk in g.values()))
        if total > state.grad_clip:
            g = {k: gk * (state.grad_clip / total) for k, gk in g.items()}
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v, gk = state.m[k], state.v[k], g[k]
        m *= b1
        m += (1.0 - b1) * gk
        v *= b2
        v += (1.0 - b2) * gk * gk
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_clip is not None:
            np.clip(p, -state.weight_clip, state.weight_clip, out=p)
    return True


@dataclass(frozen=True)
class LRSchedule:
    """Piecewise-constant decay: divide by ``factors[i]`` after epoch ``milestones[i]``."""

    base: float = 1e-3
    milestones: tuple[int, ...] = ()
    factors: tuple[float, ...] = ()

    def at(self, epoch: int) -> float:
        lr = self.base
        for m, f in zip(self.milestones, self.factors):
            if epoch > m:
                lr /= f
        return lr


PRETRAIN_SCHEDULE = LRSchedule(1e-3, (100, 150), (10.0, 5.0))
FIXED_SCHEDULE = LRSchedule(1e-3)
DEFAULT_EPOCHS = {"pretrain": 200, "finetune": 50, "distill": 50, "scratch": 50}
DEFAULT_BATCH = {"pretrain": 64, "finetune": 8, "distill": 8, "scratch": 8}


def lr_at(epoch: int, phase: str, schedule: LRSchedule | None = None) -> float:
    """Learning rate for a 1-based epoch; epochs past the schedule keep the final value."""
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}; expected one of {PHASES}")
    if schedule is None:
        schedule = PRETRAIN_SCHEDULE if phase == "pretrain" else FIXED_SCHEDULE
    return schedule.at(max(1, epoch))
