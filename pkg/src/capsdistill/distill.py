"""Capsule distillation losses, task losses and their weighted combination.

All losses accept batched inputs and are mean-reduced over the batch.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .errors import ConfigError
from .tensorcore import Tensor

log = logging.getLogger(__name__)

TASKS = ("classification", "regression")
GRAM_NORMS = ("frobenius", "row")


@dataclass(frozen=True)
class DistillConfig:
    tau: float = 1.0
    xi: float = 1e3
    eta: float = 0.3
    alpha: float = 0.7
    task: str = "classification"
    gram_norm: str = "frobenius"

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if not self.xi > 0:
            raise ConfigError(f"xi must be > 0, got {self.xi}")
        if self.eta < 0:
            raise ConfigError(f"eta must be >= 0, got {self.eta}")
        if not 0 <= self.alpha <= 1:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.gram_norm not in GRAM_NORMS:
            raise ConfigError(f"gram_norm must be one of {GRAM_NORMS}, got {self.gram_norm!r}")

    @property
    def uses_teacher(self) -> bool:
        return self.eta > 0 or self.alpha > 0

    @classmethod
    def seed_default(cls) -> "DistillConfig":
        return cls(alpha=0.7, task="classification")

    @classmethod
    def seed_vig_default(cls) -> "DistillConfig":
        return cls(alpha=0.3, task="regression")

    @classmethod
    def scratch(cls, task: str) -> "DistillConfig":
        return cls(eta=0.0, alpha=0.0, task=task)


@dataclass
class LossReport:
    l_u: float
    l_v: float
    l_task: float
    l_total: float
    contributions: dict[str, float] = field(default_factory=dict)
    total: Tensor | None = field(default=None, repr=False)


def covariance_gram(u: Tensor) -> Tensor:
    """G = u^T u over the capsule axis: (..., A, d) -> (..., d, d)."""
    u = tc.as_tensor(u)
    if u.ndim == 2:
        return tc.matmul(u.transpose(1, 0), u)
    return tc.einsum("bad,bae->bde", u, u)


def _normalize_gram(g: Tensor, mode: str) -> Tensor:
    """Divide by the Frobenius norm of each Gram matrix, or by each row's L2 norm."""
    if mode == "row":
        norms = tc.l2_norm(g, axis=-1, keepdims=True)
    else:
        norms = tc.l2_norm(g.reshape(*g.shape[:-2], -1), axis=-1).reshape(*g.shape[:-2], 1, 1)
    zero = norms.data == 0
    if zero.any():
        log.warning("lower-capsule loss: %d all-zero Gram norm(s) left unnormalised", int(zero.sum()))
        norms = norms + Tensor(zero.astype(np.float64))
    return g / norms.broadcast_to(g.shape)


def loss_lower(u_teacher: Tensor, u_student: Tensor, gram_norm: str = "frobenius") -> Tensor:
    """Squared Frobenius distance between normalised capsule Gram matrices.

    Capsule counts may differ between the two banks; only the capsule
    dimension has to match.
    """
    u_teacher, u_student = tc.as_tensor(u_teacher), tc.as_tensor(u_student)
    if u_teacher.shape[-1] != u_student.shape[-1] or u_teacher.ndim != u_student.ndim:
        raise tc.ShapeError(f"loss_lower: capsule dims differ, teacher {u_teacher.shape} "
                            f"vs student {u_student.shape}")
    gt = _normalize_gram(covariance_gram(u_teacher), gram_norm)
    gs = _normalize_gram(covariance_gram(u_student), gram_norm)
    diff = gt - gs
    sq = (diff * diff).sum(axis=(-2, -1))
    return sq.mean() if sq.ndim else sq


def loss_higher(len_teacher: Tensor, len_student: Tensor, tau: float = 1.0) -> Tensor:
    """tau^2 * KL(softmax(teacher / tau) || softmax(student / tau)) over capsule lengths.

    The teacher side is treated as a constant target.
    """
    len_teacher, len_student = tc.as_tensor(len_teacher), tc.as_tensor(len_student)
    if len_teacher.shape != len_student.shape:
        raise tc.ShapeError(f"loss_higher: teacher {len_teacher.shape} vs student {len_student.shape}")
    z = len_teacher.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = Tensor(np.exp(log_p))
    log_q = tc.log_softmax(len_student / tau, axis=-1)
    kl = (p * (Tensor(log_p) - log_q)).sum(axis=-1)
    kl = kl.mean() if kl.ndim else kl
    return kl * (tau * tau)


def margin_loss(lengths: Tensor, one_hot, m_pos: float = 0.9, m_neg: float = 0.1,
                neg_weight: float = 0.5) -> Tensor:
    """sum_k T_k max(0, m+ - |v_k|)^2 + 0.5 (1 - T_k) max(0, |v_k| - m-)^2, batch mean."""
    lengths = tc.as_tensor(lengths)
    t = np.asarray(one_hot, dtype=np.float64)
    if t.shape != lengths.shape:
        raise ValueError(f"margin_loss: one-hot {t.shape} vs lengths {lengths.shape}")
    if not (np.all((t == 0) | (t == 1)) and np.all(t.sum(axis=-1) == 1)):
        raise ValueError("margin_loss: targets must be one-hot (exactly one 1 per row)")
    pos = tc.relu(m_pos - lengths)
    neg = tc.relu(lengths - m_neg)
    per = (Tensor(t) * pos * pos + Tensor(neg_weight * (1.0 - t)) * neg * neg).sum(axis=-1)
    return per.mean() if per.ndim else per


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_classes:
        raise ValueError(f"class labels must lie in [0, {n_classes})")
    return np.eye(n_classes)[labels]


def mse_loss(pred: Tensor, label) -> Tensor:
    pred = tc.as_tensor(pred)
    label = np.asarray(label, dtype=np.float64)
    if label.shape != pred.shape:
        raise tc.ShapeError(f"mse_loss: prediction {pred.shape} vs label {label.shape}")
    diff = pred - Tensor(label)
    return (diff * diff).mean()


def total_loss(cfg: DistillConfig, l_task: Tensor, l_u: Tensor | None = None,
               l_v: Tensor | None = None) -> LossReport:
    """eta * xi * L_U + alpha * L_V + (1 - alpha) * L_task."""
    if cfg.eta > 0 and l_u is None:
        raise ValueError("total_loss: eta > 0 but no lower-capsule teacher loss given")
    if cfg.alpha > 0 and l_v is None:
        raise ValueError("total_loss: alpha > 0 but no higher-capsule teacher loss given")
    l_task = tc.as_tensor(l_task)
    w_u, w_v, w_t = cfg.eta * cfg.xi, cfg.alpha, 1.0 - cfg.alpha
    total = l_task * w_t
    contrib = {"task": w_t * l_task.item(), "lower": 0.0, "higher": 0.0}
    if l_u is not None and w_u > 0:
        total = total + tc.as_tensor(l_u) * w_u
        contrib["lower"] = w_u * tc.as_tensor(l_u).item()
    if l_v is not None and w_v > 0:
        total = total + tc.as_tensor(l_v) * w_v
        contrib["higher"] = w_v * tc.as_tensor(l_v).item()
    return LossReport(
        l_u=0.0 if l_u is None else tc.as_tensor(l_u).item(),
        l_v=0.0 if l_v is None else tc.as_tensor(l_v).item(),
        l_task=l_task.item(),
        l_total=total.item(),
        contributions=contrib,
        total=total,
    )
