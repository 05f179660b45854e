"""Training loop, teacher target caching and the phase protocol."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from .. import tensorcore as tc
from ..capsnet import ArchSpec, CapsNet
from ..data import Dataset, Split, make_splits, subsample
from ..distill import (DistillConfig, LossReport, loss_higher, loss_lower, margin_loss, mse_loss,
                       one_hot, total_loss)
from ..errors import ConfigError
from .metrics import MetricReport, metrics, summarize
from .optim import DEFAULT_BATCH, DEFAULT_EPOCHS, PHASES, LRSchedule, OptimState, adam_step, lr_at

log = logging.getLogger(__name__)

TEACHER_ARCH = {"n_layers": 3, "hidden_units": 256}
STUDENT_ARCH = {"n_layers": 1, "hidden_units": 16}


@dataclass
class ExperimentPlan:
    phase: str = "distill"
    epochs: int | None = None
    batch_size: int | None = None
    seed: int = 0
    protocol: str | None = None
    n_train_sessions: int = 9
    k_folds: int = 5
    data_fraction: float = 1.0
    subjects: tuple[int, ...] | None = None
    weight_clip: float | None = 5.0
    grad_clip: float | None = None
    schedule: LRSchedule | None = None
    distill: DistillConfig = field(default_factory=DistillConfig)
    teacher: dict = field(default_factory=lambda: dict(TEACHER_ARCH))
    student: dict = field(default_factory=lambda: dict(STUDENT_ARCH))

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}; expected one of {PHASES}")
        if not 0 < self.data_fraction <= 1:
            raise ConfigError(f"data_fraction must lie in (0, 1], got {self.data_fraction}")

    @property
    def n_epochs(self) -> int:
        return self.epochs if self.epochs is not None else DEFAULT_EPOCHS[self.phase]

    @property
    def n_batch(self) -> int:
        return self.batch_size if self.batch_size is not None else DEFAULT_BATCH[self.phase]

    def split_protocol(self, task: str) -> str:
        if self.phase == "pretrain":
            return "loso"
        if self.protocol is not None:
            return self.protocol
        return "fixed-session" if task == "classification" else "kfold"

    def loss_config(self) -> DistillConfig:
        if self.phase == "distill":
            return self.distill
        return DistillConfig.scratch(self.distill.task)

    def lr(self, epoch: int) -> float:
        return lr_at(epoch, self.phase, self.schedule)


def arch_spec(arch: Mapping, n_features: int, task: str, n_classes: int = 0,
              windows: int | None = None) -> ArchSpec:
    """Materialise an ArchSpec from a config mapping and dataset properties."""
    kw = dict(arch)
    kw["n_features"] = n_features
    kw["head"] = task
    if windows is not None:
        kw.setdefault("windows", windows)
    if "n_higher" not in kw:
        kw["n_higher"] = n_classes if task == "classification" else 10
    try:
        return ArchSpec(**kw)
    except TypeError as exc:
        raise ConfigError(f"bad architecture config {dict(arch)}: {exc}") from None


def arch_for(arch: Mapping, ds: Dataset) -> ArchSpec:
    """ArchSpec sized to a dataset's windows, feature count and task."""
    _, windows, n_features = ds.features.shape
    return arch_spec(arch, n_features, ds.task, ds.n_classes, windows)


@dataclass
class TeacherTargets:
    """Frozen teacher outputs for a training set: lower capsules and higher lengths."""

    lower: np.ndarray  # (N, A, d)
    lengths: np.ndarray  # (N, K)

    @classmethod
    def compute(cls, teacher: CapsNet, x: np.ndarray, batch_size: int = 128) -> "TeacherTargets":
        lower, lengths = [], []
        with tc.no_grad():
            for k in range(0, len(x), batch_size):
                out = teacher.forward(x[k:k + batch_size])
                lower.append(out.capsules.lower.data)
                lengths.append(out.lengths.data)
        return cls(np.concatenate(lower), np.concatenate(lengths))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    l_u: float
    l_v: float
    l_task: float
    l_total: float


def batch_losses(model: CapsNet, x: np.ndarray, y: np.ndarray, cfg: DistillConfig,
                 n_classes: int, teacher: TeacherTargets | None = None,
                 idx: np.ndarray | None = None) -> LossReport:
    """Forward one batch and combine task and distillation losses."""
    out = model.forward(x)
    if cfg.task == "classification":
        l_task = margin_loss(out.lengths, one_hot(y, n_classes))
    else:
        l_task = mse_loss(out.head, y)
    l_u = l_v = None
    if cfg.uses_teacher:
        if teacher is None:
            raise ValueError("distillation weights are non-zero but no teacher targets were given")
        l_u = loss_lower(tc.Tensor(teacher.lower[idx]), out.capsules.lower, cfg.gram_norm)
        l_v = loss_higher(teacher.lengths[idx], out.lengths, cfg.tau)
    return total_loss(cfg, l_task, l_u, l_v)


def fit(model: CapsNet, x: np.ndarray, y: np.ndarray, *, epochs: int, batch_size: int,
        lr: Callable[[int], float], seed: int, cfg: DistillConfig, n_classes: int = 0,
        teacher: TeacherTargets | None = None, weight_clip: float | None = 5.0,
        grad_clip: float | None = None, step_log: list | None = None) -> list[EpochRecord]:
    """Mini-batch Adam training; order reshuffled every epoch from ``seed``."""
    rng = np.random.default_rng(seed)
    state = OptimState(weight_clip=weight_clip, grad_clip=grad_clip)
    params = model.params
    history = []
    step = 0
    for epoch in range(1, epochs + 1):
        rate = lr(epoch)
        order = rng.permutation(len(x))
        sums = np.zeros(4)
        n_steps = 0
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            for t in params.values():
                t.grad = None
            rep = batch_losses(model, x[idx], y[idx], cfg, n_classes, teacher, idx)
            rep.total.backward()
            adam_step({k: t.data for k, t in params.items()},
                      {k: t.grad for k, t in params.items()}, state, rate)
            sums += (rep.l_u, rep.l_v, rep.l_task, rep.l_total)
            n_steps += 1
            if step_log is not None:
                step_log.append((step, rep.l_u, rep.l_v, rep.l_task, rep.l_total))
            step += 1
        m = sums / max(n_steps, 1)
        history.append(EpochRecord(epoch, rate, *m.tolist()))
        log.debug("epoch %d lr %.2g loss %.5f", epoch, rate, m[3])
    return history


def evaluate(model: CapsNet, ds: Dataset) -> MetricReport:
    return metrics(model.predict(ds.features), ds.labels, ds.task)


# ------------------------------------------------------------------ phases

@dataclass
class SplitResult:
    split: Split
    model: CapsNet
    report: MetricReport
    history: list[EpochRecord]
    steps: list[tuple] = field(default_factory=list)
    n_train: int = 0


@dataclass
class PhaseResult:
    phase: str
    results: list[SplitResult]

    @property
    def reports(self) -> list[MetricReport]:
        return [r.report for r in self.results]

    def summary(self) -> dict[str, tuple[float, float]]:
        return summarize(self.reports)


TeacherSource = CapsNet | Mapping[int, CapsNet] | Callable[[Split], CapsNet] | None


def _teacher_for(source: TeacherSource, split: Split) -> CapsNet | None:
    if source is None or isinstance(source, CapsNet):
        return source
    if isinstance(source, Mapping):
        # keyed by split name (fine-tuned per split) or by subject (pre-trained per held-out subject)
        for key in (split.name, split.subject):
            if key in source:
                return source[key]
        raise ConfigError(f"no teacher checkpoint for split {split.name} (subject {split.subject})")
    return source(split)


def train_indices(plan: ExperimentPlan, ds: Dataset, split: Split) -> np.ndarray:
    idx = subsample(split.train, plan.data_fraction, plan.seed)
    if ds.task == "classification" and ds.n_classes:
        present = np.unique(ds.labels[idx])
        if len(present) < ds.n_classes:
            log.warning("split %s: fraction %.2f leaves classes %s absent from training",
                        split.name, plan.data_fraction,
                        sorted(set(range(ds.n_classes)) - set(present.tolist())))
    return idx


def run_split(plan: ExperimentPlan, ds: Dataset, split: Split, job_seed: int,
              teacher: CapsNet | None = None, log_steps: bool = False) -> SplitResult:
    """Train one model for one split according to ``plan.phase``."""
    idx = train_indices(plan, ds, split)
    x, y = ds.features[idx], ds.labels[idx]
    cfg = plan.loss_config()
    targets = None
    if plan.phase == "pretrain":
        model = CapsNet.create(arch_for(plan.teacher, ds), job_seed)
        model.set_input_stats(x)
    elif plan.phase == "finetune":
        if teacher is None:
            raise ConfigError("finetune phase needs a pre-trained teacher checkpoint")
        model = teacher.copy()
    else:
        model = CapsNet.create(arch_for(plan.student, ds), job_seed)
        model.set_input_stats(x)
        if plan.phase == "distill" and cfg.uses_teacher:
            if teacher is None:
                raise ConfigError("distill phase needs a teacher checkpoint")
            if teacher.spec.lower_dim != model.spec.lower_dim or teacher.spec.n_higher != model.spec.n_higher:
                raise ConfigError(f"teacher capsules (d={teacher.spec.lower_dim}, K={teacher.spec.n_higher}) "
                                  f"incompatible with student (d={model.spec.lower_dim}, K={model.spec.n_higher})")
            targets = TeacherTargets.compute(teacher, x)
    steps: list = []
    history = fit(model, x, y, epochs=plan.n_epochs, batch_size=plan.n_batch, lr=plan.lr,
                  seed=job_seed, cfg=cfg, n_classes=ds.n_classes, teacher=targets,
                  weight_clip=plan.weight_clip, grad_clip=plan.grad_clip,
                  step_log=steps if log_steps else None)
    report = evaluate(model, ds.subset(split.test))
    return SplitResult(split, model, report, history, steps, len(idx))


def _run_split_job(args) -> SplitResult:
    return run_split(*args)


def run_phase(plan: ExperimentPlan, ds: Dataset, teacher: TeacherSource = None,
              jobs: int = 1, log_steps: bool = False) -> PhaseResult:
    """Run ``plan.phase`` over every split of the plan's protocol.

    Split ``i`` uses seed ``plan.seed + i`` for initialisation and shuffling.
    """
    splits = make_splits(ds, plan.split_protocol(ds.task), plan.subjects,
                         plan.n_train_sessions, plan.k_folds)
    jobs_args = [(plan, ds, sp, plan.seed + i, _teacher_for(teacher, sp), log_steps)
                 for i, sp in enumerate(splits)]
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_split_job, jobs_args))
    else:
        results = [run_split(*a) for a in jobs_args]
    return PhaseResult(plan.phase, results)


def phase_plan(plan: ExperimentPlan, phase: str, **overrides) -> ExperimentPlan:
    return replace(plan, phase=phase, **overrides)
