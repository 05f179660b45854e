"""Model-size and data-fraction sweeps comparing distillation against scratch training."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..capsnet import STUDENT_LADDER, CapsNet, count_params
from ..data import Dataset
from ..errors import ConfigError
from .loop import ExperimentPlan, PhaseResult, arch_for, phase_plan, run_phase

log = logging.getLogger(__name__)

ARMS = ("distill", "scratch")
DEFAULT_FRACTIONS = tuple(round(0.1 * k, 1) for k in range(1, 10))


@dataclass
class SweepTable:
    """Long-format sweep output: one row per (rung or fraction, arm)."""

    rows: list[dict]
    results: dict = field(default_factory=dict, repr=False)

    @property
    def columns(self) -> list[str]:
        cols: list[str] = []
        for r in self.rows:
            cols.extend(k for k in r if k not in cols)
        return cols

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.columns, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: _fmt(v) for k, v in r.items()})
        return path

    def pivot(self, metric: str) -> dict:
        """{key: {arm: mean}} for quick comparisons."""
        out: dict = {}
        for r in self.rows:
            key = r.get("rung", r.get("fraction"))
            out.setdefault(key, {})[r["arm"]] = r[f"{metric}_mean"]
        return out


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _metric_cols(res: PhaseResult) -> dict:
    out = {"n_splits": len(res.results)}
    for key, (mean, sd) in res.summary().items():
        out[f"{key}_mean"] = mean
        out[f"{key}_sd"] = sd
    return out


def finetune_teachers(plan: ExperimentPlan, ds: Dataset, pretrained, jobs: int = 1,
                      epochs: int | None = None) -> tuple[dict[str, CapsNet], PhaseResult]:
    """Fine-tune pre-trained teachers on each split's (possibly subsampled) training set.

    ``epochs`` overrides the plan's epoch count for the teacher only.
    """
    fp = phase_plan(plan, "finetune", epochs=plan.epochs if epochs is None else epochs)
    res = run_phase(fp, ds, teacher=pretrained, jobs=jobs)
    return {r.split.name: r.model for r in res.results}, res


def _arms(plan: ExperimentPlan, ds: Dataset, teachers: Mapping, jobs: int) -> dict[str, PhaseResult]:
    return {
        "distill": run_phase(phase_plan(plan, "distill"), ds, teacher=teachers, jobs=jobs),
        "scratch": run_phase(phase_plan(plan, "scratch"), ds, jobs=jobs),
    }


def sweep_model_size(plan: ExperimentPlan, ds: Dataset, pretrained,
                     ladder: Sequence[tuple[int, int]] = STUDENT_LADDER, jobs: int = 1,
                     finetuned: Mapping | None = None, teacher_epochs: int | None = None) -> SweepTable:
    """Distill and scratch arms for every (layers, units) rung of ``ladder``.

    ``pretrained`` maps held-out subject to a pre-trained teacher. Teachers are
    fine-tuned once per split and shared across rungs unless ``finetuned`` is given.
    """
    if not ladder:
        raise ConfigError("model-size sweep needs a non-empty ladder")
    teacher_params = count_params(arch_for(plan.teacher, ds))
    if finetuned is None:
        finetuned, _ = finetune_teachers(plan, ds, pretrained, jobs, teacher_epochs)
    rows, results = [], {}
    for rung, (n, m) in enumerate(ladder):
        student = dict(plan.student, n_layers=n, hidden_units=m)
        rp = phase_plan(plan, plan.phase, student=student)
        params = count_params(arch_for(student, ds))
        arms = _arms(rp, ds, finetuned, jobs)
        for arm in ARMS:
            rows.append({"rung": rung, "n_layers": n, "hidden_units": m, "params": params,
                         "compression_ratio": params / teacher_params, "arm": arm,
                         **_metric_cols(arms[arm])})
            results[(rung, arm)] = arms[arm]
        log.info("rung %d (%d x %d): %s", rung, n, m,
                 {a: arms[a].summary() for a in ARMS})
    return SweepTable(rows, results)


def sweep_data_fraction(plan: ExperimentPlan, ds: Dataset, pretrained,
                        fractions: Sequence[float] = DEFAULT_FRACTIONS, jobs: int = 1,
                        teacher_epochs: int | None = None) -> SweepTable:
    """Paired distill/scratch runs on seeded training subsets.

    For each fraction the teacher is fine-tuned on the same subset the student sees.
    """
    bad = [f for f in fractions if not 0 < f <= 1]
    if bad:
        raise ConfigError(f"fractions must lie in (0, 1], got {bad}")
    rows, results = [], {}
    for frac in fractions:
        fp = phase_plan(plan, plan.phase, data_fraction=float(frac))
        teachers, _ = finetune_teachers(fp, ds, pretrained, jobs, teacher_epochs)
        arms = _arms(fp, ds, teachers, jobs)
        n_train = int(np.mean([r.n_train for r in arms["scratch"].results]))
        for arm in ARMS:
            rows.append({"fraction": float(frac), "n_train": n_train, "arm": arm,
                         **_metric_cols(arms[arm])})
            results[(frac, arm)] = arms[arm]
        log.info("fraction %.2f: %s", frac, {a: arms[a].summary() for a in ARMS})
    return SweepTable(rows, results)
