"""Desk-scale synthetic experiments: teacher pre-training plus the two trend sweeps.

The defaults keep a full five-seed model-size sweep well under half an hour on
one CPU core: 8 synthetic subjects x 15 sessions x 12 segments (1440 segments),
16 channels, three evaluated subjects.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

from .capsnet import STUDENT_LADDER, CapsNet
from .data import Dataset, SynthSpec, synthetic_dataset
from .distill import DistillConfig
from .training import ExperimentPlan, SweepTable, phase_plan, run_phase, sweep_data_fraction, sweep_model_size

log = logging.getLogger(__name__)

DESK_SYNTH = SynthSpec(n_subjects=8, n_sessions=15, segments_per_session=12, n_channels=16,
                       noise=1.0, class_gain=0.3, distractor=2.0, seed=0)


@dataclass(frozen=True)
class DeskSetup:
    synth: SynthSpec = DESK_SYNTH
    eval_subjects: tuple[int, ...] = (0, 1, 2)
    pretrain_epochs: int = 20
    finetune_epochs: int = 20
    student_epochs: int = 50
    teacher_seed: int = 0
    distill: DistillConfig = field(default_factory=DistillConfig.seed_default)

    def plan(self, seed: int) -> ExperimentPlan:
        return ExperimentPlan(phase="distill", epochs=self.student_epochs, seed=seed,
                              subjects=self.eval_subjects, distill=self.distill)


def desk_dataset(setup: DeskSetup = DeskSetup()) -> Dataset:
    return synthetic_dataset(setup.synth)


def pretrain_teachers(setup: DeskSetup, ds: Dataset, jobs: int = 1) -> dict[int, CapsNet]:
    """LOSO pre-training: one teacher per evaluated subject, never shown that subject."""
    plan = phase_plan(setup.plan(setup.teacher_seed), "pretrain", epochs=setup.pretrain_epochs)
    res = run_phase(plan, ds, jobs=jobs)
    for r in res.results:
        log.info("teacher for subject %d: held-out accuracy %.3f", r.split.subject, r.report.accuracy)
    return {r.split.subject: r.model for r in res.results}


def size_trend(setup: DeskSetup, ds: Dataset, teachers, seeds=range(5),
               ladder=STUDENT_LADDER, jobs: int = 1) -> list[SweepTable]:
    tables = []
    for seed in seeds:
        t0 = time.perf_counter()
        tables.append(sweep_model_size(setup.plan(seed), ds, teachers, ladder, jobs,
                                       teacher_epochs=setup.finetune_epochs))
        log.info("size sweep seed %d: %.0f s", seed, time.perf_counter() - t0)
    return tables


def fraction_trend(setup: DeskSetup, ds: Dataset, teachers, seeds=range(5),
                   fractions=(0.3,), jobs: int = 1) -> list[SweepTable]:
    tables = []
    for seed in seeds:
        tables.append(sweep_data_fraction(setup.plan(seed), ds, teachers, fractions, jobs,
                                          teacher_epochs=setup.finetune_epochs))
    return tables
