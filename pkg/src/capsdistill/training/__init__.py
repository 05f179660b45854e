"""Optimiser, schedules, training protocol, metrics and sweeps."""
from .bench import ARMS, DEFAULT_FRACTIONS, SweepTable, finetune_teachers, sweep_data_fraction, sweep_model_size
from .logs import file_sha256, write_manifest, write_metrics_csv, write_steps_csv
from .loop import (EpochRecord, ExperimentPlan, PhaseResult, SplitResult, TeacherTargets, arch_for, arch_spec,
                   batch_losses, evaluate, fit, phase_plan, run_phase, run_split)
from .metrics import MetricReport, metrics, pearson, summarize
from .optim import (DEFAULT_BATCH, DEFAULT_EPOCHS, FIXED_SCHEDULE, PHASES, PRETRAIN_SCHEDULE, LRSchedule,
                    OptimState, adam_step, lr_at)
