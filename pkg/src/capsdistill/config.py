"""Run configuration: nested dataclasses loaded strictly from YAML or JSON.

Unknown keys anywhere in the tree raise ConfigError naming the dotted path.
Example::

    output_dir: runs/seed-synth
    data:
      synth: {n_subjects: 8, n_sessions: 15, segments_per_session: 12, n_channels: 16}
    features: {bands: seed, segment_seconds: 8}   # bands default: seed, or seed-vig for regression
    teacher: {n_layers: 3, hidden_units: 256}
    student: {n_layers: 1, hidden_units: 16}
    distill: {eta: 0.3, xi: 1000.0, alpha: 0.7, tau: 1.0}
    plan: {epochs: 50, seed: 0, subjects: [0, 1, 2]}
    sweep: {ladder: [[1, 256], [1, 144], [1, 64], [1, 16]], teacher_epochs: 20}
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .capsnet import STUDENT_LADDER, ArchSpec
from .data import FeatureSpec, SynthSpec
from .distill import DistillConfig
from .errors import ConfigError
from .signal import SEED_BANDS, SEED_VIG_BANDS
from .training import DEFAULT_FRACTIONS, ExperimentPlan, LRSchedule
from .training.loop import STUDENT_ARCH, TEACHER_ARCH

OUTPUT_ENV = "CAPSDISTILL_OUTPUT"
NAMED_BANDS = {"seed": SEED_BANDS, "seed-vig": SEED_VIG_BANDS}
ARCH_KEYS = {f.name for f in dataclasses.fields(ArchSpec)} - {"n_features", "head"}


@dataclass
class DataSection:
    path: str | None = None  # directory holding dataset.json + FTZ files
    synth: SynthSpec | None = None


@dataclass
class FeatureSection:
    bands: Any = None  # a name from NAMED_BANDS, a list of [low, high] pairs, or None for the task default
    segment_seconds: int = 8
    target_rate: float = 200.0
    bandpass: tuple = (0.5, 70.0)
    notch: float | None = 50.0
    de_method: str = "time"

    def to_spec(self, task: str = "classification") -> FeatureSpec:
        if self.bands is None:
            bands = SEED_BANDS if task == "classification" else SEED_VIG_BANDS
        elif isinstance(self.bands, str):
            if self.bands not in NAMED_BANDS:
                raise ConfigError(f"features.bands: unknown band set {self.bands!r}; "
                                  f"expected one of {sorted(NAMED_BANDS)} or a list of pairs")
            bands = NAMED_BANDS[self.bands]
        else:
            bands = tuple(tuple(float(v) for v in b) for b in self.bands)
        if self.de_method not in ("time", "spectral"):
            raise ConfigError(f"features.de_method must be 'time' or 'spectral', got {self.de_method!r}")
        return FeatureSpec(bands, int(self.segment_seconds), float(self.target_rate),
                           tuple(self.bandpass), self.notch, self.de_method)


@dataclass
class DistillSection:
    tau: float = 1.0
    xi: float = 1e3
    eta: float = 0.3
    alpha: float = 0.7
    gram_norm: str = "frobenius"

    def to_config(self, task: str) -> DistillConfig:
        return DistillConfig(self.tau, self.xi, self.eta, self.alpha, task, self.gram_norm)


@dataclass
class PlanSection:
    phase: str = "distill"
    epochs: int | None = None
    batch_size: int | None = None
    seed: int = 0
    protocol: str | None = None
    n_train_sessions: int = 9
    k_folds: int = 5
    data_fraction: float = 1.0
    subjects: tuple | None = None
    weight_clip: float | None = 5.0
    grad_clip: float | None = None
    lr: LRSchedule | None = None


@dataclass
class SweepSection:
    ladder: tuple = STUDENT_LADDER
    fractions: tuple = DEFAULT_FRACTIONS
    teacher_epochs: int | None = None


@dataclass
class RunConfig:
    output_dir: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    features: FeatureSection = field(default_factory=FeatureSection)
    teacher: dict = field(default_factory=lambda: dict(TEACHER_ARCH))
    student: dict = field(default_factory=lambda: dict(STUDENT_ARCH))
    distill: DistillSection = field(default_factory=DistillSection)
    plan: PlanSection = field(default_factory=PlanSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def __post_init__(self):
        for name in ("teacher", "student"):
            unknown = set(getattr(self, name)) - ARCH_KEYS
            if unknown:
                raise ConfigError(f"{name}: unknown key(s) {sorted(unknown)}; allowed {sorted(ARCH_KEYS)}")
        self.sweep.ladder = tuple(tuple(int(v) for v in r) for r in self.sweep.ladder)
        self.sweep.fractions = tuple(float(f) for f in self.sweep.fractions)
        if self.plan.subjects is not None:
            self.plan.subjects = tuple(int(s) for s in self.plan.subjects)

    def to_plan(self, task: str, **overrides) -> ExperimentPlan:
        p = self.plan
        kw = dict(phase=p.phase, epochs=p.epochs, batch_size=p.batch_size, seed=p.seed,
                  protocol=p.protocol, n_train_sessions=p.n_train_sessions, k_folds=p.k_folds,
                  data_fraction=p.data_fraction, subjects=p.subjects, weight_clip=p.weight_clip,
                  grad_clip=p.grad_clip, schedule=p.lr, distill=self.distill.to_config(task),
                  teacher=dict(self.teacher), student=dict(self.student))
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return ExperimentPlan(**kw)

    def output_path(self) -> Path:
        """Relative output dirs resolve against $CAPSDISTILL_OUTPUT when set."""
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ENV)
        if root and not out.is_absolute():
            return Path(root) / out
        return out

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def _build(cls, raw: Any, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {sorted(unknown)}; allowed {sorted(fields)}")
    kw = {}
    for name, value in raw.items():
        sub = _NESTED.get((cls, name))
        path = f"{where}.{name}" if where else name
        if sub is not None and value is not None:
            kw[name] = _build(sub, value, path)
        elif isinstance(value, list):
            kw[name] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        else:
            kw[name] = value
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


_NESTED = {
    (RunConfig, "data"): DataSection,
    (RunConfig, "features"): FeatureSection,
    (RunConfig, "distill"): DistillSection,
    (RunConfig, "plan"): PlanSection,
    (RunConfig, "sweep"): SweepSection,
    (DataSection, "synth"): SynthSpec,
    (PlanSection, "lr"): LRSchedule,
}


def config_from_dict(raw: dict | None) -> RunConfig:
    cfg = _build(RunConfig, raw or {}, "")
    cfg.teacher = dict(cfg.teacher)
    cfg.student = dict(cfg.student)
    return cfg


def load_config(path) -> RunConfig:
    """Read a YAML (or JSON, a YAML subset) run config."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON: {exc}") from None
    return config_from_dict(raw)
