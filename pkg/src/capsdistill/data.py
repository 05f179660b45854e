"""Segment datasets, split protocols and a synthetic EEG-like generator."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError
from .fileformats import FeatureFile, read_ftz, write_ftz
from .signal import SEED_BANDS, SEED_VIG_BANDS, RawRecording, extract_features, preprocess

log = logging.getLogger(__name__)

PROTOCOLS = ("loso", "fixed-session", "kfold")


@dataclass
class Dataset:
    """Feature segments with labels and provenance, stored as parallel arrays."""

    features: np.ndarray  # (N, L, F)
    labels: np.ndarray  # (N,) int class ids or float targets in [0, 1]
    subjects: np.ndarray  # (N,)
    sessions: np.ndarray  # (N,)
    task: str = "classification"
    n_classes: int = 0

    def __post_init__(self):
        n = len(self.features)
        self.labels = np.asarray(self.labels)
        self.subjects = np.asarray(self.subjects, dtype=np.int64)
        self.sessions = np.asarray(self.sessions, dtype=np.int64)
        if not (len(self.labels) == len(self.subjects) == len(self.sessions) == n):
            raise ValueError("features, labels and provenance arrays differ in length")
        if self.task == "classification":
            self.labels = self.labels.astype(np.int64)
            if self.n_classes == 0 and n:
                self.n_classes = int(self.labels.max()) + 1
        else:
            self.labels = self.labels.astype(np.float64)

    def __len__(self) -> int:
        return len(self.features)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.subjects[idx],
                       self.sessions[idx], self.task, self.n_classes)


# ------------------------------------------------------------------ splits

@dataclass
class Split:
    name: str
    subject: int
    fold: int
    train: np.ndarray
    test: np.ndarray

    def to_dict(self) -> dict:
        return {"name": self.name, "subject": self.subject, "fold": self.fold,
                "train": self.train.tolist(), "test": self.test.tolist()}


def _subject_order(ds: Dataset, subject: int) -> np.ndarray:
    """Indices of one subject ordered by (session, original position)."""
    idx = np.flatnonzero(ds.subjects == subject)
    return idx[np.lexsort((idx, ds.sessions[idx]))]


def make_splits(ds: Dataset, protocol: str, subjects=None, n_train_sessions: int = 9,
                k: int = 5) -> list[Split]:
    """Train/test index sets.

    loso: one split per held-out subject, trained on every other subject.
    fixed-session: per subject, first ``n_train_sessions`` sessions train, the rest test.
    kfold: per subject, ``k`` contiguous blocks in time order; each block tests once.
    """
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown split protocol {protocol!r}; expected one of {PROTOCOLS}")
    all_subjects = np.unique(ds.subjects)
    chosen = all_subjects if subjects is None else np.asarray(subjects)
    missing = set(chosen.tolist()) - set(all_subjects.tolist())
    if missing:
        raise ConfigError(f"subjects {sorted(missing)} not present in dataset")
    splits = []
    for s in chosen.tolist():
        if protocol == "loso":
            if len(all_subjects) < 2:
                raise ConfigError("loso needs at least two subjects")
            test = np.flatnonzero(ds.subjects == s)
            train = np.flatnonzero(ds.subjects != s)
            splits.append(Split(f"loso-s{s}", s, 0, train, test))
        elif protocol == "fixed-session":
            order = _subject_order(ds, s)
            sess = np.unique(ds.sessions[order])
            if len(sess) <= n_train_sessions:
                raise ConfigError(f"subject {s} has {len(sess)} sessions; fixed-session split "
                                  f"needs more than {n_train_sessions}")
            in_train = np.isin(ds.sessions[order], sess[:n_train_sessions])
            splits.append(Split(f"session-s{s}", s, 0, np.sort(order[in_train]), np.sort(order[~in_train])))
        else:
            order = _subject_order(ds, s)
            if len(order) < k:
                raise ConfigError(f"subject {s} has {len(order)} segments, fewer than k={k} folds")
            for f, block in enumerate(np.array_split(order, k)):
                train = np.setdiff1d(order, block)
                splits.append(Split(f"kfold-s{s}-f{f}", s, f, train, np.sort(block)))
    for sp in splits:
        if len(sp.train) == 0 or len(sp.test) == 0:
            raise ConfigError(f"split {sp.name} has an empty train or test set")
    return splits


def subsample(idx: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Seeded fixed draw of ``round(fraction * n)`` indices, kept in original order."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"data fraction must lie in (0, 1], got {fraction}")
    idx = np.asarray(idx)
    n = max(1, int(round(fraction * len(idx))))
    if n >= len(idx):
        return idx.copy()
    pick = np.random.default_rng(seed).permutation(len(idx))[:n]
    return idx[np.sort(pick)]


# ------------------------------------------------------------------ synthetic data

@dataclass(frozen=True)
class SynthSpec:
    n_subjects: int = 15
    n_sessions: int = 15
    segments_per_session: int = 4
    n_channels: int | None = None  # 62 for classification, 17 for regression
    task: str = "classification"
    n_classes: int = 3
    segment_seconds: int = 8
    sample_rate: int = 200
    noise: float = 0.5
    class_gain: float = 2.0
    subject_jitter: float = 0.3
    distractor: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_channels is None:
            object.__setattr__(self, "n_channels", 62 if self.task == "classification" else 17)
        for name in ("n_subjects", "n_sessions", "segments_per_session", "n_channels",
                     "segment_seconds", "sample_rate"):
            if getattr(self, name) < 1:
                raise ConfigError(f"SynthSpec.{name} must be >= 1")
        if self.noise < 0 or self.subject_jitter < 0 or self.distractor < 0:
            raise ConfigError("noise, subject_jitter and distractor must be >= 0")
        if self.task not in ("classification", "regression"):
            raise ConfigError(f"unknown synthetic task {self.task!r}")
        if self.task == "classification" and not 2 <= self.n_classes <= 5:
            raise ConfigError("synthetic classification supports 2..5 classes")

    @property
    def bands(self):
        return SEED_BANDS if self.task == "classification" else SEED_VIG_BANDS


@dataclass
class SynthRecording:
    recording: RawRecording
    subject: int
    session: int
    labels: np.ndarray  # one per segment


# class k modulates band CLASS_BANDS[k] of SEED_BANDS: alpha, beta, theta, gamma, delta
CLASS_BANDS = (2, 3, 1, 4, 0)
# regression target modulates the alpha range (8-13 Hz)
TARGET_BAND = (8.0, 13.0)


def _shaped_noise(rng, n_ch: int, n: int, fs: float, low: float, high: float,
                  pink: bool = False) -> np.ndarray:
    """Unit-variance Gaussian noise restricted to [low, high) Hz, optionally 1/f shaped."""
    spec = np.fft.rfft(rng.standard_normal((n_ch, n)), axis=-1)
    f = np.fft.rfftfreq(n, d=1.0 / fs)
    mask = (f >= low) & (f < high)
    shape = np.where(mask, 1.0, 0.0)
    if pink:
        shape = shape / np.sqrt(np.maximum(f, 1.0))
    x = np.fft.irfft(spec * shape, n, axis=-1)
    return x / x.std(axis=-1, keepdims=True)


def generate_synthetic(spec: SynthSpec) -> list[SynthRecording]:
    """One recording per (subject, session).

    Each class (or the regression target) scales the amplitude of a designated
    frequency band on a subject-specific subset of channels, on top of 1/f
    background activity. Subjects differ by random per-channel gains; additive
    white noise is scaled by ``spec.noise``. With ``spec.distractor > 0`` every
    session also carries a label-independent rhythm in a random band, so a few
    sessions alone can suggest spurious band/label associations.
    """
    rng = np.random.default_rng(spec.seed)
    fs, c = spec.sample_rate, spec.n_channels
    seg_n = spec.segment_seconds * fs
    n = spec.segments_per_session * seg_n
    bands = SEED_BANDS
    out = []
    for subj in range(spec.n_subjects):
        srng = np.random.default_rng(rng.integers(2**63))
        chan_gain = np.exp(spec.subject_jitter * srng.standard_normal(c))
        # half the channels carry the modulated rhythm, weighted per subject
        spatial = np.where(srng.random(c) < 0.5, 1.0, 0.2) * np.exp(spec.subject_jitter * srng.standard_normal(c))
        class_perm = np.arange(spec.n_classes)
        z_prev = srng.normal()
        for sess in range(spec.n_sessions):
            rrng = np.random.default_rng(srng.integers(2**63))
            background = _shaped_noise(rrng, c, n, fs, 0.5, 70.0, pink=True)
            x = background * chan_gain[:, None]
            if spec.task == "classification":
                label = int(class_perm[sess % spec.n_classes])
                lo, hi = bands[CLASS_BANDS[label]]
                rhythm = _shaped_noise(rrng, c, n, fs, lo, hi)
                x = x + spec.class_gain * spatial[:, None] * rhythm
                labels = np.full(spec.segments_per_session, label, dtype=np.int64)
            else:
                z = np.empty(spec.segments_per_session)
                for k in range(spec.segments_per_session):
                    z_prev = np.clip(0.9 * z_prev + 0.6 * rrng.normal(), -3.0, 3.0)
                    z[k] = z_prev
                amp = np.repeat(np.exp(z / 2.0), seg_n)
                rhythm = _shaped_noise(rrng, c, n, fs, *TARGET_BAND)
                x = x + spec.class_gain * spatial[:, None] * amp[None, :] * rhythm
                labels = 1.0 / (1.0 + np.exp(-z))
            if spec.distractor > 0:
                lo, hi = bands[rrng.integers(len(bands))]
                mix = rrng.random(c)
                x = x + spec.distractor * spec.class_gain * mix[:, None] * _shaped_noise(rrng, c, n, fs, lo, hi)
            if spec.noise > 0:
                x = x + spec.noise * rrng.standard_normal(x.shape)
            out.append(SynthRecording(RawRecording(x, fs), subj, sess, labels))
    return out


# ------------------------------------------------------------------ feature datasets

@dataclass(frozen=True)
class FeatureSpec:
    bands: tuple = SEED_BANDS
    segment_seconds: int = 8
    target_rate: float = 200.0
    bandpass: tuple = (0.5, 70.0)
    notch: float | None = 50.0
    de_method: str = "time"


def featurize(rec: RawRecording, fspec: FeatureSpec) -> np.ndarray:
    clean = preprocess(rec, fspec.target_rate, tuple(fspec.bandpass), fspec.notch)
    return extract_features(clean, fspec.segment_seconds, fspec.bands, fspec.de_method)


def dataset_from_synthetic(recs: list[SynthRecording], fspec: FeatureSpec, task: str,
                           n_classes: int = 0) -> Dataset:
    feats, labels, subj, sess = [], [], [], []
    for r in recs:
        x = featurize(r.recording, fspec)
        if len(x) != len(r.labels):
            raise InputError(f"subject {r.subject} session {r.session}: {len(x)} segments "
                             f"but {len(r.labels)} labels")
        feats.append(x)
        labels.append(r.labels)
        subj.append(np.full(len(x), r.subject))
        sess.append(np.full(len(x), r.session))
    return Dataset(np.concatenate(feats), np.concatenate(labels), np.concatenate(subj),
                   np.concatenate(sess), task, n_classes)


def synthetic_dataset(spec: SynthSpec, fspec: FeatureSpec | None = None) -> Dataset:
    fspec = fspec or FeatureSpec(bands=spec.bands, segment_seconds=spec.segment_seconds,
                                 target_rate=float(spec.sample_rate))
    n_classes = spec.n_classes if spec.task == "classification" else 0
    return dataset_from_synthetic(generate_synthetic(spec), fspec, spec.task, n_classes)


INDEX_NAME = "dataset.json"


def save_dataset(ds: Dataset, directory) -> list[Path]:
    """One FTZ file per (subject, session) plus a provenance index."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    kind = "class" if ds.task == "classification" else "scalar"
    entries, paths = [], []
    for s in np.unique(ds.subjects):
        for r in np.unique(ds.sessions[ds.subjects == s]):
            idx = np.flatnonzero((ds.subjects == s) & (ds.sessions == r))
            name = f"s{s:03d}_r{r:03d}.ftz"
            write_ftz(directory / name, FeatureFile(ds.features[idx], ds.labels[idx], kind))
            entries.append({"file": name, "subject": int(s), "session": int(r)})
            paths.append(directory / name)
    index = {"task": ds.task, "n_classes": ds.n_classes, "files": entries}
    (directory / INDEX_NAME).write_text(json.dumps(index, indent=1))
    return paths


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    path = directory / INDEX_NAME
    if not path.exists():
        raise InputError(f"{directory}: no {INDEX_NAME} index found")
    index = json.loads(path.read_text())
    feats, labels, subj, sess = [], [], [], []
    for e in index["files"]:
        ff = read_ftz(directory / e["file"])
        feats.append(ff.features.astype(np.float64))
        labels.append(ff.labels)
        subj.append(np.full(len(ff.labels), e["subject"]))
        sess.append(np.full(len(ff.labels), e["session"]))
    if not feats:
        raise InputError(f"{directory}: dataset index lists no files")
    return Dataset(np.concatenate(feats), np.concatenate(labels), np.concatenate(subj),
                   np.concatenate(sess), index["task"], index.get("n_classes", 0))

