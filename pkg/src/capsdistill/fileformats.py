"""Raw recording and feature file formats.

Raw binary (little-endian, 16-byte header)::

    b"RAWE" u16 version u16 channels f32 sample_rate u32 samples_per_channel
    f32 data, channel-major (all of channel 0, then channel 1, ...)

FTZ feature file (little-endian, 20-byte header)::

    b"FTZ\\0" u16 version u8 label_kind (0 = class, 1 = scalar) u8 reserved
    u32 L  u32 F  u32 segment_count
    per segment: f32[L*F] row-major, then label (i32 class or f32 scalar)
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError
from .signal import RawRecording

RAW_MAGIC = b"RAWE"
RAW_VERSION = 1
FTZ_MAGIC = b"FTZ\x00"
FTZ_VERSION = 1
LABEL_KINDS = ("class", "scalar")


def write_raw(path, rec: RawRecording) -> None:
    c, n = rec.samples.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sHHfI", RAW_MAGIC, RAW_VERSION, c, rec.sample_rate, n))
        fh.write(rec.samples.astype("<f4").tobytes())


def read_raw(path) -> RawRecording:
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:4] != RAW_MAGIC:
        raise InputError(f"{path}: not a raw recording (bad magic)")
    _, version, c, rate, n = struct.unpack_from("<4sHHfI", buf, 0)
    if version != RAW_VERSION:
        raise InputError(f"{path}: unsupported raw version {version}")
    if len(buf) != 16 + 4 * c * n:
        raise InputError(f"{path}: expected {c}x{n} samples, file size {len(buf)} does not match")
    data = np.frombuffer(buf, dtype="<f4", offset=16).reshape(c, n)
    return RawRecording(data.astype(np.float64), float(rate))


def read_csv(path, sample_rate: float) -> tuple[RawRecording, list[str]]:
    """One row per sample, one column per channel, header row of channel names."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty CSV") from None
        try:
            rows = [[float(v) for v in row] for row in reader if row]
        except ValueError as exc:
            raise InputError(f"{path}: non-numeric sample ({exc})") from None
    if not rows or any(len(r) != len(header) for r in rows):
        raise InputError(f"{path}: ragged or empty sample rows")
    return RawRecording(np.array(rows).T, sample_rate), header


def write_csv(path, rec: RawRecording, names: list[str] | None = None) -> None:
    names = names or [f"ch{k}" for k in range(rec.channel_count)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        w.writerows(rec.samples.T.tolist())


@dataclass
class FeatureFile:
    features: np.ndarray  # (S, L, F) float32
    labels: np.ndarray  # (S,) int32 or float32
    label_kind: str

    def __post_init__(self):
        if self.label_kind not in LABEL_KINDS:
            raise ValueError(f"label kind must be one of {LABEL_KINDS}, got {self.label_kind!r}")
        self.features = np.asarray(self.features, dtype=np.float32)
        dtype = np.int32 if self.label_kind == "class" else np.float32
        self.labels = np.asarray(self.labels, dtype=dtype)
        if self.features.ndim != 3 or self.labels.shape != (self.features.shape[0],):
            raise ValueError(f"features {self.features.shape} and labels {self.labels.shape} disagree")


def write_ftz(path, ff: FeatureFile) -> None:
    s, l, f = ff.features.shape
    label_fmt = "<i4" if ff.label_kind == "class" else "<f4"
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sHBBIII", FTZ_MAGIC, FTZ_VERSION,
                             LABEL_KINDS.index(ff.label_kind), 0, l, f, s))
        feats = ff.features.astype("<f4")
        labels = ff.labels.astype(label_fmt)
        for k in range(s):
            fh.write(feats[k].tobytes())
            fh.write(labels[k:k + 1].tobytes())


def read_ftz(path) -> FeatureFile:
    buf = Path(path).read_bytes()
    if len(buf) < 20 or buf[:4] != FTZ_MAGIC:
        raise InputError(f"{path}: not an FTZ feature file (bad magic)")
    _, version, kind, _, l, f, s = struct.unpack_from("<4sHBBIII", buf, 0)
    if version != FTZ_VERSION:
        raise InputError(f"{path}: unsupported FTZ version {version}")
    if kind >= len(LABEL_KINDS):
        raise InputError(f"{path}: unknown label kind {kind}")
    rec = np.dtype([("x", "<f4", (l, f)), ("y", "<i4" if kind == 0 else "<f4")])
    if len(buf) != 20 + rec.itemsize * s:
        raise InputError(f"{path}: truncated FTZ file ({len(buf)} bytes for {s} segments)")
    arr = np.frombuffer(buf, dtype=rec, count=s, offset=20)
    return FeatureFile(arr["x"].copy(), arr["y"].copy(), LABEL_KINDS[kind])
