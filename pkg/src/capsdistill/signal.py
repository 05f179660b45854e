"""Preprocessing and spectral features (log-PSD and differential entropy).

Feature layout produced by :func:`build_feature_tensor` for one window::

    [PSD block | DE block], each block channel-major, band-minor:
    index(family, ch, band) = family * (C * B) + ch * B + band

This ordering is part of the on-disk contract and must not change.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy import signal as ss

from .errors import ConfigError, InputError

log = logging.getLogger(__name__)

POWER_FLOOR = 1e-12
VARIANCE_FLOOR = 1e-12

SEED_BANDS: tuple[tuple[float, float], ...] = (
    (0.5, 4.0), (4.0, 8.0), (8.0, 13.0), (13.0, 30.0), (30.0, 50.0))
# 25 bands of 2 Hz from 0.5 to 50.5 Hz
SEED_VIG_BANDS: tuple[tuple[float, float], ...] = tuple(
    (0.5 + 2.0 * k, 2.5 + 2.0 * k) for k in range(25))


@dataclass(frozen=True)
class RawRecording:
    samples: np.ndarray  # (channels, time)
    sample_rate: float

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise InputError(f"recording must be channels x time, got shape {x.shape}")
        if not self.sample_rate > 0:
            raise InputError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(x)):
            bad = np.argwhere(~np.isfinite(x))[0]
            raise InputError(f"non-finite sample at channel {bad[0]}, index {bad[1]}")
        object.__setattr__(self, "samples", x)

    @property
    def channel_count(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return self.samples.shape[1] / self.sample_rate


def validate_bands(bands: Sequence[Sequence[float]], sample_rate: float) -> tuple[tuple[float, float], ...]:
    if len(bands) == 0:
        raise ConfigError("band list is empty")
    out = []
    for low, high in bands:
        if not (0 <= low < high <= sample_rate / 2):
            raise ConfigError(f"band ({low}, {high}) Hz invalid for sample rate {sample_rate} Hz")
        out.append((float(low), float(high)))
    return tuple(out)


def feature_count(n_channels: int, n_bands: int) -> int:
    return n_bands * 2 * n_channels


# ------------------------------------------------------------------ filtering

def _filtfilt_kwargs(n: int, fs: float) -> dict:
    # even extension avoids the DC step odd extension creates at a non-zero endpoint
    return {"padtype": "even", "padlen": int(min(fs, n - 1))}


def bandpass(x: np.ndarray, fs: float, low: float, high: float, order: int = 4) -> np.ndarray:
    """Zero-phase Butterworth band-pass; degrades to low/high-pass at the edges."""
    nyq = fs / 2
    if low <= 0 and high >= nyq:
        return x.copy()
    if low <= 0:
        sos = ss.butter(order, high, btype="lowpass", fs=fs, output="sos")
    elif high >= nyq:
        sos = ss.butter(order, low, btype="highpass", fs=fs, output="sos")
    else:
        sos = ss.butter(order, [low, high], btype="bandpass", fs=fs, output="sos")
    return ss.sosfiltfilt(sos, x, axis=-1, **_filtfilt_kwargs(x.shape[-1], fs))


def band_limit(x: np.ndarray, fs: float, low: float, high: float) -> np.ndarray:
    """Zero-phase brick-wall filter keeping FFT bins in [low, high) over the whole signal."""
    n = x.shape[-1]
    spec = np.fft.rfft(x, axis=-1)
    f = np.fft.rfftfreq(n, d=1.0 / fs)
    spec[..., (f < low) | (f >= high)] = 0.0
    return np.fft.irfft(spec, n, axis=-1)


def notch(x: np.ndarray, fs: float, freq: float, q: float = 30.0) -> np.ndarray:
    b, a = ss.iirnotch(freq, q, fs=fs)
    return ss.filtfilt(b, a, x, axis=-1, **_filtfilt_kwargs(x.shape[-1], fs))


def minmax_scale(x: np.ndarray) -> np.ndarray:
    """Per-channel min-max scaling into [-1, 1]; constant channels map to 0."""
    lo = x.min(axis=-1, keepdims=True)
    hi = x.max(axis=-1, keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, 2.0 * (x - lo) / safe - 1.0, 0.0)


def preprocess(rec: RawRecording, target_rate: float = 200.0,
               band: tuple[float, float] = (0.5, 70.0), notch_freq: float | None = 50.0,
               normalize: bool = True) -> RawRecording:
    """Resample, band-pass, notch, then scale each channel into [-1, 1]."""
    if target_rate > rec.sample_rate:
        raise ConfigError(f"target rate {target_rate} Hz exceeds source rate {rec.sample_rate} Hz")
    nyq = target_rate / 2
    if not (0 <= band[0] < band[1] < nyq):
        raise ConfigError(f"band-pass {band} Hz outside Nyquist range of {target_rate} Hz")
    if notch_freq is not None and not (0 < notch_freq < nyq):
        raise ConfigError(f"notch {notch_freq} Hz outside Nyquist range of {target_rate} Hz")
    x = rec.samples
    if target_rate != rec.sample_rate:
        ratio = Fraction(target_rate / rec.sample_rate).limit_denominator(10000)
        x = ss.resample_poly(x, ratio.numerator, ratio.denominator, axis=-1)
    x = bandpass(x, target_rate, *band)
    if notch_freq is not None:
        x = notch(x, target_rate, notch_freq)
    if normalize:
        x = minmax_scale(x)
    return RawRecording(x, target_rate)


# ------------------------------------------------------------------ windowing

def _windows(rec: RawRecording, seconds: int) -> tuple[np.ndarray, int]:
    """Split into S segments of ``seconds`` one-second windows: (S, L, C, r)."""
    r = int(round(rec.sample_rate))
    if abs(r - rec.sample_rate) > 1e-9:
        raise ConfigError("one-second windows need an integer sample rate")
    if seconds < 1:
        raise ConfigError(f"segment length must be >= 1 s, got {seconds}")
    n_win = rec.samples.shape[1] // r
    n_seg = n_win // seconds
    if n_seg == 0:
        raise InputError(f"recording of {rec.duration:.2f} s shorter than one {seconds}-s segment")
    x = rec.samples[:, :n_seg * seconds * r]
    x = x.reshape(rec.channel_count, n_seg, seconds, r)
    return np.transpose(x, (1, 2, 0, 3)), r


def _band_bins(freqs: np.ndarray, bands) -> list[np.ndarray]:
    masks = []
    for low, high in bands:
        m = (freqs >= low) & (freqs < high)
        if not m.any():
            raise ConfigError(f"band [{low}, {high}) Hz contains no FFT bins at "
                              f"{freqs[1] - freqs[0]:.3g} Hz resolution")
        masks.append(m)
    return masks


def hann(n: int) -> np.ndarray:
    return ss.windows.hann(n, sym=False)


def periodogram(windows: np.ndarray, fs: int) -> tuple[np.ndarray, np.ndarray]:
    """Hann-windowed one-sided power spectral density along the last axis."""
    w = hann(windows.shape[-1])
    spec = np.fft.rfft(windows * w, axis=-1)
    psd = (np.abs(spec) ** 2) / (fs * np.sum(w * w))
    psd[..., 1:] *= 2.0
    if windows.shape[-1] % 2 == 0:
        psd[..., -1] /= 2.0
    return np.fft.rfftfreq(windows.shape[-1], d=1.0 / fs), psd


def band_powers(rec: RawRecording, seconds: int, bands) -> np.ndarray:
    """Mean periodogram power per band: (S, L, B, C)."""
    bands = validate_bands(bands, rec.sample_rate)
    win, r = _windows(rec, seconds)
    freqs, psd = periodogram(win, r)
    masks = _band_bins(freqs, bands)
    return np.stack([psd[..., m].mean(axis=-1) for m in masks], axis=2)


def extract_log_psd(rec: RawRecording, seconds: int, bands) -> np.ndarray:
    """Natural-log band power per (segment, window, band, channel)."""
    return np.log(np.maximum(band_powers(rec, seconds, bands), POWER_FLOOR))


def extract_de(rec: RawRecording, seconds: int, bands, method: str = "time",
               return_floored: bool = False):
    """Differential entropy 0.5 * ln(2 pi e var) per (segment, window, band, channel).

    ``method="time"`` band-limits the whole recording with :func:`band_limit` and
    takes the variance inside each window; ``method="spectral"`` integrates the periodogram over the band instead.
    """
    bands = validate_bands(bands, rec.sample_rate)
    if method == "time":
        var = []
        for low, high in bands:
            filtered = RawRecording(band_limit(rec.samples, rec.sample_rate, low, high), rec.sample_rate)
            win, _ = _windows(filtered, seconds)
            var.append(win.var(axis=-1))
        var = np.stack(var, axis=2)
    elif method == "spectral":
        win, r = _windows(rec, seconds)
        freqs, psd = periodogram(win, r)
        # psd is already normalised by sum(w^2), so sum(psd * df) is a variance
        df = freqs[1] - freqs[0]
        var = np.stack([psd[..., m].sum(axis=-1) * df for m in _band_bins(freqs, bands)], axis=2)
    else:
        raise ConfigError(f"unknown DE variance method '{method}'")
    floored = var < VARIANCE_FLOOR
    if floored.any():
        log.warning("DE: %d window/band/channel variances floored at %g", int(floored.sum()), VARIANCE_FLOOR)
    de = 0.5 * np.log(2.0 * np.pi * np.e * np.maximum(var, VARIANCE_FLOOR))
    return (de, floored) if return_floored else de


def build_feature_tensor(psd: np.ndarray, de: np.ndarray) -> np.ndarray:
    """Concatenate (S, L, B, C) PSD and DE arrays into (S, L, 2*B*C) features."""
    if psd.shape != de.shape or psd.ndim != 4:
        raise ConfigError(f"PSD shape {psd.shape} and DE shape {de.shape} must match (S, L, B, C)")
    s, l, b, c = psd.shape
    # (S, L, B, C) -> (S, L, C, B) so channel is the slow axis
    blocks = [np.transpose(a, (0, 1, 3, 2)).reshape(s, l, c * b) for a in (psd, de)]
    out = np.concatenate(blocks, axis=-1)
    if not np.all(np.isfinite(out)):
        raise InputError("feature tensor contains non-finite values")
    return out


def extract_features(rec: RawRecording, seconds: int, bands, de_method: str = "time") -> np.ndarray:
    return build_feature_tensor(extract_log_psd(rec, seconds, bands),
                                extract_de(rec, seconds, bands, method=de_method))
