"""Capsule-based knowledge distillation for multichannel EEG features."""

__version__ = "0.1.0"
