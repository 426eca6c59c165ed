"""Bias-adaptive preference distillation for rating prediction under selection bias."""

__version__ = "0.1.0"
