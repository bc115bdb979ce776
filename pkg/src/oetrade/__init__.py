"""Outlier-exposure fine-tuning with self-distillation, semi-hard outlier sampling
and outlier-aware supervised contrastive learning, on synthetic data."""

__version__ = "0.1.0"
