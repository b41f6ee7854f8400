"""Deterministic few-shot class-incremental learning for 3D point clouds.

Frozen toy encoders, a trainable depth merger and point adapter, principal-basis
redundant feature elimination, the FSCIL3D-XL schedule generator and the
session metrics (MAcc, NCAcc, dropping rate, F-score).
"""

__version__ = "0.1.0"
