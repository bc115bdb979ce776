"""n-fold batch augmentation feeding the contrastive path."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ParameterError, PreconditionError

N_GRID = (2, 4, 6, 8)


@dataclass(frozen=True)
class TransformSpec:
    n: int = 8
    noise_sigma: float = 0.05
    jitter_scale: float = 0.05
    seed: int = 0
    max_batch: int = 8192

    def __post_init__(self):
        if self.n < 1:
            raise ParameterError(f"n must be >= 1, got {self.n}")
        if self.noise_sigma < 0 or self.jitter_scale < 0:
            raise ParameterError("augmentation magnitudes must be nonnegative")


def augment_once(x: np.ndarray, spec: TransformSpec, rng: np.random.Generator) -> np.ndarray:
    """One draw t ~ T: per-sample multiplicative jitter then additive Gaussian noise."""
    scale = 1.0 + spec.jitter_scale * rng.standard_normal((len(x), 1))
    return x * scale + spec.noise_sigma * rng.standard_normal(x.shape)


def multi_batch_transform(
    x,
    labels=None,
    spec: TransformSpec = TransformSpec(),
    rng: np.random.Generator | None = None,
    flags=None,
):
    """Concatenate ``spec.n`` independent augmentations of ``x``.

    Row ``k*B + i`` of the output is ``t_k(x[i])``. ``labels`` and ``flags``
    (e.g. an outlier indicator) are tiled the same way. Returns
    ``(x_multi, labels_multi, flags_multi)``; absent inputs stay ``None``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise PreconditionError("multi_batch_transform needs a nonempty (B, D) batch")
    if spec.n * len(x) > spec.max_batch:
        raise CapacityError(f"n*B = {spec.n * len(x)} exceeds the contrastive batch limit {spec.max_batch}")
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    if spec.noise_sigma == 0 and spec.jitter_scale == 0:
        out = np.tile(x, (spec.n, 1))
    else:
        out = np.concatenate([augment_once(x, spec, rng) for _ in range(spec.n)])
    tiled_labels = None if labels is None else np.tile(np.asarray(labels), spec.n)
    tiled_flags = None if flags is None else np.tile(np.asarray(flags), spec.n)
    return out, tiled_labels, tiled_flags
