"""Hardness scoring of an outlier pool and quantile/stride selection from it."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as model_mod
from .autodiff import softmax
from .errors import BoundsError, FormatError, ParameterError, PreconditionError

SIDECAR_FORMAT = "oetrade.scored_pool"
SIDECAR_VERSION = 1

Q_GRID = tuple(round(0.05 * i, 2) for i in range(19))
STEP_GRID = (1, 2)


def hardness(probs) -> np.ndarray | float:
    """Maximum class probability; accepts one distribution or a batch of rows."""
    probs = np.asarray(probs, dtype=np.float64)
    h = probs.max(axis=-1)
    return float(h) if h.ndim == 0 else h


@dataclass
class ScoredPool:
    samples: np.ndarray
    hardness: np.ndarray
    sorted_index: np.ndarray
    pool_id: str = ""
    teacher_hash: str = ""

    def __len__(self) -> int:
        return len(self.hardness)


@dataclass(frozen=True)
class SamplePlan:
    q: float
    step: int
    m: int

    def __post_init__(self):
        if not 0.0 <= self.q < 1.0:
            raise ParameterError(f"q must lie in [0, 1), got {self.q}")
        if self.step < 1:
            raise ParameterError(f"step must be a positive integer, got {self.step}")
        if self.m < 1:
            raise ParameterError(f"m must be positive, got {self.m}")

    def start(self, pool_size: int) -> int:
        # q*M is floored; the small slack keeps e.g. 0.7*10 from landing on 6
        return int(math.floor(self.q * pool_size + 1e-9))

    def fits(self, pool_size: int) -> bool:
        return self.start(pool_size) + self.m * self.step <= pool_size

    def positions(self, pool_size: int) -> np.ndarray:
        if not self.fits(pool_size):
            raise BoundsError(
                f"plan q={self.q}, step={self.step}, m={self.m} does not fit a pool of M={pool_size}"
            )
        start = self.start(pool_size)
        return start + self.step * np.arange(self.m)


def score_pool(teacher: model_mod.ModelParams, pool, pool_id: str = "") -> ScoredPool:
    """Inference-only hardness for every pool sample plus a stable ascending order."""
    samples = np.asarray(pool, dtype=np.float64)
    if len(samples) == 0:
        raise PreconditionError("outlier pool is empty")
    logits = model_mod.predict_logits(teacher, samples)
    h = hardness(softmax(logits).data)
    order = np.argsort(h, kind="stable")
    return ScoredPool(samples, np.asarray(h), order, pool_id=pool_id, teacher_hash=teacher.checksum())


def select(pool: ScoredPool, plan: SamplePlan) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(samples, pool_indices)`` at sorted positions ``start, start+step, ...``.

    Exactly ``plan.m`` samples are returned; the end of the slice is
    ``start + m*step`` so the stride never shrinks the output.
    """
    idx = pool.sorted_index[plan.positions(len(pool))]
    return pool.samples[idx], idx


def random_subset(pool_size: int, m: int, seed: int) -> np.ndarray:
    """Uniform subset without replacement, used when hardness sampling is off."""
    if m > pool_size:
        raise BoundsError(f"cannot draw m={m} from a pool of M={pool_size}")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(pool_size, size=m, replace=False))


def save_scored_pool(pool: ScoredPool, path) -> None:
    """Sidecar so that a (q, step) sweep reuses one scoring pass."""
    doc = {
        "format": SIDECAR_FORMAT,
        "version": SIDECAR_VERSION,
        "pool_id": pool.pool_id,
        "teacher_hash": pool.teacher_hash,
        "hardness": pool.hardness.tolist(),
        "sorted_index": pool.sorted_index.tolist(),
    }
    Path(path).write_text(json.dumps(doc))


def load_scored_pool(path, samples) -> ScoredPool:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != SIDECAR_FORMAT or doc.get("version") != SIDECAR_VERSION:
        raise FormatError(f"{path}: not a scored-pool sidecar of version {SIDECAR_VERSION}")
    samples = np.asarray(samples, dtype=np.float64)
    h = np.asarray(doc["hardness"], dtype=np.float64)
    if len(h) != len(samples):
        raise FormatError(f"{path}: sidecar covers {len(h)} samples, pool has {len(samples)}")
    return ScoredPool(
        samples, h, np.asarray(doc["sorted_index"], dtype=np.int64), doc["pool_id"], doc["teacher_hash"]
    )
