"""OOD scores and the ACC / FPR95 / AUROC / AUPR metric suite.

Scores follow the "higher means more in-distribution" convention throughout.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import FormatError, ParameterError, PreconditionError

METRIC_COLUMNS = ("acc", "fpr95", "auroc", "aupr")


def _lse(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    return (np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)) + m)[..., 0]


def msp_score(logits) -> np.ndarray | float:
    logits = np.asarray(logits, dtype=np.float64)
    s = np.exp(logits.max(axis=-1) - _lse(logits))
    return float(s) if np.ndim(s) == 0 else s


def energy_score(logits) -> np.ndarray | float:
    """Negative free energy, ``log sum_j exp(z_j)``."""
    s = _lse(np.asarray(logits, dtype=np.float64))
    return float(s) if np.ndim(s) == 0 else s


SCORERS = {"msp": msp_score, "energy": energy_score}


def accuracy(predictions, truths) -> float:
    predictions, truths = np.asarray(predictions), np.asarray(truths)
    if len(truths) == 0:
        raise PreconditionError("accuracy of an empty set")
    if predictions.shape != truths.shape:
        raise ParameterError("predictions and truths differ in length")
    return float(np.mean(predictions == truths))


@dataclass
class ScoreSet:
    id_scores: np.ndarray
    ood_scores: np.ndarray

    def __post_init__(self):
        self.id_scores = np.asarray(self.id_scores, dtype=np.float64).reshape(-1)
        self.ood_scores = np.asarray(self.ood_scores, dtype=np.float64).reshape(-1)
        if len(self.id_scores) == 0 or len(self.ood_scores) == 0:
            raise PreconditionError("score sets must be nonempty")
        if not (np.isfinite(self.id_scores).all() and np.isfinite(self.ood_scores).all()):
            raise PreconditionError("scores must be finite")

    def flipped(self) -> ScoreSet:
        """OOD treated as the positive class."""
        return ScoreSet(-self.ood_scores, -self.id_scores)


def auroc(scores: ScoreSet) -> float:
    """P(id score > ood score) with ties counted one half (Mann-Whitney U / (n_id n_ood))."""
    n_id, n_ood = len(scores.id_scores), len(scores.ood_scores)
    ranks = rankdata(np.concatenate([scores.id_scores, scores.ood_scores]))
    u = ranks[:n_id].sum() - n_id * (n_id + 1) / 2.0
    return float(u / (n_id * n_ood))


def fpr_at_tpr(scores: ScoreSet, tpr_target: float = 0.95) -> float:
    """Fraction of OOD scores at or above the ceil(target * N_id)-th largest ID score."""
    if not 0 < tpr_target <= 1:
        raise ParameterError(f"tpr_target must be in (0, 1], got {tpr_target}")
    n_id = len(scores.id_scores)
    k = max(1, math.ceil(tpr_target * n_id - 1e-9))
    threshold = np.sort(scores.id_scores)[::-1][k - 1]
    return float(np.mean(scores.ood_scores >= threshold))


def aupr(scores: ScoreSet, positive: str = "id") -> float:
    """Average precision; equal scores are consumed as a single threshold."""
    if positive == "ood":
        scores = scores.flipped()
    elif positive != "id":
        raise ParameterError(f"positive must be 'id' or 'ood', got {positive!r}")
    s = np.concatenate([scores.id_scores, scores.ood_scores])
    is_pos = np.concatenate([np.ones(len(scores.id_scores)), np.zeros(len(scores.ood_scores))])
    order = np.argsort(-s, kind="stable")
    s, is_pos = s[order], is_pos[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(is_pos)[last_of_group]
    fp = (last_of_group + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / len(scores.id_scores)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def roc_points(scores: ScoreSet) -> np.ndarray:
    """(threshold, fpr, tpr) rows, one per distinct score, descending threshold."""
    thresholds = np.unique(np.concatenate([scores.id_scores, scores.ood_scores]))[::-1]
    tpr = np.array([(scores.id_scores >= t).mean() for t in thresholds])
    fpr = np.array([(scores.ood_scores >= t).mean() for t in thresholds])
    return np.column_stack([thresholds, fpr, tpr])


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    acc: float
    per_set: dict[str, dict[str, float]]
    seed: int | None = None
    score: str = "msp"
    average: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.average and self.per_set:
            self.average = {
                k: float(np.mean([m[k] for m in self.per_set.values()])) for k in ("fpr95", "auroc", "aupr")
            }

    def row(self) -> dict[str, float]:
        return {"acc": self.acc, **self.average}

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "score": self.score,
            "acc": self.acc,
            "average": self.average,
            "per_set": self.per_set,
        }

    @classmethod
    def from_dict(cls, d: dict) -> MetricsReport:
        return cls(acc=d["acc"], per_set=d["per_set"], seed=d.get("seed"), score=d.get("score", "msp"),
                   average=d.get("average", {}))


def ood_metrics(scores: ScoreSet, aupr_positive: str = "id") -> dict[str, float]:
    return {
        "fpr95": fpr_at_tpr(scores, 0.95),
        "auroc": auroc(scores),
        "aupr": aupr(scores, aupr_positive),
    }


def aggregate(rows: list[dict[str, float]]) -> tuple[dict[str, float], dict[str, float]]:
    """Mean and sample standard deviation per metric (std is 0 for one row)."""
    if not rows:
        raise PreconditionError("nothing to aggregate")
    keys = rows[0].keys()
    arr = {k: np.array([r[k] for r in rows], dtype=np.float64) for k in keys}
    mean = {k: float(v.mean()) for k, v in arr.items()}
    std = {k: float(v.std(ddof=1)) if len(v) > 1 else 0.0 for k, v in arr.items()}
    return mean, std


# ---------------------------------------------------------------------------
# score files


def write_score_csv(path, scores: ScoreSet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "score", "is_id"])
        i = 0
        for s in scores.id_scores:
            w.writerow([i, repr(float(s)), 1])
            i += 1
        for s in scores.ood_scores:
            w.writerow([i, repr(float(s)), 0])
            i += 1


def read_score_csv(path) -> ScoreSet:
    id_s, ood_s = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"sample_id", "score", "is_id"} <= set(reader.fieldnames):
            raise FormatError(f"{path}: expected columns sample_id, score, is_id")
        for row in reader:
            flag = row["is_id"].strip()
            if flag not in ("0", "1"):
                raise FormatError(f"{path}: is_id must be 0 or 1, got {flag!r}")
            (id_s if flag == "1" else ood_s).append(float(row["score"]))
    return ScoreSet(np.array(id_s), np.array(ood_s))


def write_roc_csv(path, scores: ScoreSet) -> None:
    pts = roc_points(scores)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, r in pts:
            w.writerow([repr(float(t)), repr(float(f)), repr(float(r))])

