"""Encoder / linear classifier / projection head network.

The classifier logits are ``w(g(x))`` and the contrastive embedding is the
unit-normalized ``h(g(x))``. Weight matrices are stored ``(out, in)``.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import FormatError, ParameterError, ShapeError

CHECKPOINT_FORMAT = "oetrade.checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Dims:
    input: int  # D
    feature: int  # L
    embedding: int  # N
    classes: int  # K

    def validate(self) -> None:
        for name in ("input", "feature", "embedding", "classes"):
            if getattr(self, name) < 1:
                raise ParameterError(f"dimension {name} must be >= 1")


@dataclass
class Linear:
    weight: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, ad.transpose(self.weight)) + self.bias


@dataclass
class ModelParams:
    dims: Dims
    hidden: tuple[int, ...]
    encoder: list[Linear]
    classifier: Linear
    projector: Linear
    seed: int | None = None
    lineage: list[str] = field(default_factory=list)

    def layers(self) -> list[Linear]:
        return [*self.encoder, self.classifier, self.projector]

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers():
            out.extend([layer.weight, layer.bias])
        return out

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def copy(self) -> ModelParams:
        return copy.deepcopy(self)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


@dataclass
class ForwardOutput:
    feature: Tensor
    logits: Tensor
    probs: Tensor
    embedding: Tensor | None


def _linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> Linear:
    std = np.sqrt(2.0 / fan_in)
    return Linear(
        Tensor(rng.normal(0.0, std, size=(fan_out, fan_in)), requires_grad=True),
        Tensor(np.zeros(fan_out), requires_grad=True),
    )


def init(dims: Dims, hidden_sizes=(64,), seed: int = 0) -> ModelParams:
    """He-style initialization (zero-mean normal, variance 2/fan_in), zero biases."""
    dims.validate()
    hidden = tuple(int(h) for h in hidden_sizes)
    if any(h < 1 for h in hidden):
        raise ParameterError(f"hidden layer sizes must be >= 1, got {hidden}")
    rng = np.random.default_rng(seed)
    widths = [dims.input, *hidden, dims.feature]
    encoder = [_linear(rng, a, b) for a, b in zip(widths[:-1], widths[1:])]
    classifier = _linear(rng, dims.feature, dims.classes)
    projector = _linear(rng, dims.feature, dims.embedding)
    return ModelParams(dims, hidden, encoder, classifier, projector, seed=seed, lineage=[f"init:{seed}"])


def encode(params: ModelParams, x) -> Tensor:
    h = ad.as_tensor(x)
    if h.ndim != 2 or h.shape[1] != params.dims.input:
        raise ShapeError(f"expected input of shape (B, {params.dims.input}), got {h.shape}")
    last = len(params.encoder) - 1
    for i, layer in enumerate(params.encoder):
        h = layer(h)
        if i < last:
            h = ad.relu(h)
    return h


def forward(params: ModelParams, x, embed: bool = True) -> ForwardOutput:
    """Batched forward pass; ``embed=False`` skips the projection head."""
    feature = encode(params, x)
    logits = params.classifier(feature)
    return ForwardOutput(
        feature=feature,
        logits=logits,
        probs=ad.softmax(logits),
        embedding=ad.l2_normalize(params.projector(feature)) if embed else None,
    )


def predict_logits(params: ModelParams, x, batch_size: int = 4096) -> np.ndarray:
    """Inference-only logits as a plain array."""
    x = np.asarray(x, dtype=np.float64)
    chunks = []
    with ad.no_grad():
        for start in range(0, len(x), batch_size):
            feat = encode(params, x[start : start + batch_size])
            chunks.append(params.classifier(feat).data)
    if not chunks:
        return np.zeros((0, params.dims.classes))
    return np.concatenate(chunks)


# ---------------------------------------------------------------------------
# checkpoints


def to_dict(params: ModelParams) -> dict:
    d = params.dims
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dims": {"D": d.input, "L": d.feature, "N": d.embedding, "K": d.classes},
        "hidden": list(params.hidden),
        "seed": params.seed,
        "lineage": list(params.lineage),
        "parameters": [
            {"shape": list(p.shape), "values": p.data.reshape(-1).tolist()} for p in params.parameters()
        ],
    }


def from_dict(doc: dict) -> ModelParams:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise FormatError("not a checkpoint document")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {doc.get('version')}")
    d = doc["dims"]
    params = init(Dims(d["D"], d["L"], d["N"], d["K"]), doc["hidden"], seed=0)
    slots = params.parameters()
    if len(slots) != len(doc["parameters"]):
        raise FormatError("parameter count does not match architecture")
    for slot, entry in zip(slots, doc["parameters"]):
        values = np.asarray(entry["values"], dtype=np.float64)
        if tuple(entry["shape"]) != slot.shape or values.size != slot.data.size:
            raise FormatError(f"parameter shape mismatch: {entry['shape']} vs {list(slot.shape)}")
        slot.data = values.reshape(slot.shape)
    params.seed = doc.get("seed")
    params.lineage = list(doc.get("lineage", []))
    return params


def save(params: ModelParams, path) -> None:
    Path(path).write_text(json.dumps(to_dict(params)))


def load(path) -> ModelParams:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return from_dict(doc)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
