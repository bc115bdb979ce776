"""Synthetic Gaussian-mixture stand-ins for the ID, auxiliary-outlier and OOD test sets."""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ParameterError

KINDS = ("id_train", "id_test", "outlier_pool", "ood_test")
OOD_SHAPES = ("uniform_far", "annulus", "center", "between", "clusters", "box")

MAGIC = b"OETD"
FORMAT_VERSION = 1
CSV_TAG = "oetrade-dataset"


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    classes: int = 10
    dim: int = 2
    n_max: int = 500  # per-class count of the head class (ID kinds)
    size: int = 5000  # total count (unlabeled kinds)
    imbalance_ratio: float = 1.0
    class_radius: float = 4.0
    class_sigma: float = 0.6
    # outlier_pool geometry
    box_half_width: float = 12.0
    box_fraction: float = 0.5
    ring_radii: tuple[float, ...] = (0.4, 1.5, 2.5)  # multiples of class_radius
    ring_sigma: float = 0.3
    exclusion: float = 2.5  # box samples closer than this many class_sigma to a class mean are redrawn
    # observation map: Gaussian-bump features of the latent point (0 = raw coordinates)
    lift: int = 49
    lift_width: float = 0.375  # bump width as a multiple of class_radius
    lift_extent: float = 1.5  # anchors cover [-extent*R, extent*R] on each axis
    # ood_test geometry
    shape: str = "uniform_far"
    radius: float = 2.0  # multiple of class_radius
    spread: float = 0.5
    n_clusters: int = 4
    seed: int = 0
    name: str = ""

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ParameterError(f"unknown dataset kind {self.kind!r}")
        if self.classes < 1 or self.dim < 1:
            raise ParameterError("classes and dim must be >= 1")
        if not 0 < self.imbalance_ratio <= 1:
            raise ParameterError(f"imbalance_ratio must lie in (0, 1], got {self.imbalance_ratio}")
        if self.exclusion < 0:
            raise ParameterError("exclusion must be >= 0")
        if self.lift < 0 or (self.lift and not (self.lift_width > 0 and self.lift_extent > 0)):
            raise ParameterError("lift must be >= 0 with positive lift_width and lift_extent")
        if self.kind == "ood_test" and self.shape not in OOD_SHAPES:
            raise ParameterError(f"unknown ood shape {self.shape!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ring_radii"] = list(self.ring_radii)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DatasetSpec:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown dataset spec keys: {sorted(unknown)}")
        d = dict(d)
        if "ring_radii" in d:
            d["ring_radii"] = tuple(float(r) for r in d["ring_radii"])
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @property
    def input_dim(self) -> int:
        """Width of the observed input vectors."""
        return self.lift or self.dim

    def observation(self) -> tuple:
        """Everything that fixes the observation map; splits of one task must agree on it."""
        return (self.dim, self.class_radius, self.lift, self.lift_width, self.lift_extent)


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray | None
    kind: str
    classes: int
    seed: int
    provenance: str
    name: str = ""
    spec: dict | None = field(default=None, compare=False)
    latent: np.ndarray | None = field(default=None, compare=False, repr=False)  # pre-observation coordinates

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None and other.labels is not None and np.array_equal(self.labels, other.labels)
        )
        return (
            same_labels
            and self.kind == other.kind
            and self.classes == other.classes
            and self.seed == other.seed
            and self.provenance == other.provenance
            and self.inputs.shape == other.inputs.shape
            and np.array_equal(self.inputs, other.inputs)
        )


# ---------------------------------------------------------------------------
# geometry


def class_means(classes: int, dim: int, radius: float) -> np.ndarray:
    """Class centres: evenly spaced on a circle for dim=2, scaled simplex vertices otherwise.

    The result depends only on ``(classes, dim, radius)`` so every split of
    one task shares identical means.
    """
    if dim == 1:
        return np.linspace(-radius, radius, classes).reshape(-1, 1) if classes > 1 else np.zeros((1, 1))
    if dim == 2:
        angles = 2 * np.pi * np.arange(classes) / classes
        return radius * np.column_stack([np.cos(angles), np.sin(angles)])
    if classes <= dim:
        return radius * np.eye(dim)[:classes]
    rng = np.random.default_rng(classes * 1_000_003 + dim)
    v = rng.standard_normal((classes, dim))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def class_counts(classes: int, n_max: int, ratio: float) -> list[int]:
    """Exponential long-tail law ``round(n_max * ratio**(c / (K-1)))``."""
    if classes == 1:
        return [n_max]
    counts = [int(round(n_max * ratio ** (c / (classes - 1)))) for c in range(classes)]
    for c, n in enumerate(counts):
        if n < 1:
            raise ParameterError(f"class {c} rounds to zero samples (n_max={n_max}, ratio={ratio})")
    return counts


def lift_anchors(dim: int, count: int, radius: float, extent: float) -> np.ndarray:
    """Bump centres: a square grid when ``dim == 2`` and ``count`` is a square, else fixed pseudo-random points."""
    half = extent * radius
    side = int(round(count ** 0.5))
    if dim == 2 and side * side == count:
        g = np.linspace(-half, half, side)
        return np.array([(a, b) for a in g for b in g])
    return np.random.default_rng(dim * 7919 + count).uniform(-half, half, size=(count, dim))


def observe(spec: DatasetSpec, z: np.ndarray) -> np.ndarray:
    """Map latent points to model inputs.

    With ``lift > 0`` each input coordinate is a Gaussian bump
    ``exp(-|z - a_j|^2 / (2 w^2))``. Far-away latent points map close to the
    zero vector rather than to ever larger coordinates.
    """
    z = np.asarray(z, dtype=np.float64)
    if not spec.lift:
        return z
    anchors = lift_anchors(spec.dim, spec.lift, spec.class_radius, spec.lift_extent)
    width = spec.lift_width * spec.class_radius
    sq = (z * z).sum(1)[:, None] - 2 * z @ anchors.T + (anchors * anchors).sum(1)[None, :]
    return np.exp(-np.maximum(sq, 0.0) / (2 * width * width))


def _directions(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _shell(rng, n, dim, radius, sigma) -> np.ndarray:
    r = radius + sigma * rng.standard_normal((n, 1))
    return np.abs(r) * _directions(rng, n, dim)


def _uniform_box(rng, n, dim, half_width, min_radius=0.0, avoid=None, avoid_radius=0.0) -> np.ndarray:
    out = np.empty((0, dim))
    while len(out) < n:
        pts = rng.uniform(-half_width, half_width, size=(2 * (n - len(out)) + 8, dim))
        pts = pts[np.linalg.norm(pts, axis=1) >= min_radius]
        if avoid is not None and avoid_radius > 0:
            dist = np.linalg.norm(pts[:, None, :] - avoid[None, :, :], axis=2).min(axis=1)
            pts = pts[dist >= avoid_radius]
        out = np.concatenate([out, pts])
    return out[:n]


def gen_id(spec: DatasetSpec) -> Dataset:
    spec.validate()
    if spec.kind not in ("id_train", "id_test"):
        raise ParameterError(f"gen_id needs an id_* spec, got {spec.kind!r}")
    rng = np.random.default_rng(spec.seed)
    means = class_means(spec.classes, spec.dim, spec.class_radius)
    counts = class_counts(spec.classes, spec.n_max, spec.imbalance_ratio)
    xs, ys = [], []
    for c, n in enumerate(counts):
        xs.append(means[c] + spec.class_sigma * rng.standard_normal((n, spec.dim)))
        ys.append(np.full(n, c, dtype=np.int64))
    z = np.concatenate(xs)
    return Dataset(observe(spec, z), np.concatenate(ys), spec.kind, spec.classes, spec.seed, spec.hash(),
                   spec.name or spec.kind, spec.to_dict(), z)


def gen_outlier_pool(spec: DatasetSpec) -> Dataset:
    """Unlabeled mixture of a uniform box and shells at several radii."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_box = int(round(spec.size * spec.box_fraction))
    n_ring = spec.size - n_box
    means = class_means(spec.classes, spec.dim, spec.class_radius)
    avoid = spec.exclusion * spec.class_sigma
    parts = [_uniform_box(rng, n_box, spec.dim, spec.box_half_width, avoid=means, avoid_radius=avoid)]
    if n_ring and spec.ring_radii:
        per = np.full(len(spec.ring_radii), n_ring // len(spec.ring_radii))
        per[: n_ring % len(spec.ring_radii)] += 1
        for r, n in zip(spec.ring_radii, per):
            parts.append(_shell(rng, int(n), spec.dim, r * spec.class_radius, spec.ring_sigma))
    elif n_ring:
        parts.append(_uniform_box(rng, n_ring, spec.dim, spec.box_half_width, avoid=means, avoid_radius=avoid))
    x = np.concatenate(parts)
    x = x[rng.permutation(len(x))]
    return Dataset(observe(spec, x), None, spec.kind, spec.classes, spec.seed, spec.hash(),
                   spec.name or "outlier_pool", spec.to_dict(), x)


def _ood_points(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    n, dim, R = spec.size, spec.dim, spec.class_radius
    if spec.shape == "uniform_far":
        return _uniform_box(rng, n, dim, spec.radius * R * 2, min_radius=spec.radius * R)
    if spec.shape == "box":
        return _uniform_box(rng, n, dim, spec.radius * R)
    if spec.shape == "annulus":
        return _shell(rng, n, dim, spec.radius * R, spec.spread)
    if spec.shape == "center":
        return spec.spread * rng.standard_normal((n, dim))
    if spec.shape == "between":
        # centres halfway (in angle) between neighbouring classes
        means = class_means(spec.classes, dim, 1.0)
        mids = means + np.roll(means, -1, axis=0)
        mids /= np.maximum(np.linalg.norm(mids, axis=1, keepdims=True), 1e-12)
        which = rng.integers(0, len(mids), size=n)
        return spec.radius * R * mids[which] + spec.spread * rng.standard_normal((n, dim))
    # clusters at random fixed directions
    centres = spec.radius * R * _directions(np.random.default_rng(spec.seed + 7919), spec.n_clusters, dim)
    which = rng.integers(0, spec.n_clusters, size=n)
    return centres[which] + spec.spread * rng.standard_normal((n, dim))


def gen_ood_testsets(specs: list[DatasetSpec]) -> list[Dataset]:
    if not specs:
        raise ParameterError("at least one OOD test spec is required")
    out = []
    for spec in specs:
        spec.validate()
        rng = np.random.default_rng(spec.seed)
        z = _ood_points(spec, rng)
        out.append(Dataset(observe(spec, z), None, spec.kind, spec.classes, spec.seed, spec.hash(),
                           spec.name or spec.shape, spec.to_dict(), z))
    return out


def default_ood_specs(classes: int = 10, dim: int = 2, size: int = 1000, seed: int = 1000,
                      class_radius: float = 4.0) -> list[DatasetSpec]:
    """Six geometrically distinct OOD test sets, from far-field to near-boundary."""
    base = DatasetSpec("ood_test", classes=classes, dim=dim, size=size, class_radius=class_radius)
    return [
        replace(base, name="far_uniform", shape="uniform_far", radius=2.0, seed=seed + 1),
        replace(base, name="outer_annulus", shape="annulus", radius=2.0, spread=0.4, seed=seed + 2),
        replace(base, name="near_annulus", shape="annulus", radius=1.35, spread=0.3, seed=seed + 3),
        replace(base, name="inner_annulus", shape="annulus", radius=0.6, spread=0.3, seed=seed + 4),
        replace(base, name="between", shape="between", radius=1.2, spread=0.4, seed=seed + 5),
        replace(base, name="clusters", shape="clusters", radius=1.4, spread=0.6, n_clusters=5, seed=seed + 6),
    ]


def generate(spec: DatasetSpec) -> Dataset:
    if spec.kind in ("id_train", "id_test"):
        return gen_id(spec)
    if spec.kind == "outlier_pool":
        return gen_outlier_pool(spec)
    return gen_ood_testsets([spec])[0]


# ---------------------------------------------------------------------------
# persistence


def _header(ds: Dataset) -> dict:
    return {
        "kind": ds.kind,
        "K": ds.classes,
        "D": ds.dim,
        "count": len(ds),
        "seed": ds.seed,
        "provenance": ds.provenance,
        "name": ds.name,
        "labeled": ds.labels is not None,
        "spec": ds.spec,
    }


def save_binary(ds: Dataset, path) -> None:
    header = json.dumps(_header(ds), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(ds.inputs, dtype="<f8").tobytes())
        if ds.labels is not None:
            fh.write(np.ascontiguousarray(ds.labels, dtype="<i8").tobytes())


def load_binary(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    if len(raw) < 10:
        raise FormatError(f"{path}: truncated header")
    version, hlen = struct.unpack("<HI", raw[4:10])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported dataset format version {version}")
    try:
        h = json.loads(raw[10 : 10 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    n, d = h["count"], h["D"]
    body = raw[10 + hlen :]
    expected = 8 * n * d + (8 * n if h["labeled"] else 0)
    if len(body) != expected:
        raise FormatError(f"{path}: expected {expected} payload bytes, found {len(body)}")
    inputs = np.frombuffer(body[: 8 * n * d], dtype="<f8").reshape(n, d).astype(np.float64)
    labels = np.frombuffer(body[8 * n * d :], dtype="<i8").astype(np.int64) if h["labeled"] else None
    return Dataset(inputs, labels, h["kind"], h["K"], h["seed"], h["provenance"], h["name"], h.get("spec"))


def save_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        meta = {k: v for k, v in _header(ds).items() if k != "spec"}
        fh.write(f"# {CSV_TAG} v{FORMAT_VERSION} {json.dumps(meta, sort_keys=True)}\n")
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(ds.dim)] + ["label", "kind"])
        for i, row in enumerate(ds.inputs):
            label = "" if ds.labels is None else int(ds.labels[i])
            w.writerow([repr(float(v)) for v in row] + [label, ds.kind])


def load_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        first = fh.readline()
        prefix = f"# {CSV_TAG} v"
        if not first.startswith(prefix):
            raise FormatError(f"{path}: missing dataset header line")
        version_str, _, meta_json = first[len(prefix):].partition(" ")
        if version_str != str(FORMAT_VERSION):
            raise FormatError(f"{path}: unsupported dataset format version {version_str}")
        meta = json.loads(meta_json)
        rows = list(csv.reader(fh))
    d = meta["D"]
    body = rows[1:]
    if len(body) != meta["count"]:
        raise FormatError(f"{path}: header says {meta['count']} rows, found {len(body)}")
    inputs = np.array([[float(v) for v in r[:d]] for r in body], dtype=np.float64).reshape(len(body), d)
    labels = np.array([int(r[d]) for r in body], dtype=np.int64) if meta["labeled"] else None
    return Dataset(inputs, labels, meta["kind"], meta["K"], meta["seed"], meta["provenance"], meta["name"])


def save(ds: Dataset, path) -> None:
    (save_csv if str(path).endswith(".csv") else save_binary)(ds, path)


def load(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    return load_csv(path) if path.suffix == ".csv" else load_binary(path)

