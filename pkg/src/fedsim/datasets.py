"""Federated data: synthetic generator, label-skew partitioner and IDX loader.

Every generator is a pure function of its config and seed. Gaussian draws come
from numpy's ``Generator.standard_normal`` (PCG64 bit generator, ziggurat
transform), so runs are reproducible for a given numpy major version.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049

TRAIN_FRACTION = 0.8


class LabeledExample(NamedTuple):
    features: np.ndarray
    label: int


@dataclass(frozen=True)
class Examples:
    """A batch of labeled examples stored column-wise.

    ``x`` has shape (n, d) and ``y`` shape (n,). Indexing with an integer gives
    a :class:`LabeledExample`; indexing with a slice or index array gives a
    new :class:`Examples`.
    """

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.ascontiguousarray(self.x, dtype=np.float64)
        y = np.ascontiguousarray(self.y, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ValueError(f"shape mismatch: x {x.shape}, y {y.shape}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.y.shape[0]

    def __getitem__(self, key):
        if isinstance(key, (int, np.integer)):
            return LabeledExample(self.x[key], int(self.y[key]))
        return Examples(self.x[key], self.y[key])

    def __iter__(self) -> Iterator[LabeledExample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @classmethod
    def from_examples(cls, items: Sequence[LabeledExample]) -> "Examples":
        if not items:
            raise ValueError("cannot build Examples from an empty sequence")
        x = np.stack([np.asarray(e.features, dtype=np.float64) for e in items])
        y = np.array([e.label for e in items], dtype=np.int64)
        return cls(x, y)

    @classmethod
    def concat(cls, parts: Sequence["Examples"]) -> "Examples":
        return cls(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]))


@dataclass(frozen=True)
class NodeDataset:
    node_id: int
    train: Examples
    test: Examples
    is_iid: bool


@dataclass(frozen=True)
class SyntheticConfig:
    num_nodes: int = 50
    iid_fraction: float = 0.2
    heterogeneity: float = 1.0
    samples_per_node: int = 200
    feature_dim: int = 60
    num_classes: int = 10
    seed: int = 0


@dataclass(frozen=True)
class SkewConfig:
    num_nodes: int = 50
    iid_fraction: float = 0.2
    labels_per_node: int = 2
    samples_per_node: int = 200
    seed: int = 0


class IdxError(ValueError):
    """Base class for malformed IDX files."""


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


class InsufficientSamplesError(ValueError):
    def __init__(self, label: int, needed: int, available: int):
        super().__init__(f"class {label}: need {needed} samples, pool has {available}")
        self.label = label
        self.needed = needed
        self.available = available


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def num_iid_nodes(num_nodes: int, iid_fraction: float) -> int:
    """Nodes ``0 .. n-1`` are the IID ones; non-integral counts round half up."""
    if not 0.0 <= iid_fraction <= 1.0:
        raise ValueError(f"iid_fraction must lie in [0, 1], got {iid_fraction}")
    return round_half_up(iid_fraction * num_nodes)


def train_size(n: int) -> int:
    return round_half_up(TRAIN_FRACTION * n)


def feature_variances(dim: int) -> np.ndarray:
    """Diagonal covariance r^-1.2 for r = 1..dim."""
    return np.arange(1, dim + 1, dtype=np.float64) ** -1.2


def synthetic_model(cfg: SyntheticConfig) -> tuple[np.ndarray, np.ndarray]:
    """The labeling model (W, b) shared by all nodes of ``generate_synthetic(cfg)``."""
    model_seq = np.random.SeedSequence(cfg.seed).spawn(1)[0]
    rng = np.random.default_rng(model_seq)
    W = rng.standard_normal((cfg.num_classes, cfg.feature_dim))
    b = rng.standard_normal(cfg.num_classes)
    return W, b


def label_by_model(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    # softmax is monotone, so argmax of the logits is argmax of the softmax
    return np.argmax(x @ W.T + b, axis=1)


def _split(node_id: int, x: np.ndarray, y: np.ndarray, is_iid: bool) -> NodeDataset:
    n_train = train_size(len(y))
    return NodeDataset(
        node_id=node_id,
        train=Examples(x[:n_train], y[:n_train]),
        test=Examples(x[n_train:], y[n_train:]),
        is_iid=is_iid,
    )


def _check_common(num_nodes: int, samples_per_node: int) -> None:
    if num_nodes < 1:
        raise ValueError("num_nodes must be >= 1")
    if samples_per_node < 1:
        raise ValueError("samples_per_node must be >= 1")
    if train_size(samples_per_node) < 1:
        raise ValueError("samples_per_node too small for a nonempty train split")


def generate_synthetic(cfg: SyntheticConfig) -> list[NodeDataset]:
    """Generate per-node data from a shared random softmax-linear model.

    IID nodes draw ``x ~ N(0, diag(r^-1.2))``. Non-IID node ``i`` draws
    ``x ~ N(o_i, diag(r^-1.2))`` with ``o_i`` elementwise ``N(B_i, 1)`` and
    ``B_i ~ N(0, heterogeneity)`` (heterogeneity is a variance). Labels are
    the argmax of ``W x + b``. Each node is split 80/20 into train/test.
    """
    _check_common(cfg.num_nodes, cfg.samples_per_node)
    if cfg.heterogeneity < 0:
        raise ValueError("heterogeneity must be >= 0")
    n_iid = num_iid_nodes(cfg.num_nodes, cfg.iid_fraction)
    W, b = synthetic_model(cfg)
    std = np.sqrt(feature_variances(cfg.feature_dim))
    spread = math.sqrt(cfg.heterogeneity)
    node_seqs = np.random.SeedSequence(cfg.seed).spawn(cfg.num_nodes + 1)[1:]

    nodes = []
    for node_id, seq in enumerate(node_seqs):
        rng = np.random.default_rng(seq)
        is_iid = node_id < n_iid
        if is_iid:
            mean = np.zeros(cfg.feature_dim)
        else:
            shift = spread * rng.standard_normal()
            mean = shift + rng.standard_normal(cfg.feature_dim)
        x = mean + std * rng.standard_normal((cfg.samples_per_node, cfg.feature_dim))
        y = label_by_model(x, W, b)
        nodes.append(_split(node_id, x, y, is_iid))
    return nodes


def generate_balanced_pool(
    per_class: int,
    feature_dim: int = 60,
    num_classes: int = 10,
    seed: int = 0,
    chunk: int = 50_000,
    max_draws: int = 20_000_000,
) -> Examples:
    """Class-balanced labeled pool from the IID branch of the synthetic model.

    Samples ``x ~ N(0, diag(r^-1.2))`` labeled by a random linear model and
    keeps the first ``per_class`` hits of every class. Stands in for a real
    image dataset when label-skew partitioning is exercised without one.
    """
    cfg = SyntheticConfig(feature_dim=feature_dim, num_classes=num_classes, seed=seed)
    W, b = synthetic_model(cfg)
    std = np.sqrt(feature_variances(feature_dim))
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])
    kept_x: list[list[np.ndarray]] = [[] for _ in range(num_classes)]
    counts = np.zeros(num_classes, dtype=np.int64)
    drawn = 0
    while (counts < per_class).any():
        if drawn >= max_draws:
            short = int(np.argmin(counts))
            raise InsufficientSamplesError(short, per_class, int(counts[short]))
        x = std * rng.standard_normal((chunk, feature_dim))
        y = label_by_model(x, W, b)
        drawn += chunk
        for c in range(num_classes):
            need = per_class - counts[c]
            if need <= 0:
                continue
            hits = x[y == c][:need]
            kept_x[c].append(hits)
            counts[c] += len(hits)
    xs = np.concatenate([np.concatenate(parts) for parts in kept_x])
    ys = np.repeat(np.arange(num_classes), per_class)
    order = rng.permutation(len(ys))
    return Examples(xs[order], ys[order])


def skew_labels(non_iid_index: int, labels_per_node: int, num_classes: int) -> list[int]:
    """Labels of the ``non_iid_index``-th non-IID node (round-robin over classes)."""
    start = non_iid_index * labels_per_node
    return [(start + k) % num_classes for k in range(labels_per_node)]


def partition_label_skew(pool: Examples, cfg: SkewConfig, num_classes: int | None = None) -> list[NodeDataset]:
    """Split ``pool`` across nodes with label skew.

    The first ``round(iid_fraction * num_nodes)`` nodes get ``samples_per_node``
    examples drawn uniformly without replacement; every other node gets the
    same count split evenly over ``labels_per_node`` classes, assigned
    round-robin across the non-IID nodes. Skewed nodes are served first so a
    short class is reported by name.
    """
    _check_common(cfg.num_nodes, cfg.samples_per_node)
    if num_classes is None:
        num_classes = int(pool.y.max()) + 1
    rho = cfg.labels_per_node
    if not 1 <= rho <= num_classes:
        raise ValueError(f"labels_per_node must lie in [1, {num_classes}], got {rho}")
    if cfg.samples_per_node % rho:
        raise ValueError(
            f"samples_per_node={cfg.samples_per_node} does not split evenly over {rho} labels"
        )
    per_label = cfg.samples_per_node // rho
    n_iid = num_iid_nodes(cfg.num_nodes, cfg.iid_fraction)
    rng = np.random.default_rng(cfg.seed)

    by_class = [rng.permutation(np.flatnonzero(pool.y == c)) for c in range(num_classes)]
    assignments = {
        node_id: skew_labels(j, rho, num_classes)
        for j, node_id in enumerate(range(n_iid, cfg.num_nodes))
    }
    demand = np.zeros(num_classes, dtype=np.int64)
    for labels in assignments.values():
        for c in labels:
            demand[c] += per_label
    for c in range(num_classes):
        if demand[c] > len(by_class[c]):
            raise InsufficientSamplesError(c, int(demand[c]), len(by_class[c]))

    used = np.zeros(len(pool), dtype=bool)
    cursor = np.zeros(num_classes, dtype=np.int64)
    node_idx: dict[int, np.ndarray] = {}
    for node_id, labels in assignments.items():
        parts = []
        for c in labels:
            take = by_class[c][cursor[c]:cursor[c] + per_label]
            cursor[c] += per_label
            parts.append(take)
        idx = np.concatenate(parts)
        used[idx] = True
        node_idx[node_id] = idx

    remaining = np.flatnonzero(~used)
    need = n_iid * cfg.samples_per_node
    if need > len(remaining):
        raise ValueError(f"IID nodes need {need} samples, only {len(remaining)} left in pool")
    drawn = rng.choice(remaining, size=need, replace=False)
    for node_id in range(n_iid):
        node_idx[node_id] = drawn[node_id * cfg.samples_per_node:(node_id + 1) * cfg.samples_per_node]

    nodes = []
    for node_id in range(cfg.num_nodes):
        idx = rng.permutation(node_idx[node_id])
        nodes.append(_split(node_id, pool.x[idx], pool.y[idx], node_id < n_iid))
    return nodes


def sample_eval_batch(test_pool: Examples, size: int, rng: np.random.Generator) -> Examples:
    """Uniform draw of ``min(size, len(test_pool))`` distinct examples."""
    if len(test_pool) == 0:
        raise ValueError("cannot sample from an empty test pool")
    if size < 1:
        raise ValueError("batch size must be >= 1")
    k = min(size, len(test_pool))
    idx = rng.choice(len(test_pool), size=k, replace=False)
    return test_pool[idx]


def _read_header(buf: bytes, path: Path, magic_expected: int) -> tuple[list[int], int]:
    if len(buf) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than magic number")
    (magic,) = struct.unpack(">i", buf[:4])
    if magic != magic_expected:
        raise IdxMagicError(f"{path}: magic {magic}, expected {magic_expected}")
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(buf) < end:
        raise IdxTruncatedError(f"{path}: header truncated")
    dims = list(struct.unpack(f">{ndim}i", buf[4:end]))
    return dims, end


def load_idx(images_path, labels_path) -> Examples:
    """Read an IDX image/label file pair; pixels become reals in [0, 1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    ibuf = images_path.read_bytes()
    lbuf = labels_path.read_bytes()

    dims, off = _read_header(ibuf, images_path, IDX_IMAGE_MAGIC)
    count, feat = dims[0], math.prod(dims[1:])
    if len(ibuf) - off < count * feat:
        raise IdxTruncatedError(
            f"{images_path}: expected {count * feat} pixel bytes, found {len(ibuf) - off}"
        )
    (n_labels,), loff = _read_header(lbuf, labels_path, IDX_LABEL_MAGIC)
    if len(lbuf) - loff < n_labels:
        raise IdxTruncatedError(f"{labels_path}: expected {n_labels} labels, found {len(lbuf) - loff}")
    if n_labels != count:
        raise IdxCountMismatchError(f"{images_path} has {count} images but {labels_path} has {n_labels} labels")

    pixels = np.frombuffer(ibuf, dtype=np.uint8, count=count * feat, offset=off)
    x = pixels.reshape(count, feat).astype(np.float64) / 255.0
    y = np.frombuffer(lbuf, dtype=np.uint8, count=n_labels, offset=loff).astype(np.int64)
    return Examples(x, y)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (n, *dims) and labels (n,) as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">i", IDX_IMAGE_MAGIC))
        f.write(struct.pack(f">{images.ndim}i", *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABEL_MAGIC, len(labels)))
        f.write(labels.tobytes())
