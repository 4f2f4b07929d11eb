"""Training loop: select nodes, train locally, aggregate, adjust probabilities.

Randomness is split into substreams keyed by (master seed, purpose, round[,
node]), so two runs that differ only in policy see the same data, the same
initial model, and the same per-node shuffles. Results do not depend on how
many workers train nodes in parallel.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np

from .aggregation import (
    AggregationOutcome,
    RoundUpdates,
    average_updates,
    optimal_aggregation,
)
from .datasets import (
    Examples,
    NodeDataset,
    SkewConfig,
    SyntheticConfig,
    generate_balanced_pool,
    generate_synthetic,
    load_idx,
    num_iid_nodes,
    partition_label_skew,
    sample_eval_batch,
)
from .models import (
    ModelKind,
    ModelSpec,
    TrainConfig,
    deserialize_params,
    evaluate,
    local_train,
    loss_and_gradient,
    serialize_params,
    sgd,
    sgd_stacked,
)
from .selection import (
    NodeStats,
    Policy,
    SelectionPolicyConfig,
    sample_nodes,
    select_bn2,
    select_random,
    update_probabilities,
)

log = logging.getLogger(__name__)

CHECKPOINT_TAG = b"FSC1"

# substream purposes
_SELECT, _TRAIN, _EVAL, _CENTRAL = 1, 2, 3, 4


class AggregationMode(str, Enum):
    FEDAVG = "fedavg"
    OPTIMAL = "optimal"


class DataSource(str, Enum):
    SYNTHETIC = "synthetic"
    SYNTHETIC_SKEW = "synthetic_skew"
    IDX = "idx"


@dataclass(frozen=True)
class DataConfig:
    source: DataSource = DataSource.SYNTHETIC
    num_nodes: int = 50
    iid_fraction: float = 0.2
    heterogeneity: float = 1.0
    labels_per_node: int = 2
    samples_per_node: int = 200
    feature_dim: int = 60
    num_classes: int = 10
    seed: int = 0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""

    def __post_init__(self):
        object.__setattr__(self, "source", DataSource(self.source))
        if self.num_nodes < 1 or self.samples_per_node < 1:
            raise ValueError("num_nodes and samples_per_node must be >= 1")
        num_iid_nodes(self.num_nodes, self.iid_fraction)
        if self.heterogeneity < 0:
            raise ValueError("heterogeneity must be >= 0")
        if self.source is not DataSource.SYNTHETIC:
            if not 1 <= self.labels_per_node <= self.num_classes:
                raise ValueError("labels_per_node must lie in [1, num_classes]")
            if self.samples_per_node % self.labels_per_node:
                raise ValueError("samples_per_node must divide evenly by labels_per_node")
        if self.source is DataSource.IDX and not (self.train_images and self.train_labels):
            raise ValueError("idx data needs train_images and train_labels")


@dataclass(frozen=True)
class AggregationConfig:
    mode: AggregationMode = AggregationMode.FEDAVG
    min_retained_fraction: float = 0.7
    eval_batch_size: int = 128

    def __post_init__(self):
        object.__setattr__(self, "mode", AggregationMode(self.mode))
        if not 0 < self.min_retained_fraction <= 1:
            raise ValueError("min_retained_fraction must lie in (0, 1]")
        if self.eval_batch_size < 1:
            raise ValueError("eval_batch_size must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    decay: float = 0.995
    selection: SelectionPolicyConfig = field(default_factory=SelectionPolicyConfig)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    rounds: int = 200
    seed: int = 0
    divergence: bool = False
    track_grad_norms: bool = True

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.model.input_dim != self.data.feature_dim and self.data.source is not DataSource.IDX:
            raise ValueError(f"model input_dim {self.model.input_dim} != data feature_dim {self.data.feature_dim}")
        if self.model.num_classes != self.data.num_classes:
            raise ValueError("model num_classes must match data num_classes")
        if self.selection.policy is Policy.FEDPNS and self.aggregation.mode is not AggregationMode.OPTIMAL:
            raise ValueError("policy fedpns needs aggregation mode 'optimal' to label nodes")
        if self.aggregation.mode is AggregationMode.OPTIMAL and not self.train.learning_rate > 0:
            raise ValueError("optimal aggregation needs learning_rate > 0")
        self.selection.round_size(self.data.num_nodes)

    def lr_at(self, t: int) -> float:
        return self.train.learning_rate * self.decay ** t


def config_to_dict(cfg) -> dict:
    def conv(v):
        if isinstance(v, Enum):
            return v.value
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return v

    return conv(dataclasses.asdict(cfg))


def config_digest(cfg: ExperimentConfig) -> str:
    """SHA-256 of the canonical (sorted-key) JSON form of the config."""
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class FederatedData:
    nodes: list[NodeDataset]
    test: Examples

    @cached_property
    def pooled_train(self) -> Examples:
        return Examples.concat([n.train for n in self.nodes])

    @property
    def iid_mask(self) -> np.ndarray:
        return np.array([n.is_iid for n in self.nodes])


def build_data(cfg: DataConfig) -> FederatedData:
    if cfg.source is DataSource.SYNTHETIC:
        nodes = generate_synthetic(SyntheticConfig(
            num_nodes=cfg.num_nodes, iid_fraction=cfg.iid_fraction,
            heterogeneity=cfg.heterogeneity, samples_per_node=cfg.samples_per_node,
            feature_dim=cfg.feature_dim, num_classes=cfg.num_classes, seed=cfg.seed,
        ))
        return FederatedData(nodes, Examples.concat([n.test for n in nodes]))

    skew = SkewConfig(
        num_nodes=cfg.num_nodes, iid_fraction=cfg.iid_fraction,
        labels_per_node=cfg.labels_per_node, samples_per_node=cfg.samples_per_node, seed=cfg.seed,
    )
    if cfg.source is DataSource.SYNTHETIC_SKEW:
        # enough of every class for any round-robin assignment plus the IID draws
        per_class = math.ceil(cfg.num_nodes * cfg.samples_per_node / cfg.num_classes) + cfg.samples_per_node
        pool = generate_balanced_pool(per_class, cfg.feature_dim, cfg.num_classes, seed=cfg.seed)
        nodes = partition_label_skew(pool, skew, cfg.num_classes)
        return FederatedData(nodes, Examples.concat([n.test for n in nodes]))

    pool = load_idx(cfg.train_images, cfg.train_labels)
    nodes = partition_label_skew(pool, skew, cfg.num_classes)
    if cfg.test_images:
        test = load_idx(cfg.test_images, cfg.test_labels)
    else:
        test = Examples.concat([n.test for n in nodes])
    return FederatedData(nodes, test)


@dataclass
class RoundRecord:
    round: int
    lr: float
    selected: list[int]
    labeled: list[int]
    excluded: list[int]
    trained: list[int]
    train_loss: float
    test_loss: float
    test_acc: float
    grad_norms: dict[int, float]
    prob: np.ndarray
    divergence: float | None = None
    expectation_trace: list[tuple[int, float]] = field(default_factory=list)


@dataclass
class RunState:
    round: int
    w: np.ndarray
    stats: NodeStats
    gamma_hat: np.ndarray
    w_tilde: np.ndarray | None = None


def global_train_loss(spec: ModelSpec, w: np.ndarray, nodes: list[NodeDataset]) -> float:
    """Equal-weight mean of the per-node training losses."""
    if not nodes:
        raise ValueError("no nodes")
    return float(np.mean([evaluate(spec, w, n.train)[0] for n in nodes]))


def local_gradient_norm(spec: ModelSpec, w: np.ndarray, data: Examples) -> float:
    """Norm of the full local-data gradient at ``w``."""
    return float(np.linalg.norm(loss_and_gradient(spec, w, data)[1]))


def weight_divergence(w: np.ndarray, v: np.ndarray) -> float:
    if w.shape != v.shape:
        raise ValueError("shape mismatch")
    return float(np.linalg.norm(w - v))


@dataclass
class CentralizedReference:
    """Centralized SGD on the pooled training data, re-synchronized every round."""

    spec: ModelSpec
    pooled: Examples
    batch_size: int
    v: np.ndarray | None = None

    def step(self, w_sync: np.ndarray, lr: float, steps: int, rng: np.random.Generator) -> np.ndarray:
        self.v = w_sync + sgd(self.spec, w_sync, self.pooled, self.batch_size, lr, steps, rng)
        return self.v


def centralized_step(
    ref: CentralizedReference,
    w_sync: np.ndarray,
    lr: float,
    steps: int,
    rng: np.random.Generator,
) -> np.ndarray:
    return ref.step(w_sync, lr, steps, rng)


Selector = Callable[[int, np.random.Generator, "Simulation"], list[int]]


def substream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


class Simulation:
    """Mutable run state plus the per-round procedure.

    ``selector`` replaces the configured selection rule; it receives the
    round index, the round's selection substream, and the simulation.
    """

    def __init__(
        self,
        cfg: ExperimentConfig,
        data: FederatedData | None = None,
        selector: Selector | None = None,
        workers: int = 1,
    ):
        self.cfg = cfg
        self.data = data if data is not None else build_data(cfg.data)
        if len(self.data.nodes) != cfg.data.num_nodes:
            raise ValueError("data node count does not match config")
        self.spec = cfg.model
        if self.data.nodes[0].train.dim != self.spec.input_dim:
            raise ValueError(f"data has {self.data.nodes[0].train.dim} features, model expects {self.spec.input_dim}")
        self.selector = selector
        self.workers = max(1, workers)
        K = cfg.data.num_nodes
        self.round_size = cfg.selection.round_size(K)
        self.state = RunState(
            round=0,
            w=self.spec.init(),
            stats=NodeStats.uniform(K),
            gamma_hat=np.full(K, np.nan),
        )
        self.reference = CentralizedReference(self.spec, self.data.pooled_train, cfg.train.batch_size)

    @property
    def num_nodes(self) -> int:
        return self.cfg.data.num_nodes

    def _train_nodes(self, nodes: list[int], w: np.ndarray, lr: float, t: int) -> dict[int, np.ndarray]:
        sets = [self.data.nodes[i].train for i in nodes]
        if self.spec.kind is ModelKind.MLR and len({len(s) for s in sets}) == 1:
            # row k matches the per-node path bit for bit; this is just faster
            rngs = [substream(self.cfg.seed, _TRAIN, t, i) for i in nodes]
            steps = self.cfg.train.local_steps(len(sets[0]))
            rows = sgd_stacked(self.spec, w, sets, self.cfg.train.batch_size, lr, steps, rngs)
            return {i: rows[k] for k, i in enumerate(nodes)}

        def one(i):
            rng = substream(self.cfg.seed, _TRAIN, t, i)
            delta, _ = local_train(self.spec, w, self.data.nodes[i].train, self.cfg.train, rng, lr=lr)
            return delta

        if self.workers > 1 and len(nodes) > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                deltas = list(pool.map(one, nodes))
        else:
            deltas = [one(i) for i in nodes]
        return dict(zip(nodes, deltas))

    def _select(self, t: int) -> tuple[list[int], list[int]]:
        """Return (aggregation candidates, nodes that must train)."""
        rng = substream(self.cfg.seed, _SELECT, t)
        policy = self.cfg.selection.policy
        if self.selector is not None:
            chosen = sorted(self.selector(t, rng, self))
            return chosen, chosen
        if policy is Policy.RANDOM:
            chosen = select_random(self.num_nodes, self.round_size, rng)
        elif policy is Policy.FEDPNS:
            chosen = sample_nodes(self.state.stats.prob, self.round_size, rng)
        else:
            macro = select_random(self.num_nodes, self.cfg.selection.macro_size, rng)
            return [], macro
        return chosen, chosen

    def run_round(self) -> RoundRecord:
        cfg, state = self.cfg, self.state
        t = state.round
        lr = cfg.lr_at(t)
        selected, trainers = self._select(t)
        if cfg.divergence:
            trainers = list(range(self.num_nodes))
        deltas = self._train_nodes(trainers, state.w, lr, t)

        bn2 = cfg.selection.policy is Policy.BN2 and self.selector is None
        norms: dict[int, float] = {}
        if bn2 or cfg.track_grad_norms:
            norms = {i: local_gradient_norm(self.spec, state.w, self.data.nodes[i].train) for i in trainers}
        if bn2:
            selected = select_bn2(norms, self.round_size)

        updates = RoundUpdates({i: deltas[i] for i in selected}, state.w, lr)
        if cfg.aggregation.mode is AggregationMode.OPTIMAL:
            eval_rng = substream(cfg.seed, _EVAL, t)
            outcome = optimal_aggregation(
                updates,
                cfg.aggregation.min_retained_fraction,
                loss_fn=lambda w, batch: evaluate(self.spec, w, batch)[0],
                draw_batch=lambda: sample_eval_batch(self.data.test, cfg.aggregation.eval_batch_size, eval_rng),
            )
        else:
            outcome = AggregationOutcome(
                retained=selected, labeled=[], excluded=[],
                new_model=average_updates(updates.deltas, state.w),
            )

        stats = state.stats.record(selected, outcome.labeled, outcome.excluded)
        if cfg.selection.policy is Policy.FEDPNS:
            sel = cfg.selection
            stats = update_probabilities(stats, outcome.labeled, sel.alpha, sel.beta, sel.probability_floor)

        for i, g in norms.items():
            if not g <= state.gamma_hat[i]:
                state.gamma_hat[i] = g

        divergence = None
        if cfg.divergence:
            w_tilde = average_updates(deltas, state.w)
            w_sync = state.w_tilde if state.w_tilde is not None else state.w
            steps = cfg.train.local_steps(len(self.data.nodes[0].train))
            v = centralized_step(self.reference, w_sync, lr, steps, substream(cfg.seed, _CENTRAL, t))
            divergence = weight_divergence(outcome.new_model, v)
            state.w_tilde = w_tilde

        w_next = outcome.new_model
        test_loss, test_acc = evaluate(self.spec, w_next, self.data.test)
        record = RoundRecord(
            round=t,
            lr=lr,
            selected=list(selected),
            labeled=sorted(outcome.labeled),
            excluded=sorted(outcome.excluded),
            trained=list(trainers),
            train_loss=global_train_loss(self.spec, w_next, self.data.nodes),
            test_loss=test_loss,
            test_acc=test_acc,
            grad_norms=norms if cfg.track_grad_norms else {},
            prob=stats.prob.copy(),
            divergence=divergence,
            expectation_trace=outcome.expectation_trace,
        )
        state.w = w_next
        state.stats = stats
        state.round = t + 1
        return record

    def run(self, rounds: int | None = None) -> list[RoundRecord]:
        remaining = self.cfg.rounds - self.state.round if rounds is None else rounds
        records = []
        for _ in range(remaining):
            rec = self.run_round()
            log.debug("round %d loss %.5f acc %.4f", rec.round, rec.train_loss, rec.test_acc)
            records.append(rec)
        return records

    def save_checkpoint(self, path) -> None:
        Path(path).write_bytes(encode_checkpoint(self.cfg, self.state))

    def load_checkpoint(self, path) -> None:
        self.state = decode_checkpoint(Path(path).read_bytes(), self.cfg)


def run_experiment(
    cfg: ExperimentConfig,
    data: FederatedData | None = None,
    selector: Selector | None = None,
    workers: int = 1,
) -> list[RoundRecord]:
    """Run ``cfg.rounds`` rounds from a fresh state and return every record."""
    return Simulation(cfg, data, selector, workers).run()


def encode_checkpoint(cfg: ExperimentConfig, state: RunState) -> bytes:
    """Versioned binary snapshot of the run state, bound to a config digest.

    Layout: 4-byte tag, 32-byte SHA-256 digest, u64 round, parameter vector,
    u8 flag + parameter vector for the full-participation model, u64 node
    count, then per-node prob (f64), selected/labeled/excluded (i64) and max
    gradient norm (f64). Integers little-endian.
    """
    K = state.stats.num_nodes
    parts = [
        CHECKPOINT_TAG,
        bytes.fromhex(config_digest(cfg)),
        struct.pack("<Q", state.round),
        serialize_params(state.w),
        struct.pack("<B", state.w_tilde is not None),
        serialize_params(state.w_tilde) if state.w_tilde is not None else b"",
        struct.pack("<Q", K),
        state.stats.prob.astype("<f8").tobytes(),
        state.stats.selected.astype("<i8").tobytes(),
        state.stats.labeled.astype("<i8").tobytes(),
        state.stats.excluded.astype("<i8").tobytes(),
        state.gamma_hat.astype("<f8").tobytes(),
    ]
    return b"".join(parts)


def decode_checkpoint(buf: bytes, cfg: ExperimentConfig | None = None) -> RunState:
    if buf[:4] != CHECKPOINT_TAG:
        raise ValueError(f"not a checkpoint (tag {buf[:4]!r})")
    digest = buf[4:36].hex()
    if cfg is not None and digest != config_digest(cfg):
        raise ValueError("checkpoint was written for a different config")
    (rnd,) = struct.unpack_from("<Q", buf, 36)
    w, off = deserialize_params(buf, 44)
    (has_tilde,) = struct.unpack_from("<B", buf, off)
    off += 1
    w_tilde = None
    if has_tilde:
        w_tilde, off = deserialize_params(buf, off)
    (K,) = struct.unpack_from("<Q", buf, off)
    off += 8

    def take(dtype):
        nonlocal off
        arr = np.frombuffer(buf, dtype=dtype, count=K, offset=off)
        off += 8 * K
        return arr.astype(np.float64 if dtype == "<f8" else np.int64)

    prob = take("<f8")
    selected, labeled, excluded = take("<i8"), take("<i8"), take("<i8")
    gamma_hat = take("<f8")
    return RunState(rnd, w, NodeStats(prob, selected, labeled, excluded), gamma_hat, w_tilde)
