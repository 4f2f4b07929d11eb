"""Node selection: probabilistic (FedPNS), uniform random, and gradient-norm (BN2)."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping

import numpy as np


class Policy(str, Enum):
    RANDOM = "random"
    FEDPNS = "fedpns"
    BN2 = "bn2"


@dataclass(frozen=True)
class SelectionPolicyConfig:
    policy: Policy = Policy.RANDOM
    alpha: int = 2
    beta: float = 0.7
    fraction: float = 0.2
    macro_size: int = 20
    probability_floor: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "policy", Policy(self.policy))
        if isinstance(self.alpha, bool) or int(self.alpha) != self.alpha or self.alpha < 1:
            raise ValueError(f"alpha must be a positive integer, got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"fraction must lie in (0, 1], got {self.fraction}")
        if self.probability_floor < 0:
            raise ValueError("probability_floor must be >= 0")

    def round_size(self, num_nodes: int) -> int:
        m = int(np.floor(self.fraction * num_nodes + 0.5))
        if m < 1:
            raise ValueError(f"fraction {self.fraction} of {num_nodes} nodes selects nobody")
        if self.policy is Policy.BN2 and self.macro_size < m:
            raise ValueError(f"macro_size {self.macro_size} is smaller than the round size {m}")
        if self.probability_floor * num_nodes > 1.0:
            raise ValueError("probability_floor times the node count exceeds 1")
        return m


@dataclass
class NodeStats:
    """Selection probabilities and per-node counters, indexed by node id."""

    prob: np.ndarray
    selected: np.ndarray
    labeled: np.ndarray
    excluded: np.ndarray

    @classmethod
    def uniform(cls, num_nodes: int) -> "NodeStats":
        zeros = np.zeros(num_nodes, dtype=np.int64)
        return cls(np.full(num_nodes, 1.0 / num_nodes), zeros.copy(), zeros.copy(), zeros.copy())

    @property
    def num_nodes(self) -> int:
        return self.prob.shape[0]

    def copy(self) -> "NodeStats":
        return NodeStats(self.prob.copy(), self.selected.copy(), self.labeled.copy(), self.excluded.copy())

    def record(self, selected: Iterable[int], labeled: Iterable[int], excluded: Iterable[int]) -> "NodeStats":
        out = self.copy()
        for arr, ids in ((out.selected, selected), (out.labeled, labeled), (out.excluded, excluded)):
            for i in ids:
                arr[i] += 1
        return out


def decrement_factor(x: float, alpha: int, beta: float) -> float:
    """``min((x + beta) ** alpha, 1)`` for a labeled ratio ``x`` in (0, 1]."""
    if not 0.0 < x <= 1.0:
        raise ValueError(f"labeled ratio must lie in (0, 1], got {x}")
    return min((x + beta) ** alpha, 1.0)


def update_probabilities(
    stats: NodeStats,
    labeled: Iterable[int],
    alpha: int,
    beta: float,
    floor: float = 0.0,
) -> NodeStats:
    """Shrink the probabilities of ``labeled`` nodes and spread the mass over the rest.

    Counters must already include this round. A labeled node loses
    ``p * decrement_factor(labeled/selected)``, clipped at ``floor``; only the
    mass actually removed is shared equally by every other node.
    """
    labeled = sorted(set(labeled))
    out = stats.copy()
    if not labeled:
        return out
    K = stats.num_nodes
    if len(labeled) == K:
        raise ValueError("every node is labeled; nobody can receive the removed probability")
    removed = 0.0
    for i in labeled:
        if stats.selected[i] < 1 or stats.labeled[i] > stats.selected[i]:
            raise ValueError(f"node {i}: counters labeled={stats.labeled[i]} selected={stats.selected[i]}")
        x = stats.labeled[i] / stats.selected[i]
        target = stats.prob[i] - stats.prob[i] * decrement_factor(x, alpha, beta)
        new = max(target, floor) if stats.prob[i] >= floor else stats.prob[i]
        removed += stats.prob[i] - new
        out.prob[i] = new
    share = removed / (K - len(labeled))
    mask = np.ones(K, dtype=bool)
    mask[labeled] = False
    out.prob[mask] += share
    return out


def sample_nodes(prob: np.ndarray, m: int, rng: np.random.Generator) -> list[int]:
    """Draw ``m`` distinct nodes by successive draws proportional to ``prob``.

    After each draw the chosen node is removed and the rest renormalized.
    Returned ids are sorted.
    """
    prob = np.asarray(prob, dtype=np.float64)
    positive = int(np.count_nonzero(prob > 0))
    if positive < m:
        raise ValueError(f"need {m} nodes with positive probability, only {positive} available (short by {m - positive})")
    weights = prob.copy()
    chosen = []
    for _ in range(m):
        cum = np.cumsum(weights)
        u = rng.random() * cum[-1]
        i = int(np.searchsorted(cum, u, side="right"))
        if i >= len(weights) or weights[i] == 0.0:
            i = int(np.flatnonzero(weights)[-1])
        chosen.append(i)
        weights[i] = 0.0
    return sorted(chosen)


def select_random(num_nodes: int, m: int, rng: np.random.Generator) -> list[int]:
    return sample_nodes(np.full(num_nodes, 1.0 / num_nodes), m, rng)


def select_bn2(grad_norms: Mapping[int, float], m: int) -> list[int]:
    """The ``m`` nodes with the largest gradient norm; ties go to lower ids."""
    if m > len(grad_norms):
        raise ValueError(f"cannot pick {m} of {len(grad_norms)} nodes")
    order = sorted(grad_norms, key=lambda k: (-grad_norms[k], k))
    return sorted(order[:m])
