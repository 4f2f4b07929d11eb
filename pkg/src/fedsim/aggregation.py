"""Server-side aggregation: FedAvg averaging and greedy exclusion of adverse updates.

The exclusion procedure works on gradients reconstructed from the uploaded
updates. At each step it drops, tentatively, the node whose removal most
increases the mean inner product between the aggregate gradient and the
member gradients. The drop is kept only if the reduced aggregate also has a
strictly lower loss on a held-out batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np


@dataclass
class RoundUpdates:
    deltas: dict[int, np.ndarray]
    w: np.ndarray
    lr: float

    def __post_init__(self):
        if not self.deltas:
            raise ValueError("no updates")
        for node, d in self.deltas.items():
            if d.shape != self.w.shape:
                raise ValueError(f"update of node {node} has shape {d.shape}, model has {self.w.shape}")

    @property
    def nodes(self) -> list[int]:
        return sorted(self.deltas)


@dataclass
class AggregationOutcome:
    retained: list[int]
    labeled: list[int]
    excluded: list[int]
    new_model: np.ndarray
    expectation_trace: list[tuple[int, float]] = field(default_factory=list)
    # (candidate, ls_full, ls_reduced) for every Check Loss call
    loss_trace: list[tuple[int, float, float]] = field(default_factory=list)


def average_updates(updates: Mapping[int, np.ndarray], w_t: np.ndarray) -> np.ndarray:
    """``w_t`` plus the unweighted mean of the updates (summed in node-id order)."""
    if not updates:
        raise ValueError("no updates to average")
    stacked = np.stack([updates[k] for k in sorted(updates)])
    if stacked.shape[1:] != w_t.shape:
        raise ValueError(f"update shape {stacked.shape[1:]} does not match model shape {w_t.shape}")
    return w_t + stacked.mean(axis=0)


def reconstruct_gradients(updates: RoundUpdates) -> dict[int, np.ndarray]:
    """Recover ``grad F_i(w^t) = -delta_i / lr`` for every participant."""
    if not updates.lr > 0:
        raise ValueError(f"learning rate must be > 0 to reconstruct gradients, got {updates.lr}")
    return {k: -updates.deltas[k] / updates.lr for k in updates.nodes}


def expectation_term(grads: Mapping[int, np.ndarray]) -> float:
    """Mean over members of <mean gradient, member gradient>."""
    if not grads:
        raise ValueError("expectation term of an empty set")
    keys = sorted(grads)
    G = np.stack([grads[k] for k in keys])
    mean = G.mean(axis=0)
    return float(np.mean(G @ mean))


def check_expectation(grads: Mapping[int, np.ndarray]) -> dict[int, float]:
    """Leave-one-out expectation term for every member of ``grads``."""
    if len(grads) < 2:
        raise ValueError("check_expectation needs at least two gradients")
    return {
        i: expectation_term({k: g for k, g in grads.items() if k != i})
        for i in sorted(grads)
    }


LossFn = Callable[[np.ndarray, Any], float]


def check_loss(
    updates: RoundUpdates,
    retained: list[int],
    candidate: int,
    batch: Any,
    loss_fn: LossFn,
) -> tuple[float, float]:
    """Loss of the aggregate over ``retained`` and over ``retained`` minus ``candidate``.

    Both models are scored by ``loss_fn(w, batch)`` on the same batch.
    """
    if candidate not in retained:
        raise ValueError(f"candidate {candidate} is not in the retained set")
    reduced = [k for k in retained if k != candidate]
    if not reduced:
        raise ValueError("removing the candidate would leave no updates")
    w_full = average_updates({k: updates.deltas[k] for k in retained}, updates.w)
    w_reduced = average_updates({k: updates.deltas[k] for k in reduced}, updates.w)
    return loss_fn(w_full, batch), loss_fn(w_reduced, batch)


# Leave-one-out values that differ from the baseline only by summation-order
# rounding must not label a node; the margin is relative to the gradients' scale.
EXPECTATION_RTOL = 1e-9


def min_retained(n: int, fraction: float) -> int:
    return max(1, math.ceil(fraction * n - 1e-12))


def optimal_aggregation(
    updates: RoundUpdates,
    min_retained_fraction: float,
    loss_fn: LossFn,
    draw_batch: Callable[[], Any],
) -> AggregationOutcome:
    """Greedily exclude adverse updates, then average the rest.

    Each iteration compares the best leave-one-out expectation value against
    the current baseline. A strictly higher value (beyond a rounding margin)
    labels that node; it is
    excluded only if the reduced aggregate's loss on a fresh batch from
    ``draw_batch`` is strictly lower. The retained set never shrinks below
    ``ceil(min_retained_fraction * |S_t|)``.
    """
    if not 0 < min_retained_fraction <= 1:
        raise ValueError("min_retained_fraction must lie in (0, 1]")
    grads = reconstruct_gradients(updates)
    retained = updates.nodes
    floor = min_retained(len(retained), min_retained_fraction)
    labeled: list[int] = []
    excluded: list[int] = []
    trace: list[tuple[int, float]] = []
    loss_trace: list[tuple[int, float, float]] = []

    baseline = expectation_term(grads)
    margin = EXPECTATION_RTOL * float(np.mean([g @ g for g in grads.values()]))
    while len(retained) - 1 >= floor and len(retained) >= 2:
        temp = check_expectation({k: grads[k] for k in retained})
        key = retained[0]
        for k in retained:
            if temp[k] > temp[key]:
                key = k
        if not temp[key] > baseline + margin:
            break
        labeled.append(key)
        trace.append((key, temp[key]))
        ls_full, ls_reduced = check_loss(updates, retained, key, draw_batch(), loss_fn)
        loss_trace.append((key, ls_full, ls_reduced))
        if not ls_reduced < ls_full:
            break
        retained = [k for k in retained if k != key]
        excluded.append(key)
        baseline = temp[key]

    new_model = average_updates({k: updates.deltas[k] for k in retained}, updates.w)
    return AggregationOutcome(
        retained=retained,
        labeled=labeled,
        excluded=excluded,
        new_model=new_model,
        expectation_trace=trace,
        loss_trace=loss_trace,
    )
