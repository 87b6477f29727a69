"""Expert-prefetch predictors and recall metrics.

Two prediction routes are implemented: the cross-layer route feeds the
current block's gate input through the *next* block's gate and reads the
predicted routing distribution, and the activation-path baseline (EAP) scores
next-layer experts by co-activation frequency with the currently chosen set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import InvalidConfig
from .gatesim import GateWeights, gate_forward
from .quant import PopularityProfile


@dataclass(frozen=True)
class PrefetchPolicy:
    """Which predicted experts to transfer.

    ``topk`` transfers the predicted top-k set. ``percentile`` transfers every
    expert whose predicted weight lies strictly above the q-th nearest-rank
    percentile of the distribution, always widened to include the predicted
    top-k; with all-distinct weights and (1-q) * num_experts >= top_k that
    widening is a no-op.
    """

    kind: str = "percentile"
    percentile_q: float = 0.75

    def __post_init__(self):
        if self.kind not in ("topk", "percentile"):
            raise InvalidConfig(f"unknown prefetch policy kind {self.kind!r}")
        if not (0.0 < self.percentile_q < 1.0):
            raise InvalidConfig("percentile_q must lie in (0, 1)")

    def validate_for(self, num_experts: int, top_k: int) -> "PrefetchPolicy":
        if self.kind == "percentile" and (1.0 - self.percentile_q) * num_experts < top_k:
            raise InvalidConfig(
                f"percentile_q={self.percentile_q} keeps fewer than top_k={top_k} "
                f"of {num_experts} experts"
            )
        return self


class PrefetchEntry(NamedTuple):
    expert: int
    confidence: float
    bits: int | None


@dataclass(frozen=True)
class PrefetchList:
    """Predicted experts for one layer, highest confidence first."""

    layer: int
    entries: tuple[PrefetchEntry, ...]
    cold_start: bool = False

    def __post_init__(self):
        experts = [e.expert for e in self.entries]
        if len(set(experts)) != len(experts):
            raise InvalidConfig("prefetch list has duplicate expert indices")
        confs = [e.confidence for e in self.entries]
        if any(a < b for a, b in zip(confs, confs[1:])):
            raise InvalidConfig("prefetch list must be sorted by confidence descending")

    def experts(self) -> tuple[int, ...]:
        return tuple(e.expert for e in self.entries)

    def expert_set(self) -> frozenset[int]:
        return frozenset(e.expert for e in self.entries)


def _entries_from(routing: np.ndarray, experts: Iterable[int]) -> tuple[PrefetchEntry, ...]:
    ordered = sorted(experts, key=lambda e: (-routing[e], e))
    return tuple(PrefetchEntry(int(e), float(routing[e]), None) for e in ordered)


def nearest_rank_percentile(values: np.ndarray, q: float) -> float:
    """Nearest-rank percentile: the value at rank ceil(q*n) of the sorted sample."""
    s = np.sort(np.asarray(values))
    rank = int(np.ceil(q * s.shape[0]))
    rank = min(max(rank, 1), s.shape[0])
    return float(s[rank - 1])


def cross_layer_predict(
    gate_in: np.ndarray,
    w: GateWeights,
    target_layer: int,
    policy: PrefetchPolicy,
    top_k: int,
) -> PrefetchList:
    """Predict the target layer's experts from the previous block's gate input."""
    routing = gate_forward(w, target_layer, gate_in)
    top = sorted(range(routing.shape[0]), key=lambda e: (-routing[e], e))[:top_k]
    if policy.kind == "topk":
        chosen = top
    else:
        thr = nearest_rank_percentile(routing, policy.percentile_q)
        chosen = set(np.nonzero(routing > thr)[0].tolist()) | set(top)
    return PrefetchList(layer=target_layer, entries=_entries_from(routing, chosen))


@dataclass
class EapStats:
    """Co-activation counts between consecutive layers' chosen experts.

    ``counts[t][a][b]`` counts how often expert ``a`` chosen at layer ``t``
    preceded expert ``b`` chosen at layer ``t+1``. Single-writer; the
    simulator updates it as layers complete.
    """

    num_layers: int
    num_experts: int
    counts: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.num_layers < 2:
            raise InvalidConfig("EAP stats need at least two layers")
        self.counts = np.zeros(
            (self.num_layers - 1, self.num_experts, self.num_experts), dtype=np.int64
        )

    def row_total(self, layer: int, expert: int) -> int:
        return int(self.counts[layer, expert].sum())


def eap_update(
    stats: EapStats, layer: int, chosen_i: Iterable[int], chosen_next: Iterable[int]
) -> EapStats:
    """Record one observed transition: every (a, b) in chosen_i x chosen_next."""
    a_idx = sorted(int(a) for a in chosen_i)
    b_idx = sorted(int(b) for b in chosen_next)
    for a in a_idx:
        stats.counts[layer, a, b_idx] += 1
    return stats


def eap_predict(stats: EapStats, layer: int, chosen_i: Iterable[int], k: int) -> PrefetchList:
    """Predict layer+1 experts from layer's chosen set and accumulated statistics.

    Scores are Laplace-smoothed row-normalized co-activation sums. When every
    relevant row is empty the list falls back to the k lowest-indexed experts
    and is flagged cold_start.
    """
    if k > stats.num_experts:
        raise InvalidConfig("k exceeds num_experts")
    chosen = sorted(int(a) for a in chosen_i)
    totals = {a: stats.row_total(layer, a) for a in chosen}
    if all(t == 0 for t in totals.values()):
        entries = tuple(PrefetchEntry(e, 0.0, None) for e in range(k))
        return PrefetchList(layer=layer + 1, entries=entries, cold_start=True)
    score = np.zeros(stats.num_experts)
    for a in chosen:
        score += (stats.counts[layer, a] + 1.0) / (totals[a] + stats.num_experts)
    top = sorted(range(stats.num_experts), key=lambda e: (-score[e], e))[:k]
    entries = tuple(PrefetchEntry(int(e), float(score[e]), None) for e in top)
    return PrefetchList(layer=layer + 1, entries=entries)


def prefetch_recall(predicted: PrefetchList | Iterable[int], actual: Iterable[int]) -> float:
    """|predicted intersect actual| / |actual|."""
    actual_set = frozenset(int(e) for e in actual)
    if not actual_set:
        raise InvalidConfig("actual expert set must be non-empty")
    if isinstance(predicted, PrefetchList):
        pred_set = predicted.expert_set()
    else:
        pred_set = frozenset(int(e) for e in predicted)
    return len(pred_set & actual_set) / len(actual_set)


def prefill_merge(per_token_lists: Sequence[PrefetchList]) -> PopularityProfile:
    """Merge per-token prefetch lists into an expert popularity profile.

    Popularity of an expert is the number of token lists containing it;
    the profile orders experts by popularity descending, ties toward the
    lower index.
    """
    if not per_token_lists:
        raise InvalidConfig("cannot merge an empty collection of prefetch lists")
    layers = {pl.layer for pl in per_token_lists}
    if len(layers) != 1:
        raise InvalidConfig(f"prefetch lists target multiple layers: {sorted(layers)}")
    counts: dict[int, int] = {}
    for pl in per_token_lists:
        for e in pl.expert_set():
            counts[e] = counts.get(e, 0) + 1
    return PopularityProfile.from_counts(layer=layers.pop(), counts=counts)
