"""Memory-budget planning and per-layer adaptive-replacement expert caches.

Capacity planning fills the shallow layers (where prediction is weakest) to
full before splitting what remains evenly across deep layers. Each layer then
runs an independent ARC instance: recency list T1, frequency list T2, ghost
lists B1/B2, and an adaptation target p that shifts capacity between the two
sides as ghost hits reveal which one is being starved.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .core import ModelConfig
from .errors import BudgetTooSmall, InvalidConfig, NoAccesses


@dataclass(frozen=True)
class CachePlan:
    """Expert-slot capacities per layer derived from a byte budget."""

    memory_budget: int
    cache_total: int
    per_layer_capacity: tuple[int, ...]
    cached_bits: int

    def bytes_used(self, cfg: ModelConfig) -> int:
        return cfg.dense_bytes + sum(self.per_layer_capacity) * cfg.expert_bytes[self.cached_bits]


def _slots_for_budget(cfg: ModelConfig, memory_budget: int, cached_bits: int) -> int:
    if cached_bits not in cfg.expert_bytes:
        raise InvalidConfig(f"no expert byte size configured for {cached_bits}-bit slots")
    if memory_budget < cfg.dense_bytes:
        raise BudgetTooSmall(
            f"memory budget {memory_budget} is below the dense footprint {cfg.dense_bytes}"
        )
    return (memory_budget - cfg.dense_bytes) // cfg.expert_bytes[cached_bits]


def plan_allocation(cfg: ModelConfig, memory_budget: int, cached_bits: int = 16) -> CachePlan:
    """Shallow-favoring split of the cacheable expert slots.

    Layers below the shallow boundary are filled to ``num_experts`` in order;
    whatever remains is divided evenly over the deep layers with the floor's
    leftover slots handed one each to the lowest-indexed deep layers.
    """
    cache_total = _slots_for_budget(cfg, memory_budget, cached_bits)
    L, E, n = cfg.shallow_boundary_L, cfg.num_experts, cfg.num_layers
    cap = [0] * n
    remaining = cache_total
    for layer in range(min(L, n)):
        take = min(E, remaining)
        cap[layer] = take
        remaining -= take
        if remaining == 0:
            break
    deep = n - L
    if remaining > 0 and deep > 0:
        base = min(E, remaining // deep)
        extra = remaining - base * deep if base < E else 0
        for layer in range(L, n):
            cap[layer] = base
        for layer in range(L, min(L + extra, n)):
            cap[layer] += 1
    elif remaining > 0 and deep == 0:
        pass  # every layer is shallow and already full; surplus slots stay unused
    return CachePlan(
        memory_budget=memory_budget,
        cache_total=cache_total,
        per_layer_capacity=tuple(cap),
        cached_bits=cached_bits,
    )


def uniform_plan(cfg: ModelConfig, memory_budget: int, cached_bits: int = 16) -> CachePlan:
    """Even split of the same slot total across all layers, for comparisons."""
    cache_total = _slots_for_budget(cfg, memory_budget, cached_bits)
    n, E = cfg.num_layers, cfg.num_experts
    base = min(E, cache_total // n)
    extra = cache_total - base * n if base < E else 0
    cap = [base] * n
    for layer in range(min(extra, n)):
        cap[layer] += 1
    return CachePlan(
        memory_budget=memory_budget,
        cache_total=cache_total,
        per_layer_capacity=tuple(cap),
        cached_bits=cached_bits,
    )


def zero_plan(cfg: ModelConfig, memory_budget: int = 0) -> CachePlan:
    """A plan with no expert slots (load-on-demand keeps only the dense parts)."""
    return CachePlan(
        memory_budget=memory_budget,
        cache_total=0,
        per_layer_capacity=(0,) * cfg.num_layers,
        cached_bits=16,
    )


@dataclass
class ArcState:
    """One layer's ARC queues. Lists are ordered LRU first, MRU last."""

    capacity: int
    t1: list[int] = field(default_factory=list)
    t2: list[int] = field(default_factory=list)
    b1: list[int] = field(default_factory=list)
    b2: list[int] = field(default_factory=list)
    p_arc: float = 0.0

    def resident(self) -> set[int]:
        return set(self.t1) | set(self.t2)

    def check_invariants(self) -> None:
        c = self.capacity
        lists = [self.t1, self.t2, self.b1, self.b2]
        total = sum(len(l) for l in lists)
        assert len(self.t1) + len(self.t2) <= c
        assert len(self.t1) + len(self.b1) <= c
        assert total <= 2 * c
        assert len(set().union(*map(set, lists))) == total, "ARC lists must be disjoint"
        assert 0.0 <= self.p_arc <= c

    def _replace(self, expert: int) -> None:
        in_b2 = expert in self.b2
        if self.t1 and (len(self.t1) > self.p_arc or (in_b2 and len(self.t1) == self.p_arc)):
            self.b1.append(self.t1.pop(0))
        elif self.t2:
            self.b2.append(self.t2.pop(0))
        elif self.t1:
            self.b1.append(self.t1.pop(0))

    def access(self, expert: int) -> bool:
        """Standard ARC access; returns True on a resident hit."""
        if self.capacity < 1:
            return False
        c = self.capacity
        if expert in self.t1:
            self.t1.remove(expert)
            self.t2.append(expert)
            return True
        if expert in self.t2:
            self.t2.remove(expert)
            self.t2.append(expert)
            return True
        if expert in self.b1:
            delta = max(1.0, len(self.b2) / len(self.b1))
            self.p_arc = min(float(c), self.p_arc + delta)
            self._replace(expert)
            self.b1.remove(expert)
            self.t2.append(expert)
            return False
        if expert in self.b2:
            delta = max(1.0, len(self.b1) / len(self.b2))
            self.p_arc = max(0.0, self.p_arc - delta)
            self._replace(expert)
            self.b2.remove(expert)
            self.t2.append(expert)
            return False
        # Full miss.
        l1 = len(self.t1) + len(self.b1)
        if l1 == c:
            if len(self.t1) < c:
                self.b1.pop(0)
                self._replace(expert)
            else:
                self.t1.pop(0)  # B1 empty: drop the T1 LRU outright
        else:
            total = l1 + len(self.t2) + len(self.b2)
            if total >= c:
                if total == 2 * c:
                    self.b2.pop(0)
                self._replace(expert)
        self.t1.append(expert)
        return False


class LayeredExpertCache:
    """Per-layer ARC caches sized by a :class:`CachePlan`."""

    def __init__(self, plan: CachePlan):
        self.plan = plan
        self.layers = [ArcState(capacity=c) for c in plan.per_layer_capacity]

    def capacity(self, layer: int) -> int:
        return self.layers[layer].capacity

    def contains(self, layer: int, expert: int) -> bool:
        """Residency check without touching ARC state."""
        state = self.layers[layer]
        return expert in state.t1 or expert in state.t2

    def seed_resident(self, layer: int, experts: Iterable[int]) -> None:
        """Pre-populate a layer's recency list, e.g. to start from a warm cache."""
        state = self.layers[layer]
        for e in experts:
            if len(state.t1) + len(state.t2) >= state.capacity:
                break
            if not self.contains(layer, e):
                state.t1.append(int(e))


def arc_access(cache: LayeredExpertCache, layer: int, expert: int) -> bool:
    """Access one expert in one layer's cache; True means hit."""
    return cache.layers[layer].access(int(expert))


def update_after_layer(cache: LayeredExpertCache, layer: int, chosen: Iterable[int]) -> None:
    """Run the chosen experts through ARC in ascending index order."""
    for e in sorted(int(x) for x in chosen):
        cache.layers[layer].access(e)


@dataclass
class HitCounters:
    hits: int = 0
    misses: int = 0

    def record(self, hit: bool) -> None:
        if hit:
            self.hits += 1
        else:
            self.misses += 1


def hit_rate(counters: HitCounters) -> float:
    """Combined prefetch-or-cache hit ratio over all recorded expert accesses."""
    total = counters.hits + counters.misses
    if total == 0:
        raise NoAccesses("no expert accesses recorded")
    return counters.hits / total


def suggest_shallow_boundary(
    per_layer_recall: Sequence[float], plateau_fraction: float = 0.9
) -> int:
    """Suggest the shallow/deep boundary from a per-layer prediction recall curve.

    The deep plateau is the mean recall over the last quarter of the layers;
    the boundary is the first layer reaching ``plateau_fraction`` of it, so
    layers below the boundary are the ones worth caching outright.
    """
    n = len(per_layer_recall)
    if n == 0:
        raise InvalidConfig("recall curve is empty")
    tail = max(1, n // 4)
    plateau = sum(per_layer_recall[-tail:]) / tail
    threshold = plateau_fraction * plateau
    for layer, r in enumerate(per_layer_recall):
        if r >= threshold:
            return layer
    return n
