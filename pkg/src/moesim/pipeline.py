"""Deterministic discrete-event simulation of offloaded MoE inference.

Two resources are modeled: one compute stream and one host-to-device
transfer channel. Decoding walks gate -> MoE -> next-block attention per
layer per token; the MoE block may not start until every chosen expert is
resident (cached, prefetched in time, or fetched on demand). Prefill runs
per-layer expert compute chunks whose durations scale with each expert's
token count, overlapping them against the transfer channel.

Strategies differ only in when transfers are issued, in what order, and at
what bit-width; the compute work itself is identical, so timing differences
isolate scheduling quality.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cache import CachePlan, HitCounters, LayeredExpertCache, update_after_layer, zero_plan
from .core import GateTrace, ModelConfig, TimingModel, TraceRecord, validate_trace_for
from .errors import InvalidConfig, MissingProbes, TraceMismatch
from .gatesim import GateWeights
from .predict import (
    EapStats,
    PrefetchEntry,
    PrefetchList,
    PrefetchPolicy,
    cross_layer_predict,
    eap_predict,
    eap_update,
    prefetch_recall,
    prefill_merge,
)
from .quant import PopularityProfile, QuantPolicy, assign_bits

STRATEGY_KINDS = ("fate", "eap", "lod")


@dataclass(frozen=True)
class Strategy:
    """A named bundle of prefetch, cache-quantization, and ordering choices.

    ``fate`` is the full stack: cross-layer prefetch, hybrid quantized
    transfers, and popularity-reordered prefill. ``eap`` is the
    activation-path baseline sharing the same cache plan but predicting from
    co-activation statistics and transferring at full width. ``lod`` loads
    every expert on demand and keeps no expert cache.
    """

    kind: str
    prefetch_policy: PrefetchPolicy | None = None
    quant_policy: QuantPolicy | None = None
    reorder_prefill: bool = False
    charge_prediction: bool = False

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise InvalidConfig(f"unknown strategy kind {self.kind!r}")
        if self.kind == "lod" and self.prefetch_policy is not None:
            raise InvalidConfig("lod carries no predictor")

    @classmethod
    def fate(
        cls,
        prefetch_policy: PrefetchPolicy | None = None,
        quant_policy: QuantPolicy | None = None,
        reorder_prefill: bool = True,
        charge_prediction: bool = False,
    ) -> "Strategy":
        return cls(
            kind="fate",
            prefetch_policy=prefetch_policy or PrefetchPolicy(kind="percentile"),
            quant_policy=quant_policy if quant_policy is not None else QuantPolicy(),
            reorder_prefill=reorder_prefill,
            charge_prediction=charge_prediction,
        )

    @classmethod
    def eap(cls, quant_policy: QuantPolicy | None = None) -> "Strategy":
        return cls(
            kind="eap",
            prefetch_policy=PrefetchPolicy(kind="topk"),
            quant_policy=quant_policy,
            reorder_prefill=False,
        )

    @classmethod
    def lod(cls) -> "Strategy":
        return cls(kind="lod")

    def prefetch_bits(self) -> int:
        return self.quant_policy.decode_bits if self.quant_policy else 16

    def ondemand_bits(self) -> int:
        # Misprefetch fallback rides the narrow copy when quantization is on.
        return 2 if self.quant_policy else 16

    def cache_bits(self) -> int:
        return self.quant_policy.cache_bits if self.quant_policy else 16


@dataclass(frozen=True)
class TimelineEvent:
    start: float
    end: float
    resource: str  # "compute" | "transfer"
    label: str


@dataclass(frozen=True)
class Timeline:
    events: tuple[TimelineEvent, ...]
    stall_ms: float

    def compute_busy_ms(self) -> float:
        return sum(e.end - e.start for e in self.events if e.resource == "compute")

    def transfer_busy_ms(self) -> float:
        return sum(e.end - e.start for e in self.events if e.resource == "transfer")

    def check_exclusive(self) -> None:
        for resource in ("compute", "transfer"):
            spans = sorted(
                (e.start, e.end) for e in self.events if e.resource == resource
            )
            for (s0, e0), (s1, _) in zip(spans, spans[1:]):
                assert s1 >= e0 - 1e-9, f"overlapping {resource} events at {s1} < {e0}"


@dataclass(frozen=True)
class StrategyReport:
    strategy: str
    phase: str
    num_tokens: int
    total_ms: float
    ttft_ms: float | None
    tpot_ms: float | None
    tokens_per_s: float
    recall: float
    hit_rate: float
    stall_ms: float
    dequant_count: int
    cache_events: tuple[dict, ...] = ()


def transfer_budget(timing: TimingModel, bits: int) -> int:
    """Experts transferable inside one layer step: floor((t_moe+t_attn+t_gate)/t_io)."""
    if bits not in timing.t_expert_io:
        raise InvalidConfig(f"no transfer time configured for {bits}-bit experts")
    window = timing.t_moe + timing.t_attn + timing.t_gate
    return math.floor(window / timing.t_expert_io[bits])


# ---------------------------------------------------------------------------
# Transfer channel


@dataclass
class _Transfer:
    kind: str  # "prefetch" | "ondemand" | "predict"
    token: int
    layer: int
    expert: int
    bits: int
    duration: float
    enqueued: float
    seq: int
    start: float | None = None
    end: float | None = None

    @property
    def step(self) -> tuple[int, int]:
        return (self.token, self.layer)


class _Channel:
    """Single serial transfer channel with lazily settled start times.

    Pending transfers may be reordered or dropped until they start; queue
    mutations only happen at compute instants, so settling in queue order up
    to a target transfer assigns exactly the starts that would occur.
    """

    def __init__(self):
        self.pending: deque[_Transfer] = deque()
        self.done: list[_Transfer] = []
        self.free_at = 0.0
        self._seq = 0
        self.arrivals: dict[tuple[int, int, int], float] = {}

    def enqueue(
        self, kind: str, token: int, layer: int, expert: int, bits: int, duration: float, now: float
    ) -> _Transfer:
        t = _Transfer(kind, token, layer, expert, bits, duration, now, self._seq)
        self._seq += 1
        self.pending.append(t)
        return t

    def _settle_one(self) -> _Transfer:
        t = self.pending.popleft()
        t.start = max(self.free_at, t.enqueued)
        t.end = t.start + t.duration
        self.free_at = t.end
        self.done.append(t)
        if t.expert >= 0:
            self.arrivals[(t.token, t.layer, t.expert)] = t.end
        return t

    def settle(self, until: float) -> None:
        """Start every pending transfer whose start time falls strictly before ``until``."""
        while self.pending:
            start = max(self.free_at, self.pending[0].enqueued)
            if start >= until:
                break
            self._settle_one()

    def completion(self, target: _Transfer) -> float:
        """Settle queue order up to ``target`` and return its completion time."""
        if target.end is not None:
            return target.end
        while self.pending:
            t = self._settle_one()
            if t is target:
                return t.end
        raise RuntimeError("transfer vanished from channel queue")

    def find(self, token: int, layer: int, expert: int) -> _Transfer | None:
        for t in self.pending:
            if t.expert == expert and t.step == (token, layer):
                return t
        for t in reversed(self.done):
            if t.expert == expert and t.step == (token, layer) and t.end is not None:
                return t
        return None

    def promote_ondemand(self) -> None:
        """Move pending on-demand transfers ahead of pending prefetches, stably."""
        urgent = [t for t in self.pending if t.kind == "ondemand"]
        rest = [t for t in self.pending if t.kind != "ondemand"]
        self.pending = deque(urgent + rest)

    def drop_stale(self, current_step: tuple[int, int]) -> None:
        """Discard pending prefetches whose target step has already computed."""
        self.pending = deque(
            t
            for t in self.pending
            if not (t.kind == "prefetch" and t.step <= current_step)
        )

    def events(self) -> list[TimelineEvent]:
        out = []
        for t in self.done:
            label = (
                f"{t.kind} t{t.token} L{t.layer}"
                if t.expert < 0
                else f"{t.kind} t{t.token} L{t.layer} e{t.expert} {t.bits}b"
            )
            out.append(TimelineEvent(t.start, t.end, "transfer", label))
        return out


# ---------------------------------------------------------------------------
# Predictors


class CrossLayerDecodePredictor:
    """Predicts layer l+1 from the gate input recorded at layer l."""

    issue_at_gate_start = True

    def __init__(self, weights: GateWeights, policy: PrefetchPolicy, top_k: int):
        policy.validate_for(weights.matrices[0].shape[0], top_k)
        self.weights = weights
        self.policy = policy
        self.top_k = top_k

    def predict(
        self, token: int, source_layer: int, record: TraceRecord, chosen: frozenset[int] | None
    ) -> PrefetchList:
        if record.probe_hidden is None or "gate_in_cur" not in record.probe_hidden:
            raise MissingProbes(
                f"record (token {token}, layer {source_layer}) lacks gate_in_cur probe"
            )
        return cross_layer_predict(
            record.probe_hidden["gate_in_cur"],
            self.weights,
            source_layer + 1,
            self.policy,
            self.top_k,
        )

    def observe(self, token: int, layer: int, chosen: frozenset[int]) -> None:
        pass


class EapDecodePredictor:
    """Predicts layer l+1 from layer l's chosen set and running co-activation stats."""

    issue_at_gate_start = False

    def __init__(self, num_layers: int, num_experts: int, top_k: int, stats: EapStats | None = None):
        self.stats = stats or EapStats(num_layers=num_layers, num_experts=num_experts)
        self.top_k = top_k
        self._prev: dict[int, tuple[int, frozenset[int]]] = {}

    def observe(self, token: int, layer: int, chosen: frozenset[int]) -> None:
        prev = self._prev.get(token)
        if prev is not None and prev[0] == layer - 1:
            eap_update(self.stats, layer - 1, prev[1], chosen)
        self._prev[token] = (layer, chosen)

    def predict(
        self, token: int, source_layer: int, record: TraceRecord, chosen: frozenset[int] | None
    ) -> PrefetchList:
        assert chosen is not None
        return eap_predict(self.stats, source_layer, chosen, self.top_k)


def build_decode_predictor(
    strategy: Strategy,
    cfg: ModelConfig,
    weights: GateWeights | None,
    eap_stats: EapStats | None = None,
):
    if strategy.kind == "lod" or strategy.prefetch_policy is None:
        return None
    if strategy.kind == "fate":
        if weights is None:
            raise InvalidConfig("cross-layer prediction requires gate weights")
        return CrossLayerDecodePredictor(weights, strategy.prefetch_policy, cfg.top_k)
    return EapDecodePredictor(cfg.num_layers, cfg.num_experts, cfg.top_k, stats=eap_stats)


# ---------------------------------------------------------------------------
# Decoding


def simulate_decoding(
    trace: GateTrace,
    strategy: Strategy,
    plan: CachePlan,
    timing: TimingModel,
    cfg: ModelConfig,
    weights: GateWeights | None = None,
    cache: LayeredExpertCache | None = None,
    predictor=None,
    collect_cache_events: bool = False,
) -> tuple[Timeline, StrategyReport]:
    """Simulate autoregressive decoding of a trace under one strategy.

    Per token and layer: gate compute, then MoE compute gated on expert
    residency, then the next block's attention. Prefetches are issued at gate
    start (cross-layer) or gate end (activation path); on-demand fetches for
    missing experts preempt pending prefetches. The cache is updated with the
    gate's chosen set after each layer.
    """
    if trace.phase != "decoding":
        raise TraceMismatch(f"decoding simulation given a {trace.phase} trace")
    validate_trace_for(trace, cfg)
    if predictor is None:
        predictor = build_decode_predictor(strategy, cfg, weights)

    cache = cache if cache is not None else LayeredExpertCache(plan)
    channel = _Channel()
    counters = HitCounters()
    compute_events: list[TimelineEvent] = []
    cache_events: list[dict] = []
    by_token = trace.by_token()
    tokens = sorted(by_token)
    n_layers = cfg.num_layers
    pre_bits = strategy.prefetch_bits()
    od_bits = strategy.ondemand_bits()
    budget = transfer_budget(timing, pre_bits)
    cached_quantized = plan.cached_bits < 16

    now = 0.0
    stall = 0.0
    dequant_count = 0
    recall_sum = 0.0
    recall_n = 0
    predicted_sets: dict[tuple[int, int], frozenset[int]] = {}
    token_end: dict[int, float] = {}
    step_no = 0

    def issue_prefetch(pl: PrefetchList, token: int, target: int, t: float) -> None:
        nonlocal recall_sum
        entries = pl.entries[:budget] if budget >= 0 else pl.entries
        predicted_sets[(token, target)] = frozenset(e.expert for e in entries)
        if strategy.charge_prediction:
            channel.enqueue("predict", token, target, -1, 0, timing.t_gate, t)
        for e in entries:
            if cache.contains(target, e.expert):
                continue
            if channel.find(token, target, e.expert) is not None:
                continue
            bits = e.bits if e.bits is not None else pre_bits
            channel.enqueue(
                "prefetch", token, target, e.expert, bits, timing.t_expert_io[bits], t
            )

    for token in tokens:
        layers = by_token[token]
        if sorted(layers) != list(range(n_layers)):
            raise TraceMismatch(f"token {token} does not cover layers 0..{n_layers - 1}")
        for layer in range(n_layers):
            record = layers[layer]
            gate_start = now
            channel.settle(gate_start)
            if predictor is not None and predictor.issue_at_gate_start and layer + 1 < n_layers:
                issue_prefetch(
                    predictor.predict(token, layer, record, None), token, layer + 1, gate_start
                )
            gate_end = gate_start + timing.t_gate
            compute_events.append(
                TimelineEvent(gate_start, gate_end, "compute", f"gate t{token} L{layer}")
            )
            channel.settle(gate_end)
            chosen = record.chosen
            if predictor is not None:
                predictor.observe(token, layer, chosen)
                if not predictor.issue_at_gate_start and layer + 1 < n_layers:
                    issue_prefetch(
                        predictor.predict(token, layer, record, chosen),
                        token,
                        layer + 1,
                        gate_end,
                    )
            pred = predicted_sets.pop((token, layer), None)
            if pred is not None:
                recall_sum += len(pred & chosen) / len(chosen)
                recall_n += 1

            channel.drop_stale((token, layer - 1) if layer > 0 else (token - 1, n_layers - 1))
            needed: list[_Transfer] = []
            source_bits: dict[int, int] = {}
            for e in sorted(chosen):
                if cache.contains(layer, e):
                    counters.record(True)
                    source_bits[e] = plan.cached_bits if cached_quantized else 16
                    hit = True
                else:
                    arrival = channel.arrivals.get((token, layer, e))
                    hit = arrival is not None and arrival <= gate_end
                    counters.record(hit)
                    existing = channel.find(token, layer, e)
                    if existing is not None:
                        needed.append(existing)
                        source_bits[e] = existing.bits
                    else:
                        t = channel.enqueue(
                            "ondemand", token, layer, e, od_bits, timing.t_expert_io[od_bits], gate_end
                        )
                        needed.append(t)
                        source_bits[e] = od_bits
                if collect_cache_events:
                    resident = len(cache.layers[layer].resident())
                    cache_events.append(
                        {
                            "step": step_no,
                            "layer": layer,
                            "expert": e,
                            "outcome": "hit" if hit else "miss",
                            "resident": resident,
                        }
                    )
            channel.promote_ondemand()
            ready = gate_end
            for t in needed:
                ready = max(ready, channel.completion(t))
            moe_start = ready
            stall += moe_start - gate_end
            n_quant = sum(1 for e in chosen if source_bits[e] < 16)
            dequant_count += n_quant
            moe_end = moe_start + timing.t_moe + timing.dequant_ms * n_quant
            compute_events.append(
                TimelineEvent(moe_start, moe_end, "compute", f"moe t{token} L{layer}")
            )
            update_after_layer(cache, layer, chosen)
            attn_end = moe_end + timing.t_attn
            compute_events.append(
                TimelineEvent(moe_end, attn_end, "compute", f"attn t{token} L{layer + 1}")
            )
            now = attn_end
            step_no += 1
        token_end[token] = now

    channel.settle(float("inf"))
    total = now
    n_tokens = len(tokens)
    tpot = total / n_tokens
    events = tuple(
        sorted(
            compute_events + channel.events(),
            key=lambda e: (e.start, e.resource, e.end, e.label),
        )
    )
    timeline = Timeline(events=events, stall_ms=stall)
    report = StrategyReport(
        strategy=strategy.kind,
        phase="decoding",
        num_tokens=n_tokens,
        total_ms=total,
        ttft_ms=None,
        tpot_ms=tpot,
        tokens_per_s=1000.0 / tpot,
        recall=(recall_sum / recall_n) if recall_n else 0.0,
        hit_rate=counters.hits / (counters.hits + counters.misses),
        stall_ms=stall,
        dequant_count=dequant_count,
        cache_events=tuple(cache_events),
    )
    return timeline, report


# ---------------------------------------------------------------------------
# Prefill


def _first_seen_order(per_token_sets: Sequence[tuple[int, Iterable[int]]]) -> list[int]:
    """Experts in the order tokens first request them (token asc, index asc within)."""
    seen: list[int] = []
    have = set()
    for _, experts in sorted(per_token_sets, key=lambda p: p[0]):
        for e in sorted(experts):
            if e not in have:
                have.add(e)
                seen.append(e)
    return seen


def simulate_prefill(
    trace: GateTrace,
    strategy: Strategy,
    plan: CachePlan,
    timing: TimingModel,
    cfg: ModelConfig,
    weights: GateWeights | None = None,
    cache: LayeredExpertCache | None = None,
    eap_stats: EapStats | None = None,
) -> tuple[Timeline, StrategyReport]:
    """Simulate prompt processing: per layer, a batch attention+gate block then
    one compute chunk per active expert, sized by its token count.

    Transfers for a layer are issued from the previous layer's predictions
    (merged per-token lists); with ``reorder_prefill`` the non-resident
    experts move in popularity order, otherwise in token-request order.
    Actives that were not predicted load on demand once the gate confirms
    them.
    """
    if trace.phase != "prefill":
        raise TraceMismatch(f"prefill simulation given a {trace.phase} trace")
    validate_trace_for(trace, cfg)

    cache = cache if cache is not None else LayeredExpertCache(plan)
    channel = _Channel()
    counters = HitCounters()
    compute_events: list[TimelineEvent] = []
    by_token = trace.by_token()
    tokens = sorted(by_token)
    n_layers = cfg.num_layers
    cached_quantized = plan.cached_bits < 16

    use_cross = strategy.kind == "fate" and strategy.prefetch_policy is not None
    use_eap = strategy.kind == "eap" and strategy.prefetch_policy is not None
    if use_cross and weights is None:
        raise InvalidConfig("cross-layer prediction requires gate weights")
    stats = eap_stats or (
        EapStats(num_layers=n_layers, num_experts=cfg.num_experts) if use_eap else None
    )

    # Prediction lists for the NEXT layer, filled while processing the current one.
    pending_prediction: dict[int, list[PrefetchList]] = {}
    predicted_for_layer: dict[int, PopularityProfile] = {}

    now = 0.0
    stall = 0.0
    dequant_count = 0
    recall_sum = 0.0
    recall_n = 0

    def merged_topk_lists(layer: int, at_gate_input: bool) -> list[PrefetchList]:
        lists = []
        for token in tokens:
            rec = by_token[token][layer - 1]
            if at_gate_input:
                if rec.probe_hidden is None or "gate_in_cur" not in rec.probe_hidden:
                    raise MissingProbes(
                        f"record (token {token}, layer {layer - 1}) lacks gate_in_cur probe"
                    )
                lists.append(
                    cross_layer_predict(
                        rec.probe_hidden["gate_in_cur"],
                        weights,
                        layer,
                        PrefetchPolicy(kind="topk"),
                        cfg.top_k,
                    )
                )
            else:
                lists.append(eap_predict(stats, layer - 1, rec.chosen, cfg.top_k))
        return lists

    for layer in range(n_layers):
        block_start = now
        channel.settle(block_start)
        # Cross-layer prediction for the next layer fires once this layer's
        # attention output (the gate input) exists, one attention span in.
        if use_cross and layer + 1 < n_layers:
            predict_at = block_start + timing.t_attn
            lists = merged_topk_lists(layer + 1, at_gate_input=True)
            profile = prefill_merge(lists)
            predicted_for_layer[layer + 1] = profile
            bits_map = (
                assign_bits(profile, strategy.quant_policy, "prefill")
                if strategy.quant_policy
                else {e: 16 for e in profile.active()}
            )
            order = (
                list(profile.ordering)
                if strategy.reorder_prefill
                else _first_seen_order(
                    [(t, pl.expert_set()) for t, pl in zip(tokens, lists)]
                )
            )
            for e in order:
                if cache.contains(layer + 1, e) or channel.find(0, layer + 1, e):
                    continue
                bits = bits_map[e]
                channel.enqueue(
                    "prefetch", 0, layer + 1, e, bits, timing.t_expert_io[bits], predict_at
                )

        block_end = block_start + timing.t_attn + timing.t_gate
        compute_events.append(
            TimelineEvent(block_start, block_end, "compute", f"attn+gate L{layer}")
        )
        channel.settle(block_end)

        counts: dict[int, int] = {}
        for token in tokens:
            for e in by_token[token][layer].chosen:
                counts[e] = counts.get(e, 0) + 1
        actives = sorted(counts)
        n_active = len(actives)
        total_assignments = sum(counts.values())

        # Activation-path prediction for the next layer uses this layer's
        # gate results, so it can only be issued now.
        if use_eap:
            for token in tokens:
                if layer > 0:
                    eap_update(stats, layer - 1, by_token[token][layer - 1].chosen, by_token[token][layer].chosen)
            if layer + 1 < n_layers:
                lists = merged_topk_lists(layer + 1, at_gate_input=False)
                profile = prefill_merge(lists)
                predicted_for_layer[layer + 1] = profile
                order = (
                    list(profile.ordering)
                    if strategy.reorder_prefill
                    else _first_seen_order(
                        [(t, pl.expert_set()) for t, pl in zip(tokens, lists)]
                    )
                )
                for e in order:
                    if cache.contains(layer + 1, e) or channel.find(0, layer + 1, e):
                        continue
                    channel.enqueue(
                        "prefetch", 0, layer + 1, e, 16, timing.t_expert_io[16], block_end
                    )

        profile = predicted_for_layer.pop(layer, None)
        predicted = frozenset(profile.active()) if profile is not None else frozenset()
        if profile is not None:
            recall_sum += len(predicted & set(actives)) / n_active
            recall_n += 1

        channel.drop_stale((0, layer))
        source_bits: dict[int, int] = {}
        chunk_transfer: dict[int, _Transfer | None] = {}
        unplanned: list[int] = []
        for e in actives:
            if cache.contains(layer, e):
                counters.record(True)
                source_bits[e] = plan.cached_bits if cached_quantized else 16
                chunk_transfer[e] = None
                continue
            arrival = channel.arrivals.get((0, layer, e))
            counters.record(arrival is not None and arrival <= block_end)
            existing = channel.find(0, layer, e)
            if existing is not None:
                chunk_transfer[e] = existing
                source_bits[e] = existing.bits
            else:
                unplanned.append(e)

        od_bits = strategy.ondemand_bits() if strategy.kind == "fate" else 16
        od_order = (
            sorted(unplanned, key=lambda e: (-counts[e], e))
            if strategy.reorder_prefill
            else [
                e
                for e in _first_seen_order(
                    [(t, by_token[t][layer].chosen) for t in tokens]
                )
                if e in set(unplanned)
            ]
        )
        for e in od_order:
            t = channel.enqueue(
                "ondemand", 0, layer, e, od_bits, timing.t_expert_io[od_bits], block_end
            )
            chunk_transfer[e] = t
            source_bits[e] = od_bits
        channel.promote_ondemand()

        # Compute order: residents first, then planned transfers, then the
        # unplanned stragglers; popularity-descending within each group when
        # reordering, token-request order otherwise.
        residents = [e for e in actives if chunk_transfer[e] is None]
        planned = [e for e in actives if chunk_transfer[e] is not None and e not in set(unplanned)]
        if strategy.reorder_prefill:
            by_pop = lambda e: (-counts[e], e)
            order = sorted(residents, key=by_pop) + sorted(planned, key=by_pop) + od_order
        else:
            first_seen = _first_seen_order([(t, by_token[t][layer].chosen) for t in tokens])
            order = first_seen

        compute_free = block_end
        for e in order:
            transfer = chunk_transfer[e]
            available = block_end if transfer is None else max(block_end, channel.completion(transfer))
            chunk_start = max(compute_free, available)
            stall += chunk_start - compute_free
            quantized = source_bits[e] < 16
            dequant_count += 1 if quantized else 0
            duration = (
                0.95 * timing.t_moe * counts[e] / total_assignments
                + 0.05 * timing.t_moe / n_active
                + (timing.dequant_ms if quantized else 0.0)
            )
            chunk_end = chunk_start + duration
            compute_events.append(
                TimelineEvent(chunk_start, chunk_end, "compute", f"expert L{layer} e{e}")
            )
            compute_free = chunk_end

        update_after_layer(cache, layer, actives)
        now = compute_free

    channel.settle(float("inf"))
    ttft = now
    n_tokens = len(tokens)
    events = tuple(
        sorted(
            compute_events + channel.events(),
            key=lambda e: (e.start, e.resource, e.end, e.label),
        )
    )
    timeline = Timeline(events=events, stall_ms=stall)
    report = StrategyReport(
        strategy=strategy.kind,
        phase="prefill",
        num_tokens=n_tokens,
        total_ms=ttft,
        ttft_ms=ttft,
        tpot_ms=None,
        tokens_per_s=1000.0 * n_tokens / ttft,
        recall=(recall_sum / recall_n) if recall_n else 0.0,
        hit_rate=counters.hits / (counters.hits + counters.misses),
        stall_ms=stall,
        dequant_count=dequant_count,
    )
    return timeline, report


# ---------------------------------------------------------------------------
# Comparison


@dataclass(frozen=True)
class ComparisonRow:
    strategy: str
    phase: str
    budget_bytes: int
    report: StrategyReport
    timeline: Timeline


def shared_cache_bits(strategies: Sequence[Strategy]) -> int:
    """Cache slot width shared by every caching strategy in a comparison."""
    for s in strategies:
        if s.quant_policy is not None:
            return s.quant_policy.cache_bits
    return 16


def compare_strategies(
    cfg: ModelConfig,
    timing: TimingModel,
    strategies: Sequence[Strategy],
    budgets: Sequence[int],
    prefill_trace: GateTrace | None,
    decode_trace: GateTrace,
    weights: GateWeights | None = None,
) -> list[ComparisonRow]:
    """Run every (strategy, budget) pair over the same traces with a shared plan.

    Caching strategies share one budget-derived plan for fairness; load on
    demand always runs with zero expert slots, so its rows are budget
    invariant. The decode phase continues from the prefill-warmed cache.
    """
    if len(strategies) < 2:
        raise InvalidConfig("need at least two strategies to compare")
    if not budgets:
        raise InvalidConfig("need at least one memory budget")
    from .cache import plan_allocation  # local import keeps module load cheap

    cached_bits = shared_cache_bits(strategies)
    rows: list[ComparisonRow] = []
    for budget in budgets:
        shared_plan = plan_allocation(cfg, budget, cached_bits)
        for strategy in strategies:
            plan = zero_plan(cfg, budget) if strategy.kind == "lod" else shared_plan
            cache = LayeredExpertCache(plan)
            stats = (
                EapStats(num_layers=cfg.num_layers, num_experts=cfg.num_experts)
                if strategy.kind == "eap"
                else None
            )
            if prefill_trace is not None:
                tl_p, rep_p = simulate_prefill(
                    prefill_trace, strategy, plan, timing, cfg,
                    weights=weights, cache=cache, eap_stats=stats,
                )
                rows.append(ComparisonRow(strategy.kind, "prefill", budget, rep_p, tl_p))
            predictor = (
                EapDecodePredictor(cfg.num_layers, cfg.num_experts, cfg.top_k, stats=stats)
                if strategy.kind == "eap"
                else None
            )
            tl_d, rep_d = simulate_decoding(
                decode_trace, strategy, plan, timing, cfg,
                weights=weights, cache=cache, predictor=predictor,
            )
            rows.append(ComparisonRow(strategy.kind, "decoding", budget, rep_d, tl_d))
    return rows
