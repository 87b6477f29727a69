"""Experiment orchestration: specs, runs, budget sweeps, ablations, reports.

An experiment is a matrix over (strategy, memory budget, seed). Traces are
either generated synthetically per seed or loaded from files; every run is
deterministic, so reports are reproducible byte for byte from the same spec.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .core import (
    GateTrace,
    ModelConfig,
    TimingModel,
    model_config_from_dict,
    read_trace,
    timing_model_from_dict,
    validate_config,
)
from .errors import InvalidConfig, SimError
from .gatesim import GateWeights, GenConfig, gen_trace, probe_similarity_study
from .pipeline import (
    ComparisonRow,
    Strategy,
    compare_strategies,
)
from .predict import PrefetchPolicy, cross_layer_predict, prefetch_recall
from .quant import QuantPolicy

CSV_HEADER = (
    "run_id",
    "strategy",
    "phase",
    "budget_bytes",
    "ttft_ms",
    "tpot_ms",
    "tokens_per_s",
    "recall",
    "hit_rate",
    "stall_ms",
)


def _strategy_from_spec(item: Any) -> Strategy:
    if isinstance(item, str):
        name = item.lower()
        if name == "fate":
            return Strategy.fate()
        if name == "eap":
            return Strategy.eap()
        if name == "lod":
            return Strategy.lod()
        raise InvalidConfig(f"unknown strategy {item!r}")
    if not isinstance(item, Mapping):
        raise InvalidConfig(f"strategy entries must be names or objects, got {item!r}")
    kind = item.get("kind")
    if kind == "lod":
        return Strategy.lod()
    prefetch = item.get("prefetch_policy")
    policy = None
    if prefetch is not None:
        policy = PrefetchPolicy(
            kind=prefetch.get("kind", "percentile"),
            percentile_q=float(prefetch.get("percentile_q", 0.75)),
        )
    quant = item.get("quant_policy")
    qpolicy = None
    if quant is not None:
        qpolicy = QuantPolicy(
            p_int2=float(quant.get("p_int2", 0.25)),
            decode_bits=int(quant.get("decode_bits", 4)),
            cache_bits=int(quant.get("cache_bits", 4)),
            accuracy_tolerance=float(quant.get("accuracy_tolerance", 0.01)),
        )
    if kind == "fate":
        return Strategy.fate(
            prefetch_policy=policy,
            quant_policy=qpolicy if quant is not None else QuantPolicy(),
            reorder_prefill=bool(item.get("reorder_prefill", True)),
            charge_prediction=bool(item.get("charge_prediction", False)),
        )
    if kind == "eap":
        return Strategy.eap(quant_policy=qpolicy)
    raise InvalidConfig(f"unknown strategy kind {kind!r}")


def _gen_config_from_dict(d: Mapping) -> GenConfig:
    try:
        return GenConfig(
            rho_adjacent=float(d.get("rho_adjacent", 0.888)),
            rho_within=(None if d.get("rho_within") is None else float(d["rho_within"])),
            layer_sharpness=(
                None
                if d.get("layer_sharpness") is None
                else tuple(float(x) for x in d["layer_sharpness"])
            ),
            seed=int(d.get("seed", 0)),
            num_tokens=int(d.get("num_tokens", 64)),
        )
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"malformed generation config: {exc}")


@dataclass(frozen=True)
class ExperimentSpec:
    """One experiment matrix: model, timing, traces or generation, and the grid."""

    model: ModelConfig
    timing: TimingModel
    strategies: tuple[Strategy, ...]
    budgets: tuple[int, ...]
    seeds: tuple[int, ...]
    generation: GenConfig | None = None
    prefill_tokens: int = 64
    decode_trace_path: str | None = None
    prefill_trace_path: str | None = None

    def __post_init__(self):
        validate_config(self.model, self.timing)
        if not self.strategies:
            raise InvalidConfig("spec needs at least one strategy")
        if not self.seeds:
            raise InvalidConfig("spec needs at least one seed")
        if not self.budgets:
            raise InvalidConfig("spec needs at least one memory budget")
        if self.generation is None and self.decode_trace_path is None:
            raise InvalidConfig("spec needs a generation block or a decode trace path")

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ExperimentSpec":
        if "model" not in doc or "timing" not in doc:
            raise InvalidConfig("spec must carry 'model' and 'timing' sections")
        gen = doc.get("generation")
        return cls(
            model=model_config_from_dict(doc["model"]),
            timing=timing_model_from_dict(doc["timing"]),
            strategies=tuple(_strategy_from_spec(s) for s in doc.get("strategies", [])),
            budgets=tuple(int(b) for b in doc.get("budgets", [])),
            seeds=tuple(int(s) for s in doc.get("seeds", [0])),
            generation=None if gen is None else _gen_config_from_dict(gen),
            prefill_tokens=int(doc.get("prefill_tokens", 64)),
            decode_trace_path=doc.get("decode_trace_path"),
            prefill_trace_path=doc.get("prefill_trace_path"),
        )


def _traces_for_seed(
    spec: ExperimentSpec, seed: int
) -> tuple[GateTrace | None, GateTrace, GateWeights | None]:
    if spec.generation is not None:
        ss = np.random.SeedSequence([spec.generation.seed, seed])
        dec_seed, pre_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
        gen_dec = GenConfig(
            rho_adjacent=spec.generation.rho_adjacent,
            rho_within=spec.generation.rho_within,
            layer_sharpness=spec.generation.layer_sharpness,
            seed=dec_seed,
            num_tokens=spec.generation.num_tokens,
            phase="decoding",
        )
        decode_trace, weights = gen_trace(spec.model, gen_dec)
        gen_pre = GenConfig(
            rho_adjacent=spec.generation.rho_adjacent,
            rho_within=spec.generation.rho_within,
            layer_sharpness=spec.generation.layer_sharpness,
            seed=pre_seed,
            num_tokens=spec.prefill_tokens,
            phase="prefill",
        )
        # Both phases must route through the same gates, so the prefill trace
        # reuses the decode trace's sampled matrices.
        prefill_trace, _ = gen_trace(spec.model, gen_pre, weights=weights)
        return prefill_trace, decode_trace, weights
    decode_trace = read_trace(spec.decode_trace_path)
    prefill_trace = (
        read_trace(spec.prefill_trace_path) if spec.prefill_trace_path else None
    )
    return prefill_trace, decode_trace, None


@dataclass(frozen=True)
class RunRow:
    run_id: str
    strategy: str
    phase: str
    budget_bytes: int
    seed: int
    ttft_ms: float | None
    tpot_ms: float | None
    tokens_per_s: float
    recall: float
    hit_rate: float
    stall_ms: float

    def csv_values(self) -> tuple[str, ...]:
        fmt = lambda v: "" if v is None else repr(float(v))
        return (
            self.run_id,
            self.strategy,
            self.phase,
            str(self.budget_bytes),
            fmt(self.ttft_ms),
            fmt(self.tpot_ms),
            fmt(self.tokens_per_s),
            fmt(self.recall),
            fmt(self.hit_rate),
            fmt(self.stall_ms),
        )


@dataclass
class ExperimentResult:
    rows: list[RunRow]
    timelines: dict[str, list[dict]]
    summary: dict


def _rows_for_seed(spec: ExperimentSpec, seed: int) -> tuple[list[RunRow], dict[str, list[dict]]]:
    prefill_trace, decode_trace, weights = _traces_for_seed(spec, seed)
    comparison = compare_strategies(
        spec.model,
        spec.timing,
        spec.strategies,
        spec.budgets,
        prefill_trace,
        decode_trace,
        weights=weights,
    )
    rows = []
    timelines = {}
    for c in comparison:
        run_id = f"{c.strategy}_{c.phase}_b{c.budget_bytes}_s{seed}"
        rows.append(
            RunRow(
                run_id=run_id,
                strategy=c.strategy,
                phase=c.phase,
                budget_bytes=c.budget_bytes,
                seed=seed,
                ttft_ms=c.report.ttft_ms,
                tpot_ms=c.report.tpot_ms,
                tokens_per_s=c.report.tokens_per_s,
                recall=c.report.recall,
                hit_rate=c.report.hit_rate,
                stall_ms=c.report.stall_ms,
            )
        )
        timelines[run_id] = [
            {"start": e.start, "end": e.end, "resource": e.resource, "label": e.label}
            for e in c.timeline.events
        ]
    return rows, timelines


def run_experiment(spec: ExperimentSpec, jobs: int = 1) -> ExperimentResult:
    """Execute the full (strategy x budget x seed) matrix and summarize it."""
    all_rows: list[RunRow] = []
    timelines: dict[str, list[dict]] = {}
    if jobs <= 1 or len(spec.seeds) == 1:
        per_seed = [_rows_for_seed(spec, s) for s in spec.seeds]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_seed = list(pool.map(lambda s: _rows_for_seed(spec, s), spec.seeds))
    for rows, tls in per_seed:
        all_rows.extend(rows)
        timelines.update(tls)
    all_rows.sort(key=lambda r: (r.strategy, r.phase, r.budget_bytes, r.seed))

    groups: dict[tuple, list[RunRow]] = {}
    for r in all_rows:
        groups.setdefault((r.strategy, r.phase, r.budget_bytes), []).append(r)
    summary_rows = []
    for (strategy, phase, budget), rs in sorted(groups.items()):
        tok = [r.tokens_per_s for r in rs]
        summary_rows.append(
            {
                "strategy": strategy,
                "phase": phase,
                "budget_bytes": budget,
                "seeds": len(rs),
                "tokens_per_s_mean": statistics.fmean(tok),
                "tokens_per_s_std": statistics.stdev(tok) if len(tok) > 1 else 0.0,
                "hit_rate_mean": statistics.fmean([r.hit_rate for r in rs]),
                "recall_mean": statistics.fmean([r.recall for r in rs]),
                "stall_ms_mean": statistics.fmean([r.stall_ms for r in rs]),
            }
        )
    return ExperimentResult(
        rows=all_rows, timelines=timelines, summary={"groups": summary_rows}
    )


def sweep_budget(spec: ExperimentSpec, budgets: Sequence[int] | None = None, jobs: int = 1) -> ExperimentResult:
    """Run the matrix over a budget range; identical long-format rows, one per cell."""
    if budgets:
        bs = tuple(int(b) for b in budgets)
        if list(bs) != sorted(bs):
            raise InvalidConfig("budget sweep expects a monotone budget list")
        spec = ExperimentSpec(
            model=spec.model,
            timing=spec.timing,
            strategies=spec.strategies,
            budgets=bs,
            seeds=spec.seeds,
            generation=spec.generation,
            prefill_tokens=spec.prefill_tokens,
            decode_trace_path=spec.decode_trace_path,
            prefill_trace_path=spec.prefill_trace_path,
        )
    return run_experiment(spec, jobs=jobs)


ABLATION_STAGES = ("lod", "+prefetch", "+prefetch+cache", "+prefetch+cache+quant")


def _ablation_strategy(stage: str) -> tuple[Strategy, bool]:
    """Strategy for an ablation stage plus whether it uses the budget plan."""
    if stage == "lod":
        return Strategy.lod(), False
    if stage == "+prefetch":
        return Strategy.fate(quant_policy=None, reorder_prefill=True), False
    if stage == "+prefetch+cache":
        return Strategy.fate(quant_policy=None, reorder_prefill=True), True
    if stage == "+prefetch+cache+quant":
        return Strategy.fate(), True
    raise InvalidConfig(f"unknown ablation stage {stage!r}")


def ablate(spec: ExperimentSpec, jobs: int = 1) -> dict:
    """Incremental component study at the first budget in the spec.

    Stages: load on demand, plus cross-layer prefetch, plus the expert cache,
    plus quantized transfers and cache slots. Reports decode tokens/s per
    stage and the delta over the previous stage, averaged over seeds.
    """
    from .cache import plan_allocation, zero_plan
    from .pipeline import simulate_decoding
    from .cache import LayeredExpertCache

    budget = spec.budgets[0]
    stage_rows: list[dict] = []
    per_stage_tokens: dict[str, list[float]] = {s: [] for s in ABLATION_STAGES}
    for seed in spec.seeds:
        _, decode_trace, weights = _traces_for_seed(spec, seed)
        for stage in ABLATION_STAGES:
            strategy, use_cache = _ablation_strategy(stage)
            plan = (
                plan_allocation(spec.model, budget, strategy.cache_bits())
                if use_cache
                else zero_plan(spec.model, budget)
            )
            _, rep = simulate_decoding(
                decode_trace, strategy, plan, spec.timing, spec.model, weights=weights
            )
            per_stage_tokens[stage].append(rep.tokens_per_s)
    prev_mean = None
    for stage in ABLATION_STAGES:
        vals = per_stage_tokens[stage]
        mean = statistics.fmean(vals)
        stage_rows.append(
            {
                "stage": stage,
                "tokens_per_s_mean": mean,
                "tokens_per_s_std": statistics.stdev(vals) if len(vals) > 1 else 0.0,
                "delta_tokens_per_s": 0.0 if prev_mean is None else mean - prev_mean,
            }
        )
        prev_mean = mean
    return {"budget_bytes": budget, "stages": stage_rows}


def probe_study(spec: ExperimentSpec, seed: int | None = None) -> dict:
    """Probe-similarity table plus decode prediction recall from each probe position."""
    use_seed = spec.seeds[0] if seed is None else seed
    _, decode_trace, weights = _traces_for_seed(spec, use_seed)
    if weights is None:
        raise InvalidConfig("probe study needs a synthetic trace (gate weights required)")
    rows = probe_similarity_study(decode_trace)
    by_token = decode_trace.by_token()
    policy = PrefetchPolicy(kind="topk")
    recall_by_pos = {1: 0.0, 2: 0.0, 3: 0.0}
    n = 0
    for token, layers in by_token.items():
        for layer in range(spec.model.num_layers - 1):
            rec, nxt = layers[layer], layers[layer + 1]
            for pos, key in ((1, "attn_in_next"), (2, "gate_in_cur"), (3, "attn_in_cur")):
                pl = cross_layer_predict(
                    rec.probe_hidden[key], weights, layer + 1, policy, spec.model.top_k
                )
                recall_by_pos[pos] += prefetch_recall(pl, nxt.chosen)
            n += 1
    out_rows = []
    for r in rows:
        out_rows.append(
            {
                "position": r.position,
                "probe": r.probe_key,
                "mean_similarity": r.mean_similarity,
                "pairs": r.pairs,
                "decode_topk_recall": recall_by_pos[r.position] / n,
            }
        )
    return {"seed": use_seed, "rows": out_rows}


def csv_text(rows: Sequence[RunRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow(r.csv_values())
    return buf.getvalue()


def write_outputs(result: ExperimentResult, out_dir: str | os.PathLike) -> dict[str, str]:
    """Write comparison.csv, summary.json, and per-run timeline JSON files."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    csv_path = os.path.join(out_dir, "comparison.csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(csv_text(result.rows))
    paths["csv"] = csv_path
    summary_path = os.path.join(out_dir, "summary.json")
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(result.summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths["summary"] = summary_path
    tl_dir = os.path.join(out_dir, "timelines")
    os.makedirs(tl_dir, exist_ok=True)
    for run_id, events in result.timelines.items():
        with open(os.path.join(tl_dir, f"{run_id}.json"), "w", encoding="utf-8") as fh:
            json.dump(events, fh, sort_keys=True)
            fh.write("\n")
    paths["timelines"] = tl_dir
    return paths
