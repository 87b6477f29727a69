"""Pydantic request/response models for the simulation service."""

from __future__ import annotations

from typing import Any, Optional

from pydantic import BaseModel, Field


class ModelConfigIn(BaseModel):
    num_layers: int
    num_experts: int
    top_k: int
    hidden_dim: int
    shallow_boundary_L: int
    expert_bytes: dict[int, int]
    dense_bytes: int


class TimingModelIn(BaseModel):
    t_moe: float
    t_attn: float
    t_gate: float
    t_expert_io: dict[int, float]
    dequant_ms: float = 0.2


class GenerationIn(BaseModel):
    rho_adjacent: float = 0.888
    rho_within: Optional[float] = None
    layer_sharpness: Optional[list[float]] = None
    seed: int = 0
    num_tokens: int = 64


class PrefetchPolicyIn(BaseModel):
    kind: str = "percentile"
    percentile_q: float = 0.75


class QuantPolicyIn(BaseModel):
    p_int2: float = 0.25
    decode_bits: int = 4
    cache_bits: int = 4
    accuracy_tolerance: float = 0.01


class StrategyIn(BaseModel):
    kind: str
    prefetch_policy: Optional[PrefetchPolicyIn] = None
    quant_policy: Optional[QuantPolicyIn] = None
    reorder_prefill: bool = True
    charge_prediction: bool = False


class RunRequest(BaseModel):
    """One experiment matrix. Traces are generated from ``generation`` or
    passed inline as newline-delimited JSON text."""

    model: ModelConfigIn
    timing: TimingModelIn
    strategies: list[StrategyIn | str]
    budgets: list[int]
    seeds: list[int] = Field(default_factory=lambda: [0])
    generation: Optional[GenerationIn] = None
    prefill_tokens: int = 64
    decode_trace: Optional[str] = None
    prefill_trace: Optional[str] = None
    jobs: int = 1
    include_timelines: bool = False


class SweepRequest(RunRequest):
    sweep_budgets: Optional[list[int]] = None


class RunResponse(BaseModel):
    csv: str
    summary: dict
    timelines: dict[str, list[dict]] = Field(default_factory=dict)


class AblateResponse(BaseModel):
    budget_bytes: int
    stages: list[dict]


class ValidateRequest(BaseModel):
    model: ModelConfigIn
    timing: TimingModelIn


class ValidateResponse(BaseModel):
    ok: bool


class GenTraceRequest(BaseModel):
    model: ModelConfigIn
    generation: GenerationIn
    phase: str = "decoding"


class GenTraceResponse(BaseModel):
    trace: str
    num_records: int


class ProbeStudyRequest(BaseModel):
    model: ModelConfigIn
    timing: TimingModelIn
    generation: GenerationIn
    seed: Optional[int] = None


class ProbeStudyResponse(BaseModel):
    seed: int
    rows: list[dict]


class ErrorBody(BaseModel):
    code: str
    message: str
