"""FastAPI service wrapping the simulator.

Every endpoint is a stateless wrapper over the library: requests carry the
full experiment description (configs inline, traces as NDJSON text) and
responses return the report payloads, so the service holds no run state and
any number of clients can share one instance.
"""

from __future__ import annotations

import io
import tempfile

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import experiments
from ..core import (
    GateTrace,
    model_config_from_dict,
    read_trace,
    timing_model_from_dict,
    validate_config,
    write_trace,
)
from ..errors import SimError
from ..gatesim import GenConfig, gen_trace
from ..experiments import ExperimentSpec, ablate, probe_study, run_experiment, sweep_budget
from .schemas import (
    AblateResponse,
    ErrorBody,
    GenTraceRequest,
    GenTraceResponse,
    ProbeStudyRequest,
    ProbeStudyResponse,
    RunRequest,
    RunResponse,
    SweepRequest,
    ValidateRequest,
    ValidateResponse,
)

app = FastAPI(title="moesim", version="0.1.0")


@app.exception_handler(SimError)
async def sim_error_handler(request: Request, exc: SimError) -> JSONResponse:
    return JSONResponse(
        status_code=400, content=ErrorBody(code=exc.code, message=str(exc)).model_dump()
    )


@app.exception_handler(Exception)
async def unexpected_error_handler(request: Request, exc: Exception) -> JSONResponse:
    return JSONResponse(
        status_code=500, content=ErrorBody(code="INTERNAL", message=str(exc)).model_dump()
    )


@app.get("/health")
def health() -> dict:
    return {"status": "ok"}


def _spec_from_request(req: RunRequest) -> ExperimentSpec:
    doc = {
        "model": req.model.model_dump(),
        "timing": req.timing.model_dump(),
        "strategies": [
            s if isinstance(s, str) else s.model_dump(exclude_none=True)
            for s in req.strategies
        ],
        "budgets": req.budgets,
        "seeds": req.seeds,
        "prefill_tokens": req.prefill_tokens,
    }
    if req.generation is not None:
        doc["generation"] = req.generation.model_dump(exclude_none=True)
    spec = ExperimentSpec.from_dict(doc)
    if req.generation is None:
        if req.decode_trace is None:
            raise SimError("request carries neither generation nor a decode trace", "NO_TRACE")
        spec = _attach_inline_traces(spec, req)
    return spec


def _attach_inline_traces(spec: ExperimentSpec, req: RunRequest) -> ExperimentSpec:
    # Inline NDJSON text round-trips through temp files so the library's
    # schema checks apply unchanged.
    def parse(text: str) -> str:
        with tempfile.NamedTemporaryFile("w", suffix=".ndjson", delete=False) as fh:
            fh.write(text)
            return fh.name

    return ExperimentSpec(
        model=spec.model,
        timing=spec.timing,
        strategies=spec.strategies,
        budgets=spec.budgets,
        seeds=spec.seeds,
        generation=None,
        prefill_tokens=spec.prefill_tokens,
        decode_trace_path=parse(req.decode_trace),
        prefill_trace_path=parse(req.prefill_trace) if req.prefill_trace else None,
    )


@app.post("/validate", response_model=ValidateResponse)
def validate(req: ValidateRequest) -> ValidateResponse:
    validate_config(
        model_config_from_dict(req.model.model_dump()),
        timing_model_from_dict(req.timing.model_dump()),
    )
    return ValidateResponse(ok=True)


@app.post("/run", response_model=RunResponse)
def run(req: RunRequest) -> RunResponse:
    spec = _spec_from_request(req)
    result = run_experiment(spec, jobs=req.jobs)
    return RunResponse(
        csv=experiments.csv_text(result.rows),
        summary=result.summary,
        timelines=result.timelines if req.include_timelines else {},
    )


@app.post("/sweep", response_model=RunResponse)
def sweep(req: SweepRequest) -> RunResponse:
    spec = _spec_from_request(req)
    result = sweep_budget(spec, budgets=req.sweep_budgets, jobs=req.jobs)
    return RunResponse(
        csv=experiments.csv_text(result.rows),
        summary=result.summary,
        timelines=result.timelines if req.include_timelines else {},
    )


@app.post("/ablate", response_model=AblateResponse)
def run_ablation(req: RunRequest) -> AblateResponse:
    spec = _spec_from_request(req)
    report = ablate(spec, jobs=req.jobs)
    return AblateResponse(**report)


@app.post("/trace/generate", response_model=GenTraceResponse)
def generate_trace(req: GenTraceRequest) -> GenTraceResponse:
    cfg = model_config_from_dict(req.model.model_dump())
    gen = GenConfig(
        rho_adjacent=req.generation.rho_adjacent,
        rho_within=req.generation.rho_within,
        layer_sharpness=(
            None
            if req.generation.layer_sharpness is None
            else tuple(req.generation.layer_sharpness)
        ),
        seed=req.generation.seed,
        num_tokens=req.generation.num_tokens,
        phase=req.phase,
    )
    trace, _ = gen_trace(cfg, gen)
    with tempfile.NamedTemporaryFile("w+", suffix=".ndjson", delete=False) as fh:
        write_trace(trace, fh.name)
        fh.seek(0)
        text = fh.read()
    return GenTraceResponse(trace=text, num_records=len(trace.records))


@app.post("/probe-study", response_model=ProbeStudyResponse)
def run_probe_study(req: ProbeStudyRequest) -> ProbeStudyResponse:
    doc = {
        "model": req.model.model_dump(),
        "timing": req.timing.model_dump(),
        "strategies": ["lod", "fate"],
        "budgets": [req.model.dense_bytes],
        "seeds": [req.generation.seed],
        "generation": req.generation.model_dump(exclude_none=True),
    }
    spec = ExperimentSpec.from_dict(doc)
    return ProbeStudyResponse(**probe_study(spec, seed=req.seed))
