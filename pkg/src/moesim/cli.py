"""Experiment runner CLI.

A thin client over the HTTP service: every subcommand builds a request from
the spec file, posts it to the service (in process by default, or to a
remote ``--server`` URL), and writes the returned artifacts under ``--out``.

Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import httpx

from .service.app import app as service_app


def _client(server: str | None) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=600.0)
    transport = httpx.ASGITransport(app=service_app)
    return httpx.Client(transport=transport, base_url="http://moesim.local", timeout=None)


def _fail(code: str, message: str, exit_code: int) -> None:
    click.echo(f"ERROR {code}: {message}", err=True)
    sys.exit(exit_code)


def _post(client: httpx.Client, path: str, payload: dict) -> dict:
    try:
        resp = client.post(path, json=payload)
    except httpx.HTTPError as exc:
        _fail("CONNECT", f"cannot reach service: {exc}", 2)
    if resp.status_code >= 500:
        body = _error_body(resp)
        _fail(body.get("code", "INTERNAL"), body.get("message", resp.text), 2)
    if resp.status_code >= 400:
        body = _error_body(resp)
        _fail(body.get("code", "VALIDATION"), body.get("message", resp.text), 1)
    return resp.json()


def _error_body(resp: httpx.Response) -> dict:
    try:
        body = resp.json()
        if isinstance(body, dict):
            if "detail" in body and "code" not in body:
                return {"code": "VALIDATION", "message": json.dumps(body["detail"])}
            return body
    except ValueError:
        pass
    return {"code": "HTTP", "message": resp.text}


def _load_json(path: Path, code: str) -> dict:
    if not path.exists():
        _fail(code, f"file not found: {path}", 1)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        _fail(code, f"invalid JSON in {path}: {exc}", 1)


def _resolve_section(doc: dict, base: Path, name: str) -> dict:
    """A section may be inline or referenced via ``<name>_path``."""
    if name in doc:
        return doc[name]
    path_key = f"{name}_path"
    if path_key in doc:
        sub = _load_json(base / doc[path_key], f"{name.upper()}_NOT_FOUND")
        return sub.get(name, sub)
    _fail("SPEC_INVALID", f"spec lacks '{name}' (or '{path_key}')", 1)


def _read_trace_text(base: Path, rel: str) -> str:
    path = base / rel
    if not path.exists():
        _fail("TRACE_NOT_FOUND", f"trace file not found: {path}", 1)
    return path.read_text(encoding="utf-8")


def _request_from_spec(spec_path: str, jobs: int, include_timelines: bool) -> dict:
    path = Path(spec_path)
    doc = _load_json(path, "SPEC_NOT_FOUND")
    base = path.parent
    req: dict = {
        "model": _resolve_section(doc, base, "model"),
        "timing": _resolve_section(doc, base, "timing"),
        "strategies": doc.get("strategies", ["fate", "eap", "lod"]),
        "budgets": doc.get("budgets", []),
        "seeds": doc.get("seeds", [0]),
        "prefill_tokens": doc.get("prefill_tokens", 64),
        "jobs": jobs,
        "include_timelines": include_timelines,
    }
    if "generation" in doc:
        req["generation"] = doc["generation"]
    else:
        if "decode_trace_path" in doc:
            req["decode_trace"] = _read_trace_text(base, doc["decode_trace_path"])
        if "prefill_trace_path" in doc:
            req["prefill_trace"] = _read_trace_text(base, doc["prefill_trace_path"])
    return req


def _write_run_outputs(body: dict, out_dir: str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.csv").write_text(body["csv"], encoding="utf-8")
    (out / "summary.json").write_text(
        json.dumps(body["summary"], indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    timelines = body.get("timelines") or {}
    if timelines:
        tl_dir = out / "timelines"
        tl_dir.mkdir(exist_ok=True)
        for run_id, events in timelines.items():
            (tl_dir / f"{run_id}.json").write_text(
                json.dumps(events, sort_keys=True) + "\n", encoding="utf-8"
            )


@click.group()
@click.option("--server", default=None, envvar="MOESIM_SERVER",
              help="Remote service URL; defaults to running the service in-process.")
@click.pass_context
def main(ctx: click.Context, server: str | None) -> None:
    """Trace-driven MoE offloading experiments."""
    ctx.obj = {"server": server}


@main.command()
@click.option("--spec", "spec_path", required=True, type=click.Path(), help="Experiment spec JSON.")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Output directory.")
@click.option("--jobs", default=1, show_default=True, help="Parallel seed workers.")
@click.option("--verbose", is_flag=True, help="Also write per-run timelines and echo summary.")
@click.pass_context
def run(ctx, spec_path: str, out_dir: str, jobs: int, verbose: bool) -> None:
    """Run the full (strategy x budget x seed) comparison matrix."""
    req = _request_from_spec(spec_path, jobs, include_timelines=True)
    with _client(ctx.obj["server"]) as client:
        body = _post(client, "/run", req)
    _write_run_outputs(body, out_dir)
    if verbose:
        for g in body["summary"]["groups"]:
            click.echo(
                f"{g['strategy']:4s} {g['phase']:8s} b={g['budget_bytes']} "
                f"tok/s={g['tokens_per_s_mean']:.3f} hit={g['hit_rate_mean']:.3f}"
            )
    click.echo(f"wrote {out_dir}/comparison.csv")


@main.command()
@click.option("--spec", "spec_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--budgets", default=None, help="Comma-separated budget override, e.g. 2e9,4e9.")
@click.option("--jobs", default=1, show_default=True)
@click.pass_context
def sweep(ctx, spec_path: str, out_dir: str, budgets: str | None, jobs: int) -> None:
    """Sweep memory budgets and emit a long-format CSV for plotting."""
    req = _request_from_spec(spec_path, jobs, include_timelines=False)
    if budgets:
        try:
            req["sweep_budgets"] = [int(float(b)) for b in budgets.split(",")]
        except ValueError:
            _fail("SPEC_INVALID", f"cannot parse budgets {budgets!r}", 1)
    with _client(ctx.obj["server"]) as client:
        body = _post(client, "/sweep", req)
    _write_run_outputs(body, out_dir)
    click.echo(f"wrote {out_dir}/comparison.csv")


@main.command()
@click.option("--spec", "spec_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--jobs", default=1, show_default=True)
@click.pass_context
def ablate(ctx, spec_path: str, out_dir: str, jobs: int) -> None:
    """Incremental component study: lod, +prefetch, +cache, +quant."""
    req = _request_from_spec(spec_path, jobs, include_timelines=False)
    with _client(ctx.obj["server"]) as client:
        body = _post(client, "/ablate", req)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(
        json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    for stage in body["stages"]:
        click.echo(
            f"{stage['stage']:22s} tok/s={stage['tokens_per_s_mean']:.3f} "
            f"(+{stage['delta_tokens_per_s']:.3f})"
        )


@main.command("gen-trace")
@click.option("--spec", "spec_path", required=True, type=click.Path(),
              help="Spec JSON carrying model + generation sections.")
@click.option("--out", "out_path", required=True, type=click.Path(), help="Trace file to write.")
@click.option("--phase", default="decoding", show_default=True,
              type=click.Choice(["decoding", "prefill"]))
@click.option("--seed", default=None, type=int, help="Override the generation seed.")
@click.pass_context
def gen_trace_cmd(ctx, spec_path: str, out_path: str, phase: str, seed: int | None) -> None:
    """Generate a synthetic gate trace and save it as NDJSON."""
    path = Path(spec_path)
    doc = _load_json(path, "SPEC_NOT_FOUND")
    generation = doc.get("generation", {})
    if seed is not None:
        generation = {**generation, "seed": seed}
    req = {
        "model": _resolve_section(doc, path.parent, "model"),
        "generation": generation,
        "phase": phase,
    }
    with _client(ctx.obj["server"]) as client:
        body = _post(client, "/trace/generate", req)
    Path(out_path).write_text(body["trace"], encoding="utf-8")
    click.echo(f"wrote {out_path} ({body['num_records']} records)")


@main.command("probe-study")
@click.option("--spec", "spec_path", required=True, type=click.Path())
@click.option("--out", "out_path", default=None, type=click.Path(), help="Optional JSON report path.")
@click.option("--seed", default=None, type=int)
@click.pass_context
def probe_study_cmd(ctx, spec_path: str, out_path: str | None, seed: int | None) -> None:
    """Per-probe-position mean similarity and decode prediction recall."""
    path = Path(spec_path)
    doc = _load_json(path, "SPEC_NOT_FOUND")
    req = {
        "model": _resolve_section(doc, path.parent, "model"),
        "timing": _resolve_section(doc, path.parent, "timing"),
        "generation": doc.get("generation", {}),
        "seed": seed,
    }
    with _client(ctx.obj["server"]) as client:
        body = _post(client, "/probe-study", req)
    click.echo(f"{'pos':>3s} {'probe':>13s} {'mean_sim':>9s} {'recall':>7s} {'pairs':>6s}")
    for row in body["rows"]:
        click.echo(
            f"{row['position']:3d} {row['probe']:>13s} {row['mean_similarity']:9.4f} "
            f"{row['decode_topk_recall']:7.4f} {row['pairs']:6d}"
        )
    if out_path:
        Path(out_path).write_text(
            json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
def serve(host: str, port: int) -> None:
    """Run the HTTP service."""
    import uvicorn

    uvicorn.run("moesim.service.app:app", host=host, port=port)


if __name__ == "__main__":
    main()
