"""Domain types, configuration validation, and trace serialization.

The simulator's inputs are a static model geometry (:class:`ModelConfig`), a
measured timing model (:class:`TimingModel`), and a gate trace: one record per
(token, layer) carrying probe hidden states, routing weights, and the chosen
expert set. Traces are stored as newline-delimited JSON so arbitrarily long
decode traces stream without loading everything twice.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import InvalidConfig, SchemaError, TraceIOError, TraceMismatch

#: Bit-widths an expert can be stored or transferred at, widest first.
BIT_WIDTHS = (16, 8, 4, 2)

#: Probe positions recorded per (token, layer), keyed by where the hidden
#: state was captured relative to the *current* block's gate input.
PROBE_KEYS = ("attn_in_next", "gate_in_cur", "attn_in_cur")

PHASES = ("prefill", "decoding")
PROVENANCES = ("synthetic", "imported")


def _int_key_map(m: Mapping) -> dict[int, float]:
    return {int(k): v for k, v in m.items()}


@dataclass(frozen=True)
class ModelConfig:
    """Static MoE geometry and per-bit-width expert byte sizes.

    ``dense_bytes`` covers everything that is not a routed expert: dense
    layers, shared experts, KV cache, and activations. It is treated as a
    fixed byte count; per-token KV growth is not modeled.
    """

    num_layers: int
    num_experts: int
    top_k: int
    hidden_dim: int
    shallow_boundary_L: int
    expert_bytes: Mapping[int, int]
    dense_bytes: int

    def __post_init__(self):
        object.__setattr__(self, "expert_bytes", _int_key_map(self.expert_bytes))

    def to_dict(self) -> dict:
        d = {
            "num_layers": self.num_layers,
            "num_experts": self.num_experts,
            "top_k": self.top_k,
            "hidden_dim": self.hidden_dim,
            "shallow_boundary_L": self.shallow_boundary_L,
            "expert_bytes": {str(k): v for k, v in sorted(self.expert_bytes.items())},
            "dense_bytes": self.dense_bytes,
        }
        return d


@dataclass(frozen=True)
class TimingModel:
    """Per-step compute times and per-expert transfer times, in milliseconds.

    ``t_expert_io`` maps bit-width to the transfer time of one expert at that
    width; narrower widths must be strictly faster. ``dequant_ms`` is charged
    on the compute stream once per quantized expert used.
    """

    t_moe: float
    t_attn: float
    t_gate: float
    t_expert_io: Mapping[int, float]
    dequant_ms: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "t_expert_io", _int_key_map(self.t_expert_io))

    def to_dict(self) -> dict:
        return {
            "t_moe": self.t_moe,
            "t_attn": self.t_attn,
            "t_gate": self.t_gate,
            "t_expert_io": {str(k): v for k, v in sorted(self.t_expert_io.items())},
            "dequant_ms": self.dequant_ms,
        }


class ValidatedConfig(NamedTuple):
    model: ModelConfig
    timing: TimingModel


def validate_config(cfg: ModelConfig, timing: TimingModel) -> ValidatedConfig:
    """Check every type invariant; raise :class:`InvalidConfig` naming the first violation."""
    if cfg.num_layers < 1:
        raise InvalidConfig("num_layers must be >= 1")
    if cfg.num_experts < 1:
        raise InvalidConfig("num_experts must be >= 1")
    if cfg.hidden_dim < 1:
        raise InvalidConfig("hidden_dim must be >= 1")
    if not (1 <= cfg.top_k <= cfg.num_experts):
        raise InvalidConfig(
            f"top_k must satisfy 1 <= top_k <= num_experts, got top_k={cfg.top_k} "
            f"with num_experts={cfg.num_experts}"
        )
    if not (0 <= cfg.shallow_boundary_L <= cfg.num_layers):
        raise InvalidConfig(
            f"shallow_boundary_L must lie in [0, num_layers], got {cfg.shallow_boundary_L}"
        )
    if 16 not in cfg.expert_bytes:
        raise InvalidConfig("expert_bytes must include the 16-bit size")
    widths = sorted(cfg.expert_bytes, reverse=True)
    for w in widths:
        if w not in BIT_WIDTHS:
            raise InvalidConfig(f"expert_bytes has unsupported bit-width {w}")
        if cfg.expert_bytes[w] <= 0:
            raise InvalidConfig(f"expert_bytes[{w}] must be > 0")
    for hi, lo in zip(widths, widths[1:]):
        if not cfg.expert_bytes[lo] < cfg.expert_bytes[hi]:
            raise InvalidConfig(
                f"expert_bytes must strictly decrease with bit-width: "
                f"expert_bytes[{lo}]={cfg.expert_bytes[lo]} >= expert_bytes[{hi}]={cfg.expert_bytes[hi]}"
            )
    if cfg.dense_bytes < 0:
        raise InvalidConfig("dense_bytes must be >= 0")

    for name in ("t_moe", "t_attn", "t_gate"):
        if getattr(timing, name) <= 0:
            raise InvalidConfig(f"{name} must be > 0")
    if timing.dequant_ms < 0:
        raise InvalidConfig("dequant_ms must be >= 0")
    io_widths = sorted(timing.t_expert_io)
    if not io_widths:
        raise InvalidConfig("t_expert_io must not be empty")
    for w in io_widths:
        if w not in BIT_WIDTHS:
            raise InvalidConfig(f"t_expert_io has unsupported bit-width {w}")
        if timing.t_expert_io[w] <= 0:
            raise InvalidConfig(f"t_expert_io[{w}] must be > 0")
    for lo, hi in zip(io_widths, io_widths[1:]):
        if not timing.t_expert_io[lo] < timing.t_expert_io[hi]:
            raise InvalidConfig(
                f"t_expert_io must strictly increase with bit-width: "
                f"t_expert_io[{lo}]={timing.t_expert_io[lo]} >= t_expert_io[{hi}]={timing.t_expert_io[hi]}"
            )
    return ValidatedConfig(cfg, timing)


def top_k_set(weights: np.ndarray, k: int) -> frozenset[int]:
    """Indices of the k largest weights; ties broken toward the lower index."""
    w = np.asarray(weights)
    order = np.lexsort((np.arange(w.shape[0]), -w))
    return frozenset(int(i) for i in order[:k])


@dataclass(frozen=True)
class TraceRecord:
    """One (token, layer) routing observation.

    ``probe_hidden`` maps probe position names (see :data:`PROBE_KEYS`) to
    hidden-state vectors; ``routing_weights`` is the full gate distribution
    over experts. Either may be absent in imported traces. ``chosen`` is the
    activated top-k expert set and is always present.
    """

    token_index: int
    layer: int
    chosen: frozenset[int]
    routing_weights: np.ndarray | None = None
    probe_hidden: Mapping[str, np.ndarray] | None = None

    def __post_init__(self):
        object.__setattr__(self, "chosen", frozenset(int(e) for e in self.chosen))
        if self.routing_weights is not None:
            w = np.asarray(self.routing_weights, dtype=np.float64)
            w.flags.writeable = False
            object.__setattr__(self, "routing_weights", w)
        if self.probe_hidden is not None:
            frozen = {}
            for key, vec in self.probe_hidden.items():
                v = np.asarray(vec, dtype=np.float64)
                v.flags.writeable = False
                frozen[key] = v
            object.__setattr__(self, "probe_hidden", frozen)

    def equals(self, other: "TraceRecord") -> bool:
        if (self.token_index, self.layer, self.chosen) != (
            other.token_index,
            other.layer,
            other.chosen,
        ):
            return False
        if (self.routing_weights is None) != (other.routing_weights is None):
            return False
        if self.routing_weights is not None and not np.array_equal(
            self.routing_weights, other.routing_weights
        ):
            return False
        if (self.probe_hidden is None) != (other.probe_hidden is None):
            return False
        if self.probe_hidden is not None:
            if set(self.probe_hidden) != set(other.probe_hidden):
                return False
            for key in self.probe_hidden:
                if not np.array_equal(self.probe_hidden[key], other.probe_hidden[key]):
                    return False
        return True


@dataclass(frozen=True)
class GateTrace:
    """A sequence of trace records for one phase, plus their provenance."""

    records: tuple[TraceRecord, ...]
    phase: str = "decoding"
    provenance: str = "synthetic"

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if self.phase not in PHASES:
            raise SchemaError(f"unknown phase {self.phase!r}")
        if self.provenance not in PROVENANCES:
            raise SchemaError(f"unknown provenance {self.provenance!r}")

    @property
    def num_tokens(self) -> int:
        return len({r.token_index for r in self.records})

    @property
    def num_layers(self) -> int:
        return 1 + max((r.layer for r in self.records), default=-1)

    def by_token(self) -> dict[int, dict[int, TraceRecord]]:
        """records grouped as token -> layer -> record."""
        out: dict[int, dict[int, TraceRecord]] = {}
        for r in self.records:
            out.setdefault(r.token_index, {})[r.layer] = r
        return out

    def equals(self, other: "GateTrace") -> bool:
        return (
            self.phase == other.phase
            and self.provenance == other.provenance
            and len(self.records) == len(other.records)
            and all(a.equals(b) for a, b in zip(self.records, other.records))
        )


def _record_to_obj(r: TraceRecord) -> dict:
    obj: dict = {
        "token_index": r.token_index,
        "layer": r.layer,
        "chosen": sorted(r.chosen),
    }
    if r.routing_weights is not None:
        obj["routing_weights"] = r.routing_weights.tolist()
    if r.probe_hidden is not None:
        obj["probe_hidden"] = {k: v.tolist() for k, v in r.probe_hidden.items()}
    return obj


def _obj_to_record(obj: dict, index: int) -> TraceRecord:
    try:
        token_index = int(obj["token_index"])
        layer = int(obj["layer"])
        chosen = frozenset(int(e) for e in obj["chosen"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"record {index}: missing or malformed required field ({exc})")
    weights = obj.get("routing_weights")
    probes = obj.get("probe_hidden")
    if probes is not None:
        bad = set(probes) - set(PROBE_KEYS)
        if bad:
            raise SchemaError(f"record {index}: unknown probe keys {sorted(bad)}")
    return TraceRecord(
        token_index=token_index,
        layer=layer,
        chosen=chosen,
        routing_weights=None if weights is None else np.asarray(weights, dtype=np.float64),
        probe_hidden=None
        if probes is None
        else {k: np.asarray(v, dtype=np.float64) for k, v in probes.items()},
    )


def _check_record_consistency(records: Sequence[TraceRecord]) -> None:
    """Internal consistency across records: uniform cardinalities, simplex
    weights, and chosen == top-k argmax of the weights when both are present."""
    k = None
    n_experts = None
    for i, r in enumerate(records):
        if k is None:
            k = len(r.chosen)
            if k == 0:
                raise SchemaError(f"record {i}: chosen set is empty")
        elif len(r.chosen) != k:
            raise SchemaError(
                f"record {i}: chosen set has {len(r.chosen)} members, expected {k}"
            )
        if any(e < 0 for e in r.chosen):
            raise SchemaError(f"record {i}: negative expert index in chosen")
        if r.routing_weights is not None:
            w = r.routing_weights
            if n_experts is None:
                n_experts = w.shape[0]
            elif w.shape[0] != n_experts:
                raise SchemaError(
                    f"record {i}: routing_weights length {w.shape[0]} != {n_experts}"
                )
            if not np.all(np.isfinite(w)):
                raise SchemaError(f"record {i}: non-finite routing weight")
            if np.any(w < 0):
                raise SchemaError(f"record {i}: negative routing weight")
            if abs(float(w.sum()) - 1.0) > 1e-6:
                raise SchemaError(f"record {i}: routing weights sum to {w.sum():.9f}, not 1")
            if any(e >= n_experts for e in r.chosen):
                raise SchemaError(f"record {i}: chosen expert out of range")
            if r.chosen != top_k_set(w, k):
                raise SchemaError(
                    f"record {i}: chosen set does not match top-{k} argmax of routing weights"
                )


def write_trace(trace: GateTrace, path: str | os.PathLike) -> None:
    """Write a trace as newline-delimited JSON: a header line, then one record per line."""
    header = {"kind": "gate_trace", "phase": trace.phase, "provenance": trace.provenance}
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header, separators=(",", ":")) + "\n")
            for r in trace.records:
                fh.write(json.dumps(_record_to_obj(r), separators=(",", ":")) + "\n")
    except OSError as exc:
        raise TraceIOError(f"cannot write trace to {path}: {exc}")


def read_trace(path: str | os.PathLike) -> GateTrace:
    """Read a newline-delimited JSON trace.

    The leading header line is optional so record-only imported files load
    with default phase/provenance. An empty file is a valid empty trace.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = [ln for ln in (line.strip() for line in fh) if ln]
    except FileNotFoundError:
        raise TraceIOError(f"trace file not found: {path}", code="TRACE_NOT_FOUND")
    except OSError as exc:
        raise TraceIOError(f"cannot read trace from {path}: {exc}")

    phase, provenance = "decoding", "imported"
    start = 0
    if lines:
        try:
            first = json.loads(lines[0])
        except json.JSONDecodeError as exc:
            raise SchemaError(f"record 0: invalid JSON ({exc})")
        if isinstance(first, dict) and first.get("kind") == "gate_trace":
            phase = first.get("phase", phase)
            provenance = first.get("provenance", provenance)
            start = 1

    records = []
    for i, line in enumerate(lines[start:]):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"record {i}: invalid JSON ({exc})")
        if not isinstance(obj, dict):
            raise SchemaError(f"record {i}: expected a JSON object")
        records.append(_obj_to_record(obj, i))
    _check_record_consistency(records)
    return GateTrace(records=tuple(records), phase=phase, provenance=provenance)


def validate_trace_for(trace: GateTrace, cfg: ModelConfig) -> GateTrace:
    """Check trace geometry against a model config; raise :class:`TraceMismatch`."""
    for i, r in enumerate(trace.records):
        if not (0 <= r.layer < cfg.num_layers):
            raise TraceMismatch(f"record {i}: layer {r.layer} outside [0, {cfg.num_layers})")
        if len(r.chosen) != cfg.top_k:
            raise TraceMismatch(
                f"record {i}: chosen set size {len(r.chosen)} != top_k {cfg.top_k}"
            )
        if any(not (0 <= e < cfg.num_experts) for e in r.chosen):
            raise TraceMismatch(f"record {i}: chosen expert outside [0, {cfg.num_experts})")
        if r.routing_weights is not None and r.routing_weights.shape[0] != cfg.num_experts:
            raise TraceMismatch(
                f"record {i}: routing_weights length {r.routing_weights.shape[0]} "
                f"!= num_experts {cfg.num_experts}"
            )
        if r.probe_hidden is not None:
            for key, v in r.probe_hidden.items():
                if v.shape[0] != cfg.hidden_dim:
                    raise TraceMismatch(
                        f"record {i}: probe {key} length {v.shape[0]} != hidden_dim {cfg.hidden_dim}"
                    )
    return trace


def save_config(cfg: ModelConfig, timing: TimingModel, path: str | os.PathLike) -> None:
    doc = {"model": cfg.to_dict(), "timing": timing.to_dict()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def model_config_from_dict(d: Mapping) -> ModelConfig:
    try:
        return ModelConfig(
            num_layers=int(d["num_layers"]),
            num_experts=int(d["num_experts"]),
            top_k=int(d["top_k"]),
            hidden_dim=int(d["hidden_dim"]),
            shallow_boundary_L=int(d["shallow_boundary_L"]),
            expert_bytes={int(k): int(v) for k, v in d["expert_bytes"].items()},
            dense_bytes=int(d["dense_bytes"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidConfig(f"malformed model config: {exc}")


def timing_model_from_dict(d: Mapping) -> TimingModel:
    try:
        return TimingModel(
            t_moe=float(d["t_moe"]),
            t_attn=float(d["t_attn"]),
            t_gate=float(d["t_gate"]),
            t_expert_io={int(k): float(v) for k, v in d["t_expert_io"].items()},
            dequant_ms=float(d.get("dequant_ms", 0.2)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidConfig(f"malformed timing model: {exc}")


def load_config(path: str | os.PathLike) -> ValidatedConfig:
    """Load and validate a single JSON document holding model + timing sections."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise TraceIOError(f"config file not found: {path}", code="CONFIG_NOT_FOUND")
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidConfig(f"cannot parse config {path}: {exc}")
    if not isinstance(doc, dict) or "model" not in doc or "timing" not in doc:
        raise InvalidConfig(f"config {path} must hold 'model' and 'timing' sections")
    return validate_config(
        model_config_from_dict(doc["model"]), timing_model_from_dict(doc["timing"])
    )
