"""Synthetic gate-trace generation and gate forward passes.

The generator walks a unit-norm hidden-state chain through the network:
within a block the attention input mixes into the gate input with cosine
``rho_within``, and across blocks the gate input mixes into the next
attention input so that adjacent gate inputs land at ``rho_adjacent``. Each
mixing step replaces a controlled fraction of the state with fresh noise, so
probe similarities are tunable knobs rather than properties we hope emerge.

Routing difficulty varies by depth: shallow layers route diffusely and are
harder to predict from a neighbouring input, deep layers route decisively.
Two coupled mechanisms reproduce that. The per-layer temperature schedule
shapes how peaked the recorded routing distributions are, and the chain noise
for the states feeding layer ``l`` is preferentially sampled inside (shallow)
or outside (deep) the row space of layer ``l``'s gate matrix, which is the
only part of the noise that can reorder that layer's routing ranks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import GateTrace, ModelConfig, TraceRecord, top_k_set
from .errors import DegenerateGen, InvalidConfig, MissingProbes, ZeroVector

# Fraction of chain-noise energy injected inside the consuming gate's row
# space, as a function of that layer's sharpness s: theta = min(1, A / s**B).
# Fitted so decode prediction recall spans roughly 0.5 in the most diffuse
# layers to above 0.95 in the most decisive ones at the default similarity.
THETA_COEF = 0.13
THETA_EXP = 2.7


def default_sharpness(num_layers: int, temp_shallow: float = 2.0, temp_deep: float = 0.5) -> tuple[float, ...]:
    """Per-layer sharpness from a linearly decreasing temperature schedule."""
    if num_layers == 1:
        return (1.0 / temp_shallow,)
    temps = np.linspace(temp_shallow, temp_deep, num_layers)
    return tuple(1.0 / t for t in temps)


@dataclass(frozen=True)
class GenConfig:
    """Knobs for synthetic trace generation.

    ``rho_adjacent`` targets the cosine similarity between the gate inputs of
    adjacent blocks; ``rho_within`` targets attention-input vs gate-input
    similarity inside one block and defaults to ``sqrt(rho_adjacent)``, which
    splits the block-to-block drift evenly across the two half-steps.
    ``layer_sharpness`` is the per-layer gate sharpness (inverse temperature);
    by default temperature falls linearly with depth so shallow layers route
    diffusely and deep layers decisively.
    """

    rho_adjacent: float = 0.888
    rho_within: float | None = None
    layer_sharpness: tuple[float, ...] | None = None
    seed: int = 0
    num_tokens: int = 64
    phase: str = "decoding"

    def resolved_rho_within(self) -> float:
        return float(np.sqrt(self.rho_adjacent)) if self.rho_within is None else self.rho_within

    def resolved_sharpness(self, num_layers: int) -> tuple[float, ...]:
        if self.layer_sharpness is None:
            return default_sharpness(num_layers)
        if len(self.layer_sharpness) != num_layers:
            raise InvalidConfig(
                f"layer_sharpness has {len(self.layer_sharpness)} entries, "
                f"expected {num_layers}"
            )
        return tuple(self.layer_sharpness)


@dataclass(frozen=True)
class GateWeights:
    """Per-layer gate matrices plus the temperature schedule they were sampled with."""

    matrices: tuple[np.ndarray, ...]
    temperatures: tuple[float, ...]

    def __post_init__(self):
        mats = []
        for m in self.matrices:
            a = np.asarray(m, dtype=np.float64)
            if not np.all(np.isfinite(a)):
                raise InvalidConfig("gate weight matrix has non-finite entries")
            a.flags.writeable = False
            mats.append(a)
        object.__setattr__(self, "matrices", tuple(mats))
        object.__setattr__(self, "temperatures", tuple(float(t) for t in self.temperatures))
        if len(self.matrices) != len(self.temperatures):
            raise InvalidConfig("one temperature per gate matrix required")
        if any(t <= 0 for t in self.temperatures):
            raise InvalidConfig("temperatures must be > 0")

    @property
    def num_layers(self) -> int:
        return len(self.matrices)


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def gate_forward(w: GateWeights, layer: int, hidden: np.ndarray) -> np.ndarray:
    """Routing distribution softmax(W_l h / tau_l); sums to 1, all entries > 0."""
    h = np.asarray(hidden, dtype=np.float64)
    mat = w.matrices[layer]
    if h.shape[0] != mat.shape[1]:
        raise InvalidConfig(
            f"hidden vector has dim {h.shape[0]}, gate expects {mat.shape[1]}"
        )
    if not np.all(np.isfinite(h)):
        raise InvalidConfig("hidden vector has non-finite entries")
    return softmax(mat @ h / w.temperatures[layer])


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidConfig(f"vector shapes differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    return float(np.dot(a, b) / (na * nb))


def noise_fraction_in_gate_space(sharpness: float) -> float:
    return min(1.0, THETA_COEF / sharpness**THETA_EXP)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _steered_step(
    h: np.ndarray,
    rho: float,
    basis: np.ndarray,
    theta: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """One chain step: new state at cosine exactly ``rho`` from ``h``.

    The noise direction is drawn with fraction ``theta`` of its energy inside
    the column span of ``basis`` (the consuming gate's row space) and then
    orthogonalized against ``h`` so the per-pair cosine is exact.
    """
    if rho >= 1.0:
        return h
    d = h.shape[0]
    g_in = basis @ rng.standard_normal(basis.shape[1])
    g_out = rng.standard_normal(d)
    g_out -= basis @ (basis.T @ g_out)
    g = np.sqrt(theta) * _unit(g_in) + np.sqrt(1.0 - theta) * _unit(g_out)
    g -= np.dot(g, h) * h
    g = _unit(g)
    return rho * h + np.sqrt(1.0 - rho * rho) * g


def gen_trace(
    cfg: ModelConfig, gen: GenConfig, weights: GateWeights | None = None
) -> tuple[GateTrace, GateWeights]:
    """Generate a synthetic trace with per-record probes, weights, and chosen sets.

    Deterministic for a given (cfg, gen); the same seed yields byte-identical
    traces. Gate matrices are sampled i.i.d. Gaussian once per trace, or
    reused when ``weights`` is passed (e.g. a prefill trace routed through the
    same gates as a decode trace).
    """
    if not (0.0 < gen.rho_adjacent <= 1.0):
        raise InvalidConfig("rho_adjacent must lie in (0, 1]")
    rho_within = gen.resolved_rho_within()
    if not (0.0 < rho_within <= 1.0):
        raise InvalidConfig("rho_within must lie in (0, 1]")
    if rho_within < gen.rho_adjacent - 1e-12:
        raise DegenerateGen(
            f"rho_within={rho_within:.4f} < rho_adjacent={gen.rho_adjacent:.4f}: "
            "the across-block step would need cosine > 1"
        )
    rho_across = min(1.0, gen.rho_adjacent / rho_within)
    if gen.num_tokens < 1:
        raise InvalidConfig("num_tokens must be >= 1")

    rng = np.random.default_rng(gen.seed)
    d, n_exp, n_lay = cfg.hidden_dim, cfg.num_experts, cfg.num_layers
    if weights is None:
        sharpness = gen.resolved_sharpness(n_lay)
        if any(s <= 0 for s in sharpness):
            raise InvalidConfig("sharpness values must be > 0")
        matrices = tuple(rng.standard_normal((n_exp, d)) for _ in range(n_lay))
        weights = GateWeights(matrices=matrices, temperatures=tuple(1.0 / s for s in sharpness))
    else:
        if weights.num_layers != n_lay or weights.matrices[0].shape != (n_exp, d):
            raise InvalidConfig("provided gate weights do not match the model geometry")
        sharpness = tuple(1.0 / t for t in weights.temperatures)
        matrices = weights.matrices

    # Orthonormal basis of each gate's row space, for noise steering. With
    # hidden_dim <= num_experts the rows span everything and steering is moot.
    bases = []
    for m in matrices:
        q, _ = np.linalg.qr(m.T)
        bases.append(q[:, : min(n_exp, d)])
    thetas = [noise_fraction_in_gate_space(s) for s in sharpness]

    records = []
    for tok in range(gen.num_tokens):
        attn_in = _unit(rng.standard_normal(d))
        for layer in range(n_lay):
            gate_in = _steered_step(attn_in, rho_within, bases[layer], thetas[layer], rng)
            nxt = min(layer + 1, n_lay - 1)
            attn_in_next = _steered_step(gate_in, rho_across, bases[nxt], thetas[nxt], rng)
            routing = gate_forward(weights, layer, gate_in)
            records.append(
                TraceRecord(
                    token_index=tok,
                    layer=layer,
                    chosen=top_k_set(routing, cfg.top_k),
                    routing_weights=routing,
                    probe_hidden={
                        "attn_in_next": attn_in_next,
                        "gate_in_cur": gate_in,
                        "attn_in_cur": attn_in,
                    },
                )
            )
            attn_in = attn_in_next

    trace = GateTrace(records=tuple(records), phase=gen.phase, provenance="synthetic")
    return trace, weights


@dataclass(frozen=True)
class ProbeStudyRow:
    position: int
    probe_key: str
    mean_similarity: float
    pairs: int


def probe_similarity_study(trace: GateTrace) -> tuple[ProbeStudyRow, ...]:
    """Mean cosine similarity of each probe position against the next block's gate input.

    Position 1 is the next block's attention input, position 2 the current
    gate input, position 3 the current attention input; averaged over every
    (token, adjacent-layer) pair.
    """
    by_token = trace.by_token()
    key_for_position = {1: "attn_in_next", 2: "gate_in_cur", 3: "attn_in_cur"}
    sums = {p: 0.0 for p in key_for_position}
    pairs = 0
    for layers in by_token.values():
        for layer, rec in layers.items():
            nxt = layers.get(layer + 1)
            if nxt is None:
                continue
            if rec.probe_hidden is None or nxt.probe_hidden is None:
                raise MissingProbes("trace records lack probe hidden states")
            if any(k not in rec.probe_hidden for k in key_for_position.values()):
                raise MissingProbes("trace records lack one or more probe positions")
            target = nxt.probe_hidden.get("gate_in_cur")
            if target is None:
                raise MissingProbes("next-layer record lacks gate_in_cur probe")
            for pos, key in key_for_position.items():
                sums[pos] += cosine_similarity(rec.probe_hidden[key], target)
            pairs += 1
    if pairs == 0:
        raise MissingProbes("no adjacent-layer pairs in trace")
    return tuple(
        ProbeStudyRow(
            position=pos,
            probe_key=key_for_position[pos],
            mean_similarity=sums[pos] / pairs,
            pairs=pairs,
        )
        for pos in (1, 2, 3)
    )
