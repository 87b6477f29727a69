"""Group-wise affine quantization and popularity-aware bit-width assignment.

Experts are quantized per group with a min/max affine map and round-to-
nearest-even codes. The simulator consumes only bytes-per-expert and the
resulting transfer/dequant times, so any group-wise scheme with the same byte
footprint is interchangeable here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .core import ModelConfig
from .errors import CorruptCodes, InvalidConfig, NoFeasibleP

SUPPORTED_BITS = (8, 4, 2)

#: Grid step for the INT2-fraction search.
P_GRID_STEP = 0.05

#: Default slope of the proxy accuracy evaluator: maps INT2 token coverage to
#: accuracy loss so that coverage 0.15 costs about 0.01.
PROXY_LOSS_PER_COVERAGE = 0.01 / 0.15


def _pack(codes: np.ndarray, bits: int) -> np.ndarray:
    per_byte = 8 // bits
    n = codes.shape[0]
    padded = np.zeros(math.ceil(n / per_byte) * per_byte, dtype=np.uint8)
    padded[:n] = codes
    padded = padded.reshape(-1, per_byte)
    out = np.zeros(padded.shape[0], dtype=np.uint8)
    for i in range(per_byte):
        out |= padded[:, i] << (i * bits)
    return out


def _unpack(packed: np.ndarray, bits: int, n: int) -> np.ndarray:
    per_byte = 8 // bits
    mask = (1 << bits) - 1
    out = np.zeros(packed.shape[0] * per_byte, dtype=np.uint8)
    for i in range(per_byte):
        out[i::per_byte] = (packed >> (i * bits)) & mask
    return out[:n]


@dataclass(frozen=True)
class QuantizedTensor:
    """Packed integer codes plus per-group affine parameters."""

    bits: int
    group_size: int
    codes: np.ndarray
    scales: np.ndarray
    zeros: np.ndarray
    original_shape: tuple[int, ...]

    @property
    def n_elements(self) -> int:
        return int(np.prod(self.original_shape))


def quantize(weights: np.ndarray, bits: int, group_size: int = 64) -> QuantizedTensor:
    """Per-group min/max affine quantization with round-to-nearest-even codes.

    Groups tile the flattened tensor; the last group may be short. A constant
    group stores scale 0, zero point equal to the value, and all-zero codes.
    """
    if bits not in SUPPORTED_BITS:
        raise InvalidConfig(f"bits must be one of {SUPPORTED_BITS}, got {bits}")
    if group_size < 1:
        raise InvalidConfig("group_size must be >= 1")
    flat = np.asarray(weights, dtype=np.float64).reshape(-1)
    n = flat.shape[0]
    n_groups = max(1, math.ceil(n / group_size))
    levels = (1 << bits) - 1

    scales = np.zeros(n_groups)
    zeros = np.zeros(n_groups)
    codes = np.zeros(n, dtype=np.uint8)
    for g in range(n_groups):
        lo, hi = g * group_size, min((g + 1) * group_size, n)
        chunk = flat[lo:hi]
        if chunk.size == 0:
            continue
        mn, mx = float(chunk.min()), float(chunk.max())
        zeros[g] = mn
        if mx == mn:
            scales[g] = 0.0
            continue
        scale = (mx - mn) / levels
        scales[g] = scale
        q = np.rint((chunk - mn) / scale)
        codes[lo:hi] = np.clip(q, 0, levels).astype(np.uint8)

    return QuantizedTensor(
        bits=bits,
        group_size=group_size,
        codes=_pack(codes, bits),
        scales=scales,
        zeros=zeros,
        original_shape=tuple(np.asarray(weights).shape),
    )


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Reconstruct the tensor; deterministic, error bounded by scale/2 per element."""
    n = q.n_elements
    codes = _unpack(np.asarray(q.codes, dtype=np.uint8), q.bits, n).astype(np.float64)
    if codes.size and codes.max() >= (1 << q.bits):
        raise CorruptCodes(f"code {int(codes.max())} out of range for {q.bits}-bit tensor")
    out = np.empty(n)
    for g in range(q.scales.shape[0]):
        lo, hi = g * q.group_size, min((g + 1) * q.group_size, n)
        out[lo:hi] = q.zeros[g] + codes[lo:hi] * q.scales[g]
    return out.reshape(q.original_shape)


@dataclass(frozen=True)
class PopularityProfile:
    """Per-layer expert popularity: token counts and the descending ordering."""

    layer: int
    counts: Mapping[int, int]
    ordering: tuple[int, ...]

    @classmethod
    def from_counts(cls, layer: int, counts: Mapping[int, int]) -> "PopularityProfile":
        kept = {int(e): int(c) for e, c in counts.items() if c > 0}
        ordering = tuple(sorted(kept, key=lambda e: (-kept[e], e)))
        return cls(layer=layer, counts=kept, ordering=ordering)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def active(self) -> tuple[int, ...]:
        return self.ordering


@dataclass(frozen=True)
class QuantPolicy:
    """How experts are quantized in caches and on the transfer channel.

    During prefill the ``p_int2`` least popular active experts move at INT2
    and the rest at INT4; during decoding every transfer uses ``decode_bits``.
    ``cache_bits`` sizes the resident expert slots.
    """

    p_int2: float = 0.25
    decode_bits: int = 4
    cache_bits: int = 4
    accuracy_tolerance: float = 0.01

    def __post_init__(self):
        if not (0.0 <= self.p_int2 <= 1.0):
            raise InvalidConfig("p_int2 must lie in [0, 1]")
        if self.decode_bits not in (2, 4, 8, 16):
            raise InvalidConfig("decode_bits must be one of 2, 4, 8, 16")
        if self.cache_bits not in (4, 16):
            raise InvalidConfig("cache_bits must be 4 or 16")


def int2_subset(profile: PopularityProfile, p_int2: float) -> tuple[int, ...]:
    """The floor(p * active) least popular active experts, deterministic order."""
    active = profile.active()
    m = math.floor(p_int2 * len(active))
    return tuple(active[len(active) - m :]) if m > 0 else ()


def assign_bits(
    profile: PopularityProfile, policy: QuantPolicy, phase: str
) -> dict[int, int]:
    """Bit-width per active expert for the given phase."""
    active = profile.active()
    if phase == "decoding":
        return {e: policy.decode_bits for e in active}
    if phase != "prefill":
        raise InvalidConfig(f"unknown phase {phase!r}")
    low = set(int2_subset(profile, policy.p_int2))
    return {e: (2 if e in low else 4) for e in active}


def token_coverage(profile: PopularityProfile, subset: Iterable[int]) -> float:
    """Fraction of token-expert assignments covered by the subset of experts."""
    subset = set(subset)
    unknown = subset - set(profile.counts)
    if unknown:
        raise InvalidConfig(f"subset contains inactive experts {sorted(unknown)}")
    total = profile.total
    if total == 0:
        return 0.0
    return sum(profile.counts[e] for e in subset) / total


def proxy_evaluator(
    profile: PopularityProfile, loss_per_coverage: float = PROXY_LOSS_PER_COVERAGE
) -> Callable[[float], float]:
    """Default pluggable accuracy evaluator: loss proportional to INT2 token coverage."""

    def evaluate(p: float) -> float:
        return loss_per_coverage * token_coverage(profile, int2_subset(profile, p))

    return evaluate


def search_p(evaluator: Callable[[float], float], tolerance: float = 0.01) -> float:
    """Largest grid p whose whole prefix keeps accuracy loss within tolerance.

    Scans p = 0, 0.05, ..., 1 in order and stops at the first violation, so a
    non-monotone evaluator still yields a prefix-feasible maximum.
    """
    best = None
    steps = round(1.0 / P_GRID_STEP)
    for i in range(steps + 1):
        p = i * P_GRID_STEP
        if evaluator(p) <= tolerance:
            best = p
        else:
            break
    if best is None:
        raise NoFeasibleP(f"loss at p=0 already exceeds tolerance {tolerance}")
    return best


def lint_expert_bytes(
    cfg: ModelConfig, group_size: int = 64, tolerance: float = 0.05
) -> list[str]:
    """Check configured expert byte sizes against the packed-code formula.

    Parameters are inferred from the 16-bit size (2 bytes each); each group
    adds 8 bytes of scale/zero overhead. Returns one message per bit-width
    whose configured size strays more than ``tolerance`` from the formula.
    """
    n_params = cfg.expert_bytes[16] // 2
    n_groups = math.ceil(n_params / group_size)
    problems = []
    for bits in SUPPORTED_BITS:
        if bits not in cfg.expert_bytes:
            continue
        expected = math.ceil(n_params * bits / 8) + n_groups * 8
        got = cfg.expert_bytes[bits]
        if abs(got - expected) > tolerance * expected:
            problems.append(
                f"expert_bytes[{bits}]={got} deviates more than {tolerance:.0%} "
                f"from packed size {expected}"
            )
    return problems
