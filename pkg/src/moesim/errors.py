"""Exception hierarchy shared across the simulator.

Every error carries a short machine-parsable ``code`` so the service and CLI
can emit single-line diagnostics without string matching.
"""

from __future__ import annotations


class SimError(Exception):
    """Base class for all simulator errors."""

    code = "SIM_ERROR"

    def __init__(self, message: str, code: str | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code


class InvalidConfig(SimError):
    """A model, timing, policy, or experiment configuration violates an invariant."""

    code = "INVALID_CONFIG"


class TraceIOError(SimError):
    """A trace file could not be read or written."""

    code = "TRACE_IO"


class SchemaError(SimError):
    """A trace file parsed but contained a malformed or inconsistent record."""

    code = "TRACE_SCHEMA"


class TraceMismatch(SimError):
    """A trace's geometry does not match the model configuration it is used with."""

    code = "TRACE_MISMATCH"


class DegenerateGen(SimError):
    """Requested trace-generation similarity targets are mutually unsatisfiable."""

    code = "DEGENERATE_GEN"


class ZeroVector(SimError):
    """Cosine similarity requested against a zero vector."""

    code = "ZERO_VECTOR"


class MissingProbes(SimError):
    """A trace lacks the probe hidden states (or adjacent layers) a study needs."""

    code = "MISSING_PROBES"


class BudgetTooSmall(SimError):
    """Memory budget does not even cover the dense (non-expert) bytes."""

    code = "BUDGET_TOO_SMALL"


class NoAccesses(SimError):
    """Hit rate requested over zero recorded accesses."""

    code = "NO_ACCESSES"


class CorruptCodes(SimError):
    """A quantized tensor holds codes outside the representable range."""

    code = "CORRUPT_CODES"


class NoFeasibleP(SimError):
    """No grid point of the INT2-fraction search satisfies the loss tolerance."""

    code = "NO_FEASIBLE_P"
