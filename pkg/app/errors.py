"""
Error hierarchy for the thermography toolkit.

Every class carries the CLI exit code of its failure class so the command
surface can map any raised error to the documented table:

    0 ok | 1 unexpected | 2 format/schema | 3 numeric | 4 transport/protocol
    5 bench failure rate above budget
"""
from typing import Any, List, Optional


class AirtError(Exception):
    """Base class for all toolkit errors."""
    exit_code = 1


class FormatError(AirtError):
    """Malformed file bytes. `offset` is the byte offset of the problem."""
    exit_code = 2

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(FormatError):
    """Schema violation in a JSON document, located by a JSON pointer."""

    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer or "/"


class NumericError(AirtError):
    exit_code = 3


class StabilityError(NumericError):
    """Requested time step violates the explicit-scheme stability bound."""

    def __init__(self, dt: float, max_dt: float):
        super().__init__(
            f"time step {dt:.6g} s exceeds the FTCS stability limit; "
            f"maximum admissible dt is {max_dt:.6g} s"
        )
        self.dt = dt
        self.max_dt = max_dt


class DivergenceError(NumericError):
    def __init__(self, message: str, epoch: int):
        super().__init__(f"training diverged at epoch {epoch}: {message}")
        self.epoch = epoch


class DegenerateRegionError(NumericError):
    pass


class NoStructureError(NumericError):
    pass


class TransportError(AirtError):
    exit_code = 4


class ProtocolError(TransportError):
    """Backend answered, but the answer breaks the wire contract."""

    def __init__(self, message: str, payload: Any = None):
        super().__init__(f"{message}; payload={payload!r}")
        self.payload = payload


class EnsembleError(TransportError):
    """Every per-image detection of an ensemble failed."""

    def __init__(self, errors: List[Exception]):
        summary = "; ".join(f"[{i}] {e}" for i, e in enumerate(errors))
        super().__init__(f"all {len(errors)} ensemble detections failed: {summary}")
        self.errors = errors
