# src/core/errors.py

"""Exception hierarchy shared by every layer of the toolkit.

Each error also derives from the closest builtin so callers that only care
about the broad category (``ValueError``, ``ConnectionError``, ...) can keep
catching those.
"""

from typing import Optional


class MeshError(Exception):
    """Base class for all toolkit errors."""


class StructuralError(MeshError, ValueError):
    """Shapes, lengths or layouts do not agree."""


class NumericError(MeshError, ArithmeticError):
    """A value that must be finite is not."""

    def __init__(self, message: str, name: Optional[str] = None):
        super().__init__(message)
        self.name = name


class RangeError(MeshError, ValueError):
    """An argument lies outside its documented range."""


class DecodeError(MeshError, ValueError):
    """A wire buffer is truncated or malformed."""


class LinkError(MeshError, ConnectionError):
    """A link to a peer was refused or dropped."""

    def __init__(self, peer_id: Optional[str], message: str = ""):
        super().__init__(message or f"link to '{peer_id}' failed")
        self.peer_id = peer_id


class LinkTimeout(MeshError, TimeoutError):
    """No frame arrived from a peer within the allotted time."""

    def __init__(self, peer_id: Optional[str], timeout: Optional[float] = None):
        super().__init__(f"timed out after {timeout}s waiting on '{peer_id}'")
        self.peer_id = peer_id
        self.timeout = timeout


class KVTimeout(MeshError, TimeoutError):
    """A key-value wait expired before its predicate held."""


class CoordinatorError(MeshError, ConnectionError):
    """The coordinator could not be reached or was lost."""


class JoinRefused(MeshError):
    """The coordinator refused a registration."""


class TransferError(MeshError):
    """A checkpoint transfer failed integrity checks or ran out of donors."""


class RingFailure(MeshError):
    """A peer failed in the middle of a collective."""

    def __init__(self, failed_id: Optional[str], message: str = ""):
        super().__init__(message or f"ring failure at peer '{failed_id}'")
        self.failed_id = failed_id


class StalePlanError(MeshError):
    """A frame was tagged with a different job or epoch than expected."""


class FatalTrainingError(MeshError, RuntimeError):
    """Training cannot continue on this node."""


class ConfigError(MeshError, ValueError):
    """The run configuration is invalid."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class SimulationDeadlock(MeshError, RuntimeError):
    """The virtual clock has nothing scheduled and nothing runnable."""
