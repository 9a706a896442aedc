"""Exception hierarchy shared by every onionkey module."""

from __future__ import annotations

from typing import Iterable


class OnionKeyError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(OnionKeyError, ValueError):
    """An argument is outside its documented domain."""


class StateError(OnionKeyError):
    """An operation was applied to an object in the wrong state."""


class IncompleteSetError(OnionKeyError):
    """Reassembly was attempted without every fragment index present."""

    def __init__(self, missing: Iterable[int], total: int):
        self.missing = tuple(sorted(missing))
        self.total = total
        super().__init__(f"missing fragment indices {list(self.missing)} of {total}")


class ConflictError(OnionKeyError):
    """Two fragments disagree (same index, different payload or total)."""


class KeyFormatError(OnionKeyError, ValueError):
    """A public or private key could not be parsed."""


class DecryptionError(OnionKeyError):
    """Ciphertext failed to decrypt or authenticate."""


class SchemaError(OnionKeyError, ValueError):
    """A wire message does not match its schema."""

    def __init__(self, field: str, reason: str):
        self.field = field
        super().__init__(f"{field}: {reason}")


class NetworkError(OnionKeyError):
    """The relay network cannot satisfy a path-selection request."""


class RoutingError(OnionKeyError):
    """A message was addressed to an unknown destination."""


class TransportError(OnionKeyError):
    """Delivery over a transport failed."""


class ConfigurationError(OnionKeyError):
    """An actor or network was configured inconsistently."""


class ProtocolError(OnionKeyError):
    """A protocol message was semantically rejected by an actor."""


class TagnameReuseError(ProtocolError):
    """A tagname was presented after its session was issued or expired."""


class ParameterMismatchError(ProtocolError):
    """The two endpoints of one tagname asked for different key parameters."""
