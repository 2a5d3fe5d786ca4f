"""Exception hierarchy shared across rexnet modules.

Plain argument problems raise ``ValueError``; everything below signals a
failure that callers are expected to tell apart.
"""

from __future__ import annotations


class RexError(Exception):
    """Base class for rexnet-specific failures."""


class ParseError(RexError, ValueError):
    """Malformed line in a ratings file."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class RatingRangeError(ParseError):
    """Rating outside the accepted [0.5, 5.0] scale."""


class NumericError(RexError, ArithmeticError):
    """A training or merge step produced a non-finite or invalid value."""


class ProtocolError(RexError):
    """Peer sent something that violates the exchange protocol."""


class CodecError(ProtocolError):
    """Frame or payload bytes could not be decoded."""


class AuthenticationError(ProtocolError):
    """Sealed message failed AEAD verification."""


class ReplayError(ProtocolError):
    """Sealed message reused a counter that was already consumed."""


class AttestationError(ProtocolError):
    def __init__(self, reason: str):
        super().__init__(f"attestation rejected: {reason}")
        self.reason = reason


class ConfigError(RexError):
    """Invalid experiment or node configuration."""


class TransportError(RexError):
    """Delivery contract violated, or a peer became unreachable."""
