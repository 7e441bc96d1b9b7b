"""Exception hierarchy shared across the package."""

from __future__ import annotations


class FusionProofError(Exception):
    """Base class for all errors raised by this package."""


class InvalidName(FusionProofError):
    """A function or task name contains a reserved character."""


class UnknownFunction(FusionProofError):
    """A referenced function does not appear in the fusion setup."""


class MalformedTraceID(FusionProofError):
    """A trace identifier does not have the expected four-part shape."""


class TamperedTraceID(FusionProofError):
    """A trace identifier's checksum does not match its contents."""


class SetupMismatch(FusionProofError):
    """A trace identifier was minted under a different fusion setup."""


class ParseError(FusionProofError):
    """A log line or serialized record cannot be parsed."""


class CycleDetected(FusionProofError):
    """An application's call graph contains a cycle."""


class InvalidAttack(FusionProofError):
    """An attack plan does not fit the application it targets."""


class UnknownCallee(FusionProofError):
    """A call edge points at a task that is not defined."""


class InvalidHexLeaf(FusionProofError):
    """A tree leaf is not a lowercase hexadecimal digest string."""


class StoreWriteFailed(FusionProofError):
    """The evidence store rejected a write."""


class NotFound(FusionProofError):
    """The evidence store has no object under the requested key."""


class CorruptGroupFile(FusionProofError):
    """A stored group file does not decode to records plus tree info."""


class NoVerifiedData(FusionProofError):
    """Verification left no usable measurements for an iteration."""


class MissingMetric(FusionProofError):
    """Cost estimation needs a measurement that was never observed."""
