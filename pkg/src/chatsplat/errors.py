"""Exception types shared across the package."""


class ChatSplatError(Exception):
    """Base class for all package errors."""


class ImportError(ChatSplatError):  # noqa: A001 - intentional: scene-import failures
    """A required property or record is missing from an input file."""


class DataError(ChatSplatError):
    """Input data violates a numeric invariant (NaN/Inf, bad range)."""


class FormatError(ChatSplatError):
    """A binary container is malformed or truncated."""


class VersionError(ChatSplatError):
    """A container declares an unsupported version."""


class ConfigError(ChatSplatError):
    """Configuration is inconsistent with the data it is applied to."""


class ShapeError(ChatSplatError):
    """Array shapes do not match the operation's contract."""


class BoundsError(ChatSplatError):
    """A coordinate lies outside the valid image region."""


class StateError(ChatSplatError):
    """An operation was called before its required state was produced."""


class ArgError(ChatSplatError):
    """An argument value is unusable (empty list, impossible cap)."""


class ProxyError(ChatSplatError):
    """The external chat endpoint failed, timed out, or answered garbage."""

