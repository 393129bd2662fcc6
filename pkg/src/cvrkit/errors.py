"""Exception types shared across the engine."""

from __future__ import annotations


class CvrkitError(Exception):
    """Base class for all engine errors."""


class ZeroVectorError(CvrkitError):
    """Vector has (near-)zero L2 norm and cannot be normalized or scored."""


class DimMismatchError(CvrkitError):
    """Embedding dimensions disagree."""


class NonFiniteError(CvrkitError):
    """Vector contains NaN or Inf."""


class EmptySequenceError(CvrkitError):
    """An operation received an empty sequence."""


class DuplicateIdError(CvrkitError):
    """A clip id occurs more than once."""


class EmptyGalleryError(CvrkitError):
    """Gallery construction received no entries."""


class MissingEmbeddingError(CvrkitError):
    """A required embedding (or embedding set) is not available."""


class UnsupportedStrategyError(CvrkitError):
    """The strategy cannot be resolved in this context."""


class ProviderUnavailableError(CvrkitError):
    """A provider call failed after bounded retries."""


class MalformedResponseError(CvrkitError):
    """A provider returned a response that does not match its schema."""


class EmptyResponseError(CvrkitError):
    """A provider returned an empty payload where text was required."""


class MissingNarrationError(CvrkitError):
    """No narration table entry for the requested clip."""


class InvalidSpanError(CvrkitError):
    """A clip's [start_s, end_s) span is invalid."""


class MissingTargetError(CvrkitError):
    """A query references a target clip that cannot be resolved."""


class MissingClipError(CvrkitError):
    """A manifest record references an unknown clip id."""


class ConfigError(CvrkitError):
    """Run configuration is invalid or references unresolvable paths."""


class FormatError(CvrkitError):
    """An on-disk artifact violates its file format."""

    def __init__(self, message: str, *, path: str | None = None,
                 line: int | None = None, offset: int | None = None):
        loc = []
        if path is not None:
            loc.append(str(path))
        if line is not None:
            loc.append(f"line {line}")
        if offset is not None:
            loc.append(f"offset {offset}")
        prefix = f"[{': '.join(loc)}] " if loc else ""
        super().__init__(prefix + message)
        self.path = path
        self.line = line
        self.offset = offset
