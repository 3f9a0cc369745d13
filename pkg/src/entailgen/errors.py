"""Exception hierarchy shared across the toolkit.

Every error raised on purpose derives from :class:`EntailgenError` so callers
(and the command line driver) can separate our failures from genuine bugs.
"""


class EntailgenError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(EntailgenError, ValueError):
    """Invalid or inconsistent configuration (bad variant name, dim mismatch
    between a checkpoint and a config, unknown CLI setting)."""


class ContractError(EntailgenError, ValueError):
    """A documented precondition was violated (empty corpus, backward on a
    non-scalar, operating on a finalized graph)."""


class DimensionError(EntailgenError, ValueError):
    """Tensor shapes incompatible for the requested operation."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {' vs '.join(map(str, self.shapes))}")


class DataError(EntailgenError, ValueError):
    """Bad data content: unresolvable image ids, non-finite feature values,
    malformed records."""


class FormatError(EntailgenError, ValueError):
    """Malformed binary or text file. Carries the byte offset at which
    parsing failed whenever one is known."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class DesignError(EntailgenError, ValueError):
    """Human-evaluation design cannot be built (divisibility constraints)."""


class UndefinedCorrelationError(EntailgenError, ValueError):
    """Pearson correlation requested on data with zero variance."""
