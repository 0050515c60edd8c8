"""Exception hierarchy shared by every ctxdesc module.

Validation failures also derive from ``ValueError`` so callers that only
guard against bad arguments keep working.
"""


class CtxDescError(Exception):
    """Base class for all ctxdesc errors."""


class DimensionError(CtxDescError, ValueError):
    """Operand shapes do not agree."""


class ContractError(CtxDescError, ValueError):
    """A documented precondition was violated."""


class SingularSystemError(CtxDescError, ValueError):
    """A linear system has no unique solution (degenerate configuration)."""


class PointAtInfinityError(CtxDescError, ValueError):
    """A projective warp sent a point to infinity."""


class InsufficientPairsError(CtxDescError, ValueError):
    """Too few matchable keypoints to form a ranking loss."""


class EmptyInputError(CtxDescError, ValueError):
    """An operation that needs at least one row received none."""


class SpecError(CtxDescError, ValueError):
    """A scene or run configuration is invalid."""


class FormatError(CtxDescError, ValueError):
    """A persisted file has the wrong magic or is truncated."""


class NumericalAbort(CtxDescError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path
