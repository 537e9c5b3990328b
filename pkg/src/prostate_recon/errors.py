"""Exception hierarchy shared by all pipeline stages.

Every error raised on purpose by the package derives from
:class:`ReconError`. The CLI maps :class:`InputError` subclasses to exit
code 1 and everything else to exit code 2.
"""


class ReconError(Exception):
    """Base class for all package errors."""


class InputError(ReconError):
    """Unreadable or unparseable input (IO / syntax level)."""


class DomainError(ReconError):
    """Input parsed but violates a domain rule."""


class _PathMixin:
    """Carries the dotted path of the offending document element."""

    def __init__(self, message, path=""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


# --- protocol ---------------------------------------------------------------

class ProtocolSyntaxError(_PathMixin, InputError):
    """Protocol document is not well-formed JSON."""


class SchemaError(_PathMixin, DomainError):
    """Missing or unexpected keys, or wrong value types."""


class ValidationError(_PathMixin, DomainError):
    """A typed invariant (uniqueness, counts, ID grammar) is violated."""


# --- geometry ---------------------------------------------------------------

class FormatError(InputError):
    """Mesh file could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyMeshError(DomainError):
    pass


class OpenMeshError(DomainError):
    pass


class SingularTransformError(DomainError):
    pass


class DegenerateError(DomainError):
    pass


class ArgumentError(DomainError, ValueError):
    pass


class OpenLoopError(DomainError):
    pass


class NoIntersectionError(DomainError):
    pass


class ProtocolMeshMismatchError(DomainError):
    pass


# --- annotations ------------------------------------------------------------

class GeometryError(DomainError):
    pass


class MissingContourError(DomainError):
    pass


class MultipleContourError(DomainError):
    pass


class UnknownPolygonError(DomainError):
    pass


class DuplicateAssignmentError(DomainError):
    pass


class UnmappedFileError(DomainError):
    pass


class MissingAnnotationsError(DomainError):
    """No annotation files to register (strict mode)."""


# --- cli ----------------------------------------------------------------------

class ConfigError(DomainError):
    """Inconsistent or incomplete run configuration."""


# --- registration / reconstruction ------------------------------------------

class NonConvergenceError(DomainError):
    pass


class NoCandidateError(DomainError):
    pass


class InsufficientPointsError(DomainError):
    pass


class SelfIntersectionError(DomainError):
    pass
