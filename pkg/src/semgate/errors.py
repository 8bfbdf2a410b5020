"""Exception hierarchy shared by every semgate module."""


class SemGateError(Exception):
    """Base class. ``kind`` is a short machine-readable tag used by the CLI."""

    kind = "error"


class BehindCamera(SemGateError):
    kind = "behind camera"


class DegenerateGeometry(SemGateError):
    kind = "degenerate geometry"


class ParameterizationSingularity(SemGateError):
    kind = "parameterization singularity"


class EmptyHistogram(SemGateError):
    kind = "empty histogram"


class UnderconstrainedGraph(SemGateError):
    kind = "underconstrained graph"


class Diverged(SemGateError):
    kind = "diverged"


class UnknownGate(SemGateError, KeyError):
    kind = "unknown gate id"

    def __str__(self):
        return Exception.__str__(self)


class InvalidClassMix(SemGateError):
    kind = "invalid class mix"


class NoGps(SemGateError):
    kind = "no GPS in stream"


class SchemaVersionMismatch(SemGateError):
    kind = "schema version mismatch"


class InsufficientMatches(SemGateError):
    kind = "insufficient matches"


class TimestampMismatch(SemGateError):
    kind = "timestamp mismatch"


class ConfigParseError(SemGateError):
    kind = "config parse"


class PreconditionError(SemGateError, ValueError):
    kind = "precondition"


class OutputExists(SemGateError):
    kind = "io"


class IoError(SemGateError, OSError):
    kind = "io error"
