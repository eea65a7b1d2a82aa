"""Exception types shared across the engine.

Grouped so the CLI can map failures onto its exit-code contract:
configuration problems, data problems, and everything else.
"""


class ShieldError(Exception):
    """Base class for all engine errors."""


class ShapeError(ShieldError, ValueError):
    """Operands have incompatible, empty, or unsupported shapes."""


class DomainError(ShieldError, ValueError):
    """A value lies outside the operation's domain (e.g. a non-binary label)."""


class UsageError(ShieldError, RuntimeError):
    """An API was called in an unsupported way (e.g. backward on a non-scalar)."""


class ConfigError(ShieldError, ValueError):
    """Invalid or internally inconsistent configuration."""


class DataError(ShieldError, ValueError):
    """Dataset contents violate a precondition (e.g. unlabeled training sample)."""


class UndefinedMetricError(ShieldError, ValueError):
    """The requested metric is undefined for the given inputs."""


class DegenerateClassifierError(ShieldError, ValueError):
    """The verifier's bound is undefined because the classifier direction vanishes."""


class DumpError(ShieldError):
    """Base class for dump serialization errors."""


class DumpFormatError(DumpError):
    """Bad magic bytes, unsupported version, or an unparseable header."""


class DumpLengthError(DumpError):
    """Payload shorter or longer than the header promises."""


class DumpConsistencyError(DumpError):
    """Header fields disagree with each other or with the payload."""


class InvalidDumpError(DumpError):
    """A dump failed semantic validation; carries the violation list."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid dump: " + "; ".join(self.violations))
