"""Exception hierarchy shared by every s3kit module."""


class S3KitError(Exception):
    """Base class for all errors raised by s3kit."""


class MalformedRle(S3KitError, ValueError):
    pass


class SizeMismatch(S3KitError, ValueError):
    pass


class EmptyMask(S3KitError, ValueError):
    pass


class ParseError(S3KitError, ValueError):
    pass


class SchemaError(S3KitError, ValueError):
    """Annotation content violates the schema; ``path`` points at the record."""

    def __init__(self, message, path=""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class EmptyDataset(S3KitError, ValueError):
    pass


class ShapeMismatch(S3KitError, ValueError):
    pass


class ZeroVector(S3KitError, ValueError):
    pass


class EmptyMaskRegion(ZeroVector):
    """The instance mask selects no feature cell at some pyramid level."""


class NonFiniteValue(S3KitError, ArithmeticError):
    pass


class BadTarget(S3KitError, ValueError):
    pass


class SingularAngle(S3KitError, ArithmeticError):
    pass


class DivergedLoss(S3KitError, ArithmeticError):
    pass


class ConfigError(S3KitError, ValueError):
    pass


class VersionMismatch(S3KitError, ValueError):
    pass


class TruncatedFile(S3KitError, OSError):
    """A binary container ended before its declared payload."""
