"""Exception hierarchy shared across the toolkit."""


class ProtoRbfError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(ProtoRbfError):
    """Invalid input data, parameters, or violated preconditions."""


class StageOrderError(ValidationError):
    """A pipeline stage was invoked before its predecessors completed."""

    def __init__(self, stage: str, missing: str):
        self.stage = stage
        self.missing = missing
        super().__init__(
            f"stage '{stage}' requires stage '{missing}' to be completed first"
        )


class InsufficientPoolError(ValidationError):
    """A class does not have enough accepted segments for prototype selection.

    ``shortfalls`` maps class name -> (have, need).
    """

    def __init__(self, shortfalls: dict):
        self.shortfalls = shortfalls
        parts = [
            f"class '{name}' has {have} accepted segments, needs {need} "
            f"(short {need - have})"
            for name, (have, need) in sorted(shortfalls.items())
        ]
        super().__init__("insufficient concept pool: " + "; ".join(parts))


class StoreFormatError(ValidationError):
    """Base class for on-disk format violations."""


class BadMagicError(StoreFormatError):
    """File does not start with the expected magic bytes."""


class VersionMismatchError(StoreFormatError):
    """File carries an unsupported format version."""


class TruncatedPayloadError(StoreFormatError):
    """File payload is shorter (or longer) than the header promises."""


class IndexMismatchError(StoreFormatError):
    """Sidecar index disagrees with the payload row count."""
