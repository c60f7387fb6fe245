"""Exception types shared across the package."""


class UnikdError(Exception):
    """Base class for all package errors."""


class UsageError(UnikdError, ValueError):
    """A function was called outside its contract."""


class ShapeError(UsageError):
    """Operand shapes are incompatible with an operation."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        listed = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {listed}")


class DomainError(UnikdError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class NonFiniteError(UnikdError, FloatingPointError):
    """A forward computation produced NaN or Inf."""

    def __init__(self, op, detail=""):
        self.op = op
        msg = f"non-finite value produced by '{op}'"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ConfigError(UnikdError, ValueError):
    """A configuration value failed validation."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class DataError(UnikdError):
    """Persisted data is malformed or corrupted."""


class ManifestError(DataError):
    """A dataset manifest is missing or has an invalid entry."""

    def __init__(self, key_path, message):
        self.key_path = key_path
        super().__init__(f"manifest {key_path}: {message}")


class ChecksumError(DataError):
    """A file's checksum does not match its manifest entry."""

    def __init__(self, filename, expected, actual):
        self.filename = filename
        super().__init__(f"{filename}: crc32 mismatch (expected {expected:08x}, got {actual:08x})")


class TruncatedFileError(DataError):
    """A binary file is shorter than its declared size."""

    def __init__(self, filename, expected, actual):
        self.filename = filename
        super().__init__(f"{filename}: expected {expected} bytes, found {actual}")
