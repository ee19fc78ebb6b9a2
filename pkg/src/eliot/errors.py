"""Exception types shared across the toolkit."""


class MalformedFileError(ValueError):
    """A file exists but its contents violate the expected binary/text layout."""


class PoseParseError(ValueError):
    """A pose or calibration text file failed to parse; carries the line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ShapeError(ValueError):
    """Operands with incompatible shapes; message names both shapes."""


class DegenerateTransformError(ValueError):
    """A (dual) quaternion too close to zero to define a rigid transform."""


class DegenerateGeometryError(RuntimeError):
    """Point geometry too poor to constrain a registration solve."""


class ConfigError(ValueError):
    """A run/network configuration is internally inconsistent."""


class UsageError(Exception):
    """Bad command-line usage; the CLI maps this to exit code 2."""
