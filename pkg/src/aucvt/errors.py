"""Exception hierarchy shared across the package."""


class AucvtError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(AucvtError, ValueError):
    """Tensor dimensions do not satisfy an operation's contract."""


class ContractError(AucvtError, RuntimeError):
    """A documented precondition was violated by the caller."""


class ConfigError(AucvtError, ValueError):
    """An invalid model or run configuration."""


class GeometryError(AucvtError, ValueError):
    """A facial-region box rasterizes to an empty cell range."""


class DecodeError(AucvtError, ValueError):
    """An image file could not be decoded as 8-bit RGB."""


class SchemaError(AucvtError, ValueError):
    """A CSV file is missing required columns or has a bad header."""


class ManifestError(AucvtError, ValueError):
    """A manifest row is malformed; message carries the row number."""

    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row
