"""Exception types shared across the package."""


class DataError(Exception):
    """Dataset, manifest or raster file problems (CLI exit code 2)."""


class NumericalError(Exception):
    """Non-finite losses or failed gradient checks (CLI exit code 3)."""
