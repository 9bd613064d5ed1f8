"""Exception types shared across the package."""


class NumericalError(RuntimeError):
    """A linear-algebra or floating-point operation failed beyond recovery."""


class FormatError(ValueError):
    """An input file does not conform to the expected on-disk format."""


class DimensionError(ValueError):
    """Array shapes or sizes are inconsistent with an operation's contract."""
