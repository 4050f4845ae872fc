"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are not conformable."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class IterationLimitError(RuntimeError):
    """A fixed-point iteration failed to converge within its budget."""


class CheckpointError(ValueError):
    """A checkpoint or weights file does not match its schema.

    ``path`` names the offending field, e.g. ``blocks[3].W1``.
    """

    def __init__(self, message, path=""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class UnsupportedVersionError(CheckpointError):
    pass


class DegenerateBatchError(ValueError):
    """Every point of a batch sits where one of the fields vanishes."""


class NumericalError(RuntimeError):
    """Non-finite values or divergence during a computation."""
