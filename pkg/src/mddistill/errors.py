"""Exception types shared across the package."""


class MDDError(Exception):
    """Base class for all package errors."""


class DimensionError(MDDError, ValueError):
    pass


class ContractError(MDDError, ValueError):
    """A documented precondition was violated by the caller."""


class StateError(MDDError, RuntimeError):
    pass


class NumericError(MDDError, ArithmeticError):
    pass


class FormatError(MDDError, ValueError):
    """Malformed binary file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DegenerateSegmentError(MDDError, ValueError):
    """Expert did not move over the sampled segment; the matching loss is undefined."""


class DegenerateBufferError(MDDError, ValueError):
    pass
