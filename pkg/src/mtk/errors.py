"""Exception hierarchy shared by every mtk module."""


class MtkError(Exception):
    """Base class for toolkit errors."""


class DimensionError(MtkError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(MtkError, ArithmeticError):
    """A computation produced or would produce a non-finite value."""


class ContractError(MtkError, ValueError):
    """A precondition of an operation was violated."""


class StaleReferenceError(ContractError):
    """A NodeRef outlived the graph generation it was created in."""


class ArenaExhaustedError(MtkError, MemoryError):
    """An allocation would exceed the arena's byte budget."""


class DataError(MtkError):
    """Malformed corpus, vocabulary, n-best or model file."""
