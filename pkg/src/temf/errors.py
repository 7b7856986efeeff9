"""Shared exception types, one per contract family."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """An input violates an operation's stated precondition."""


class ParseError(ValueError):
    """A file could not be parsed; message carries the line number."""


class VocabularyError(ValueError):
    """A label or token is outside the declared vocabulary."""
