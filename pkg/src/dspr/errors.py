"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or infinity."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class ConfigError(ValueError):
    pass


class ParseError(ValueError):
    pass


class SchemaError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    pass
