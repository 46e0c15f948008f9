"""Exception types shared across the package."""


class RankVqaError(Exception):
    pass


class DimensionError(RankVqaError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(RankVqaError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(RankVqaError, ValueError):
    """Invalid structural or hyperparameter configuration."""


class NumericError(RankVqaError, ArithmeticError):
    pass


class ParseError(RankVqaError, ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class GenerationError(RankVqaError, RuntimeError):
    pass
