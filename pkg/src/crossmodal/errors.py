"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called outside its precondition."""


class ShapeError(ContractError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A run configuration is invalid or incomplete."""


class DataError(ValueError):
    """Input data violates a domain invariant (e.g. class id out of range)."""


class GenerationError(RuntimeError):
    """Scene generation could not satisfy its constraints."""


class TrainingError(RuntimeError):
    """Training produced a non-finite or divergent loss."""
