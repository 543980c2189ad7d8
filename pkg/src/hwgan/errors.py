"""Exception types shared across the package."""


class HwganError(Exception):
    pass


class InvalidInputError(HwganError, ValueError):
    pass


class DegenerateGeometryError(HwganError, ValueError):
    pass


class ContractError(HwganError, ValueError):
    """A precondition of an operation was violated by its caller."""


class ShapeError(ContractError):
    pass


class InvalidConfigError(HwganError, ValueError):
    pass


class ParseError(HwganError, ValueError):
    pass


class TrainingDivergenceError(HwganError, RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class CorruptCheckpointError(HwganError, ValueError):
    pass


class UnsupportedVersionError(CorruptCheckpointError):
    pass
