# This work is marked with CC0 1.0 Universal.
# To view a copy of this license, visit https://creativecommons.org/publicdomain/zero/1.0/

class FewPointError(Exception):
    """Base class of every error raised by the fewpoint package."""

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class DimensionError(FewPointError):
    """Two operands have incompatible shapes."""

    def __init__(self, operation: str, *shapes: tuple[int, ...]):
        super().__init__(f"{operation}: incompatible shapes {' and '.join(map(str, shapes))}")
        self.shapes = shapes


class ContractError(FewPointError):
    """A precondition of an operation is not satisfied."""


class DegenerateInputError(FewPointError):
    """The input is empty or too small for the operation."""


class ParseError(FewPointError):
    def __init__(self, path: str, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.path = path
        self.line = line


class CapabilityError(FewPointError):
    """An operation without second-order support was met while building a differentiable gradient graph."""

    def __init__(self, op_name: str):
        super().__init__(f"operation '{op_name}' does not support second-order differentiation")
        self.op_name = op_name


class ConvergenceError(FewPointError):
    pass


class StageOrderError(FewPointError):
    pass


class CheckpointError(FewPointError):
    pass
