"""Exception hierarchy shared across the package.

ContractError covers violated preconditions and malformed inputs; the CLI
maps it to exit code 2. I/O problems use the built-in OSError family and
map to exit code 3.
"""


class ContractError(ValueError):
    """A documented precondition or contract was violated."""


class ShapeError(ContractError):
    """Operand shapes are incompatible for the requested operation."""


class CapacityError(ContractError):
    """Input exceeds a configured capacity (e.g. positional table size)."""


class NumericError(ContractError):
    """Non-finite values appeared where finite ones are required."""
