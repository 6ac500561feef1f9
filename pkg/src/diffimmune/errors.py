"""Exception types shared across the package.

The CLI maps these onto process exit codes: validation problems exit 1,
numerical failures exit 2, I/O failures exit 3.
"""


class ValidationError(ValueError):
    """Bad inputs: malformed configs, violated preconditions, schema mismatches."""


class NumericalError(ArithmeticError):
    """Non-finite values or other numerical breakdown during a computation."""


class SeparabilityError(ValidationError):
    """Probe classifier could not reach its required held-out accuracy."""
