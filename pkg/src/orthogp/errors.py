"""Exception types shared across the package.

Input/contract problems derive from ``ValueError`` so they surface as exit
code 2 in the CLI; numerical failures derive from ``ArithmeticError`` and map
to exit code 3.
"""


class ParameterError(ValueError):
    """A model or kernel parameter is outside its domain (e.g. nonpositive)."""


class GrammarError(ValueError):
    """Kernel grammar text failed to parse."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class ContractError(ValueError):
    """An operation was called outside its contract (e.g. missing data on a
    fully-observed-only path)."""


class ConditioningError(ArithmeticError):
    """A matrix could not be factorized even after jitter escalation."""


class RankError(ArithmeticError):
    """A matrix that must have full rank is (numerically) rank deficient."""


class ObservabilityError(ArithmeticError):
    """Too few observed outputs at some time stamp to identify the latent
    processes (needs at least as many observed outputs as latents)."""
