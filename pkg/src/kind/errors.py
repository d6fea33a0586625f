"""Exception taxonomy shared by all modules.

Contract violations (bad arguments, malformed files, impossible configs) map
to exit code 2 in the CLI; numerical failures (divergence, singular solves)
map to exit code 3.
"""


class KindError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(KindError):
    """A precondition on an operation's inputs was violated."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class ConfigError(ContractError):
    """A configuration value violates its invariants."""


class UnsupportedRegimeError(ContractError):
    """Parameters outside the regime the implementation handles."""


class NumericalError(KindError):
    """A computation failed numerically."""


class SimulationDiverged(NumericalError):
    """Integrator state became non-finite."""

    def __init__(self, step_index: int):
        self.step_index = step_index
        super().__init__(f"simulation diverged at internal step {step_index}")


class SingularOperatorError(NumericalError):
    """A least-squares system was rank deficient."""
