"""Exception hierarchy shared by all modules.

Each class carries the CLI exit code it maps to.
"""


class HSMMVarError(Exception):
    exit_code = 1


class InputError(HSMMVarError, ValueError):
    """Malformed, inconsistent or out-of-domain input."""

    exit_code = 2


class NumericalError(HSMMVarError, ArithmeticError):
    """A numerical routine failed (non-finite density, singular system, ...)."""

    exit_code = 3


class DegenerateStateError(NumericalError):
    """A hidden state lost (almost) all of its posterior mass."""

    def __init__(self, msg, state=None):
        super().__init__(msg)
        self.state = state


class NonConvergenceError(HSMMVarError):
    exit_code = 4
