"""Exception hierarchy shared by all modules.

Numerical failures derive from :class:`NumericalError` so the CLI can map
them to exit status 3; configuration problems derive from
:class:`ConfigError` (exit status 2).
"""


class SechypError(Exception):
    pass


class ConfigError(SechypError, ValueError):
    pass


class NumericalError(SechypError, ArithmeticError):
    pass


class BlowUp(NumericalError):
    pass


class StepSizeUnderflow(NumericalError):
    pass


class DegenerateFrame(NumericalError):
    pass


class SplitFail(NumericalError):
    pass


class CoverFail(NumericalError):
    pass


class NoReturn(NumericalError):
    def __init__(self, t_max, message=None):
        self.t_max = t_max
        super().__init__(message or f"no section crossing before t={t_max:g}")


class InsufficientRange(NumericalError):
    pass


class FoliationFail(NumericalError):
    pass


class ApertureExceeded(NumericalError):
    pass


class OutOfSection(NumericalError):
    pass


class SplitUnresolvable(NumericalError):
    pass


class Nontermination(NumericalError):
    def __init__(self, message, trace=None):
        self.trace = trace
        super().__init__(message)


class ConstantsInfeasible(NumericalError):
    pass


class NewtonFail(NumericalError):
    def __init__(self, message, best=None):
        self.best = best
        super().__init__(message)


class DensityLost(NumericalError):
    pass


class GridMiss(NumericalError):
    pass


class DictMismatch(SechypError, ValueError):
    pass


class EmptyBall(NumericalError):
    pass


class UndersampledWords(NumericalError):
    pass
