"""Exception hierarchy shared by all modules."""


class TubeCbfError(Exception):
    """Base class for every error raised by the package."""


class ConfigurationError(TubeCbfError, ValueError):
    """Inconsistent dimensions, unknown keys or invalid parameter values."""


class NumericError(TubeCbfError, ArithmeticError):
    """A computation produced non-finite values."""


class SynthesisError(TubeCbfError):
    """Ancillary gains do not yield a Hurwitz closed loop."""


class NoSolutionError(TubeCbfError):
    """The Lyapunov equation has no positive-definite solution."""


class TubeInfeasibleError(TubeCbfError):
    """No admissible RPI radius exists for the given data.

    ``decay_margin`` is ``lambda_min(Q) / (2 lambda_max(P))`` and ``lipschitz``
    is the Lipschitz bound it has to exceed.
    """

    def __init__(self, message, decay_margin=None, lipschitz=None):
        super().__init__(message)
        self.decay_margin = decay_margin
        self.lipschitz = lipschitz

    @property
    def gap(self):
        if self.decay_margin is None or self.lipschitz is None:
            return None
        return self.decay_margin - self.lipschitz


class InfeasibleTighteningError(TubeCbfError):
    """Tightening a box by a tube leaves an empty interval."""


class SetupError(TubeCbfError):
    """An optimal control problem could not be assembled."""
