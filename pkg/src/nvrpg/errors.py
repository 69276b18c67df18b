class NumericError(ArithmeticError):
    """A non-finite or out-of-domain quantity appeared during a run.

    ``log`` carries the partial TrainLog when raised from inside a training loop.
    """

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log


class ISWeightBoundError(NumericError):
    """A realized importance weight exceeded its deterministic ceiling."""


class ConfigError(ValueError):
    pass
