"""Exception hierarchy shared by every module."""


class HjbAdpError(Exception):
    pass


class ConfigurationError(HjbAdpError, ValueError):
    pass


class DimensionError(HjbAdpError, ValueError):
    pass


class ContractViolation(HjbAdpError, RuntimeError):
    pass


class SingularModelError(HjbAdpError, ValueError):
    pass


class DegenerateReferenceError(HjbAdpError, ValueError):
    pass


class ConditioningError(HjbAdpError, ArithmeticError):
    pass


class DegenerateNormalizationError(HjbAdpError, ArithmeticError):
    pass


class NumericalFailure(HjbAdpError, ArithmeticError):
    """Base for failures that map to CLI exit status 3."""


class TrainingDivergenceError(NumericalFailure):
    def __init__(self, message, checkpoint=None, iteration=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.iteration = iteration


class IntegrationBlowupError(NumericalFailure):
    pass
