"""Exception types shared across modules."""


class NumericalError(RuntimeError):
    """A computation produced NaN/inf or could not make progress."""


class NonFiniteError(NumericalError):
    pass


class StepSizeUnderflow(NumericalError):
    pass


class NonFiniteInputError(NonFiniteError, ValueError):
    """NaN/inf among the inputs handed to a model."""
