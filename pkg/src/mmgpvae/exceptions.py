class ParameterDomainError(ValueError):
    """A model or kernel parameter lies outside its admissible range."""


class NumericDomainError(ValueError):
    """A variance or other numeric quantity is nonpositive where it must not be."""


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class SchemaError(ValueError):
    """A container file does not match the expected layout or version."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite objective.

    ``term`` names the offending ELBO component and ``epoch`` the epoch at
    which it was detected.
    """

    def __init__(self, message, term=None, epoch=None):
        super().__init__(message)
        self.term = term
        self.epoch = epoch
