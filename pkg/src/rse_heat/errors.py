"""Exception types shared across the package."""


class ConformityError(ValueError):
    """A field does not match the grid it is used with."""


class ConfigurationError(ValueError):
    """Invalid parameters for an operation or experiment."""


class StatisticsError(ValueError):
    """Samples are unusable for the requested statistic (e.g. zero variance)."""


class BlowUpError(RuntimeError):
    """A trajectory left the admissible range (non-finite or ``|u| > 1e6``)."""

    def __init__(self, message, env_index=None, noise_index=None, step=None):
        super().__init__(message)
        self.env_index = env_index
        self.noise_index = noise_index
        self.step = step


class StaleInputError(RuntimeError):
    """Stored simulation outputs do not match the current configuration."""


class DivergenceCheckError(RuntimeError):
    """A drift field failed the weighted divergence-free check."""


class IllConditionedWarning(RuntimeWarning):
    """Gram matrix too ill-conditioned; a truncated-spectrum solve was used."""
