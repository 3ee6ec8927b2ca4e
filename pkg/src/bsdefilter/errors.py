"""Exception hierarchy shared by all modules."""


class FilterError(Exception):
    """Base class for all errors raised by :mod:`bsdefilter`."""


class DomainError(FilterError, ValueError):
    """Non-finite or otherwise invalid numerical input."""


class EllipticityError(FilterError):
    """The diffusion matrix ``a = sigma sigma^T`` is singular."""


class DivergenceError(FilterError):
    """A simulated path or rollout produced non-finite values."""

    def __init__(self, message, step=None, sample=None):
        super().__init__(message)
        self.step = step
        self.sample = sample


class ShapeError(FilterError, ValueError):
    pass


class DecodeError(FilterError):
    """Malformed, truncated or version-mismatched binary stream."""


class DegenerateError(FilterError):
    """Zero normalization mass, all-zero particle weights and similar."""


class ConfigError(FilterError):
    pass


class MissingArtifactError(FilterError):
    pass
