"""Exception types raised by ivlab."""


class IvlabError(Exception):
    """Base class for all ivlab errors."""


class InvalidInputError(IvlabError, ValueError):
    """An input value is outside the domain of an operation (e.g. non-finite)."""


class EmptyDatasetError(IvlabError, ValueError):
    pass


class DimensionError(IvlabError, ValueError):
    """Shapes of weights, data or environment lists do not agree."""


class UnsupportedClosedFormError(IvlabError, ValueError):
    """No closed form exists for the requested quantity under this loss/task."""


class DivergenceError(IvlabError, FloatingPointError):
    pass
