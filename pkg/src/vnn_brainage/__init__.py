"""coVariance neural networks for brain-age estimation with dimension-free transfer."""

from .errors import DataError, NumericalError

__version__ = "0.1.0"

__all__ = ["DataError", "NumericalError", "__version__"]
