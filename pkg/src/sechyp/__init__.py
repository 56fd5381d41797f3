"""Numerical study of sectional-hyperbolic attracting sets for 3-flows."""

from .errors import ConfigError, NumericalError, SechypError

__all__ = ["ConfigError", "NumericalError", "SechypError"]
__version__ = "0.1.0"
