"""Publication-style figures from the flow lab's CSV tables and report."""

__version__ = "0.1.0"

from .figures import FigureError, FigureSpec, render  # noqa: F401
