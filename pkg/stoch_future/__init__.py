"""Stoch-Future: Stochastic Future Prediction Models and Synthetic Benchmarks"""

from .version import __version__, __author__, __compile_date__

__all__ = ['__version__', '__author__', '__compile_date__']
