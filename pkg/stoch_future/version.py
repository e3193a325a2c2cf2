"""Version information for Stoch-Future"""

__version__ = "1.0.0"
__author__ = "Mark Oldham"
__compile_date__ = "2026-10-18"
