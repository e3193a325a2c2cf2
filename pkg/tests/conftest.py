"""Shared fixtures"""

import pytest

from stoch_future import tensorcore as tc


@pytest.fixture(autouse=True)
def reset_precision():
    """Model builders switch the global precision; restore 64-bit after each test"""
    tc.set_precision(64)
    yield
    tc.set_precision(64)
