from pathlib import Path

import pytest

GOLDEN_DIR = Path(__file__).parent / "golden"

LISTING1 = """def main():
    x = a()
    if x > 10:
        x = 0
        b()
"""


@pytest.fixture
def listing1() -> str:
    return LISTING1


@pytest.fixture
def golden_dir() -> Path:
    return GOLDEN_DIR


@pytest.fixture(autouse=True)
def clean_tape():
    from cpgtune import numerics as nm

    nm.reset_tape()
    yield
    nm.reset_tape()
