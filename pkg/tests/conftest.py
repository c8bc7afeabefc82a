import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from laneattn import synthetic  # noqa: E402


@pytest.fixture(scope="session")
def tiny_dataset():
    return synthetic.generate_synthetic(synthetic.GeneratorConfig.preset("tiny"), 0)


@pytest.fixture(scope="session")
def small_dataset():
    start = time.perf_counter()
    data = synthetic.generate_synthetic(synthetic.GeneratorConfig.preset("small"), 0)
    data.generation_seconds = time.perf_counter() - start
    return data
