import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from _benchmark import make_benchmark, write_benchmark_csv  # noqa: E402


@pytest.fixture(scope="session")
def benchmark_dataset():
    return make_benchmark()


@pytest.fixture(scope="session")
def benchmark_csv(tmp_path_factory, benchmark_dataset):
    path = tmp_path_factory.mktemp("data") / "benchmark.csv"
    write_benchmark_csv(path, benchmark_dataset)
    return path
