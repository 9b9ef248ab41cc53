import sys

import numpy as np
import pytest
from hypothesis import settings

from agbada.synthetic import make_corpus

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """40 generated 32x32 images (25 Female / 15 Male) with an index file."""
    root = tmp_path_factory.mktemp("corpus")
    image_dir, index_csv, rows = make_corpus(root, n=40, size=32, seed=3)
    return image_dir, index_csv, rows


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
