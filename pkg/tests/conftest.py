import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pipebench.scenegen import DatasetConfig, generate_dataset  # noqa: E402


def tiny_config(**kw) -> DatasetConfig:
    base = dict(n_samples=260, n_eval=30, n_test=30, image_h=32, image_w=32, seed=3, margin=0.1)
    base.update(kw)
    return DatasetConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A 200/30/30 dataset of 32x32 images, shared read-only across tests."""
    root = tmp_path_factory.mktemp("tiny")
    return generate_dataset(tiny_config(), root)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for line in sorted(results):
            terminalreporter.write_line(line)
