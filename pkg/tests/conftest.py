import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mmglab.dataeng import DatasetSpec, generate_synthetic, load_dataset  # noqa: E402
from mmglab.orchestrator.config import RunConfig  # noqa: E402

# criterion number -> PASS/FAIL line, filled in by test_acceptance.py
RESULTS: dict[int, str] = {}

TINY_SPEC = dict(num_base_classes=6, num_novel_classes=5, base_examples_per_class=16,
                 novel_examples_per_class=12, unlabeled_pool_size=48, seed=3)

TINY_CONFIG = {
    "model": {"d_model": 8, "encoder_depth": 1, "encoder_heads": 2, "fusion_depth": 1, "fusion_heads": 2,
              "mlp_ratio": 2},
    "train": {"batch_size": 16, "unimodal_epochs": 1, "multimodal_epochs": 1, "unsupervised_epochs": 2,
              "meta_episodes": 4},
    "eval": {"episodes": 4},
}


@pytest.fixture(scope="session")
def tiny_dir(tmp_path_factory):
    return generate_synthetic(DatasetSpec(**TINY_SPEC), tmp_path_factory.mktemp("tiny"))


@pytest.fixture
def tiny_data(tiny_dir):
    """A freshly loaded handle, so the access log starts empty."""
    return load_dataset(tiny_dir)


@pytest.fixture
def tiny_cfg():
    return RunConfig.from_dict(TINY_CONFIG)


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
