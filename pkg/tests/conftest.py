import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # makes `oracles` importable

from signet import data


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small 2-class corpus at full frame size, for loader and CLI tests."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    data.generate_synthetic(str(root), num_classes=2, clips_per_class=7, frames=12, seed=11)
    return str(root)
