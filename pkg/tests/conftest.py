from pathlib import Path

import pytest

from sqlkb.dataset import load_dataset
from sqlkb.retriever import EmbeddingProvider
from sqlkb.toy import generate_toy

GOLDEN_DIR = Path(__file__).parent / "goldens"


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory) -> Path:
    target = tmp_path_factory.mktemp("toy")
    return generate_toy(target)


@pytest.fixture(scope="session")
def train_ds(toy_dir):
    return load_dataset(toy_dir / "train.json", toy_dir / "databases")


@pytest.fixture(scope="session")
def test_ds(toy_dir):
    return load_dataset(toy_dir / "test.json", toy_dir / "databases", split="test")


@pytest.fixture()
def provider() -> EmbeddingProvider:
    return EmbeddingProvider(dim=256)


@pytest.fixture(scope="session")
def goldens() -> Path:
    return GOLDEN_DIR
