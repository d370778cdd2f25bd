from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from compzsl.compspace import default_split  # noqa: E402
from compzsl.scenegen import DatasetSpec, build_dataset  # noqa: E402


@pytest.fixture(scope="session")
def split():
    return default_split()


@pytest.fixture(scope="session")
def space(split):
    return split.space


@pytest.fixture(scope="session")
def pretrain_ds(split):
    return build_dataset(split, DatasetSpec("pretrain", 10, sorted(split.pretrain), seed=0))


@pytest.fixture(scope="session")
def small_test_ds(split):
    return build_dataset(split, DatasetSpec("test", 8, list(range(len(split.space))), seed=1))
