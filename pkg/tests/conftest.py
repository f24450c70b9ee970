import pytest

from archless import datagen

SMALL = datagen.ScaleConfig(warehouses=2, customers=30, orders=30, items=100)


@pytest.fixture(scope="session")
def small_dataset():
    return datagen.cached_dataset(SMALL)


@pytest.fixture(scope="session")
def test_dataset():
    return datagen.cached_dataset(datagen.PROFILES["test"])


@pytest.fixture
def small_partitions(small_dataset):
    return datagen.build_partitions(small_dataset)
