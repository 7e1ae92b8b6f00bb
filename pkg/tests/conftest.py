"""
Test configuration for quantmerge.
"""

import os

import numpy as np
import pandas as pd
import pytest

# Keep test runs independent of any local .env
os.environ["QUANTMERGE_LOG_LEVEL"] = "WARNING"
os.environ["QUANTMERGE_THREADS"] = "1"

from src.data import bilinear_regrid  # noqa: E402
from src.features import (  # noqa: E402
    FEATURE_COUNT,
    SampleTable,
    build_samples,
    split_folds,
)
from src.synthetic import SyntheticConfig, generate_synthetic  # noqa: E402


def make_samples(n, seed=0, zero_fraction=0.5, folds=True):
    """Random sample table whose target grows with the first feature."""
    rng = np.random.default_rng(seed)
    features = rng.uniform(0.0, 10.0, size=(n, FEATURE_COUNT))
    wet = rng.random(n) >= zero_fraction
    target = np.where(wet, features[:, 0] + rng.exponential(1.0, size=n), 0.0)
    table = SampleTable(
        features=features,
        target=target,
        station_id=np.array([f"S{i % 5:04d}" for i in range(n)]),
        date=np.datetime64("2014-01-01") + np.arange(n).astype("timedelta64[D]"),
    )
    if folds:
        table.fold_index = split_folds(n, 3, seed).fold_index
    return table


@pytest.fixture
def rng():
    """Provide a seeded generator."""
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset():
    """Provide a small synthetic dataset (8 stations x 20 days)."""
    return generate_synthetic(SyntheticConfig(n_stations=8, n_days=20, seed=3))


@pytest.fixture(scope="session")
def small_samples(small_dataset):
    """Provide the sample table built from the small synthetic dataset."""
    target = small_dataset.config.persiann_grid
    imerg = [bilinear_regrid(f, target) for f in small_dataset.imerg]
    table = build_samples(small_dataset.stations, small_dataset.persiann, imerg)
    table.fold_index = split_folds(len(table), 3, 11).fold_index
    return table


@pytest.fixture
def random_samples():
    """Provide a 600-row random sample table with folds."""
    return make_samples(600, seed=5)


@pytest.fixture
def sample_factory():
    """Provide the random sample table builder."""
    return make_samples


@pytest.fixture
def write_toml(tmp_path):
    """Write a TOML run config and return its path."""

    def write(text, name="run.toml"):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path

    return write


@pytest.fixture
def station_frame():
    """Provide a three-row station table."""
    return pd.DataFrame(
        {
            "station_id": ["A", "A", "B"],
            "longitude": [-100.0, -100.0, -99.5],
            "latitude": [40.0, 40.0, 40.5],
            "elevation_m": [1200.0, 1200.0, 800.0],
            "date": pd.to_datetime(["2014-01-01", "2014-01-02", "2014-01-01"]),
            "precip_mm": [0.0, 3.5, 12.25],
        }
    )
