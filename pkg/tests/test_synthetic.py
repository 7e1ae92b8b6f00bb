"""
Tests for the synthetic precipitation generator.
"""

from datetime import date

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from src.data import STATION_COLUMNS
from src.errors import DataError
from src.scoring import DEFAULT_TAU_LEVELS, coverage, frequency_score
from src.synthetic import SyntheticConfig, generate_synthetic, write_truth


def test_dataset_shape(small_dataset):
    """Test the station table and product fields of a small dataset."""
    stations = small_dataset.stations

    assert list(stations.columns) == STATION_COLUMNS
    assert len(stations) == 8 * 20
    assert stations["station_id"].nunique() == 8
    assert (stations["precip_mm"] >= 0).all()
    assert len(small_dataset.persiann) == 20
    assert len(small_dataset.imerg) == 20
    assert small_dataset.persiann[0].values.shape == (44, 44)
    assert small_dataset.imerg[0].values.shape == (110, 110)
    assert len(small_dataset.records()) == 160


def test_elevation_falls_to_the_east(small_dataset):
    """Test that station elevation decreases with longitude."""
    sites = small_dataset.stations.drop_duplicates("station_id")
    order = np.argsort(sites["longitude"].to_numpy())
    elevation = sites["elevation_m"].to_numpy()[order]

    assert np.all(np.diff(elevation) <= 0)


def test_all_dry_when_zero_probability_is_one():
    """Test the degenerate all-zero mixture."""
    dataset = generate_synthetic(
        SyntheticConfig(n_stations=5, n_days=10, zero_probability=1.0, seed=1)
    )

    assert (dataset.stations["precip_mm"] == 0).all()
    assert np.all(dataset.truth.quantile(0.999) == 0)


def test_zero_fraction_matches_zero_probability():
    """Test the empirical dry fraction of a large dataset."""
    dataset = generate_synthetic(SyntheticConfig(n_stations=100, n_days=365, seed=4))

    dry = float(np.mean(dataset.stations["precip_mm"] == 0))

    assert abs(dry - 0.72) <= 0.01


def test_same_seed_is_bit_identical():
    """Test that one config always produces the same dataset."""
    config = SyntheticConfig(n_stations=6, n_days=8, seed=9, missing_fraction=0.1)

    first = generate_synthetic(config)
    second = generate_synthetic(config)

    pd.testing.assert_frame_equal(first.stations, second.stations, check_exact=True)
    for a, b in zip(first.persiann + first.imerg, second.persiann + second.imerg):
        np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(first.truth.log_location, second.truth.log_location)

    other = generate_synthetic(config.model_copy(update={"seed": 10}))
    assert not np.array_equal(
        first.stations["precip_mm"].to_numpy(), other.stations["precip_mm"].to_numpy()
    )


def test_missing_fraction_marks_cells():
    """Test that a missing fraction leaves NaN cells in the products."""
    dataset = generate_synthetic(
        SyntheticConfig(n_stations=3, n_days=4, missing_fraction=0.2, seed=2)
    )

    missing = np.mean([f.missing.mean() for f in dataset.imerg])

    assert 0.15 < missing < 0.25


def test_config_validation():
    """Test invalid generator settings."""
    with pytest.raises(ValidationError):
        SyntheticConfig(zero_probability=1.5)
    with pytest.raises(ValidationError) as excinfo:
        SyntheticConfig(lon_min=-120.0)
    assert "not covered by the persiann grid" in str(excinfo.value)
    with pytest.raises(ValidationError):
        SyntheticConfig(lat_min=45.0, lat_max=44.0)


def test_truth_quantiles(small_dataset):
    """Test the oracle at and above the dry probability."""
    truth = small_dataset.truth

    assert np.all(truth.quantile(0.5) == 0)
    upper = truth.quantile(0.99)
    assert np.all(upper > 0)
    assert np.all(truth.quantile(0.999) > upper)


def test_truth_lookup(small_dataset):
    """Test lookup of one station-day and of many."""
    truth = small_dataset.truth
    day = date(2014, 1, 5)

    value = truth.lookup("S0002", day, 0.99)

    rows = truth.rows_for(["S0002"], np.array([np.datetime64(day)]))
    assert value == truth.quantile(0.99, rows)[0]
    with pytest.raises(DataError):
        truth.lookup("S9999", day, 0.99)
    with pytest.raises(DataError):
        truth.rows_for(["S9999"], np.array([np.datetime64(day)]))


def test_write_truth(tmp_path, small_dataset):
    """Test the truth table columns."""
    path = tmp_path / "truth.csv"

    write_truth(small_dataset.truth, path, [0.5, 0.99])

    table = pd.read_csv(path)
    assert list(table.columns) == ["station_id", "date", "q_0.5", "q_0.99"]
    assert len(table) == 160


def test_oracle_quantiles_are_calibrated():
    """Test that the exact quantiles cover the gauges at the nominal rate."""
    # Every default level lies above the dry probability of 0.3
    config = SyntheticConfig(
        n_stations=200, n_days=1000, zero_probability=0.3, n_modes=3, seed=17
    )
    dataset = generate_synthetic(config)
    observed = dataset.stations["precip_mm"].to_numpy()

    for tau in DEFAULT_TAU_LEVELS:
        predicted = dataset.truth.quantile(tau)
        assert frequency_score(predicted, observed, tau) < 0.005


def test_oracle_levels_inside_the_dry_mass_cover_every_dry_day():
    """Test that levels below the dry probability give 0 and over-cover."""
    config = SyntheticConfig(
        n_stations=100, n_days=500, zero_probability=0.72, n_modes=3, seed=17
    )
    dataset = generate_synthetic(config)
    observed = dataset.stations["precip_mm"].to_numpy()

    for tau in (0.5, 0.7):
        predicted = dataset.truth.quantile(tau)
        assert np.all(predicted == 0)
        assert coverage(predicted, observed) == pytest.approx(0.72, abs=0.01)
    upper = dataset.truth.quantile(0.9)
    assert frequency_score(upper, observed, 0.9) < 0.01
