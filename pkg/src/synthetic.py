"""
Synthetic intermittent precipitation with a known conditional distribution.

A latent daily field (a sum of random plane waves with unit variance)
drives both the gauges and the gridded products. A station-day is dry
with probability ``zero_probability``; otherwise it is lognormal with
log-location

    log_mean + latent_effect * L(station, day)
             + elevation_effect * (elevation - 1500) / 1000

and log-scale ``log_sigma``. Products see the same latent field with
their own noise, dry cells and spatial smoothing. Because the gauge
distribution is known given the latent field, the exact conditional
quantile of every station-day is available as an oracle.
"""

import logging
from dataclasses import dataclass
from datetime import date as Date
from datetime import timedelta
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import ndimage, stats

from src.config import derive_seed
from src.data import STATION_COLUMNS, GridField, GridSpec, PathLike, frame_to_records
from src.errors import DataError
from src.scoring import DEFAULT_TAU_LEVELS, as_tau

# Configure logger
logger = logging.getLogger(__name__)

PERSIANN_GRID = GridSpec(
    origin_longitude=-105.875,
    origin_latitude=34.125,
    cell_size=0.25,
    n_lon=44,
    n_lat=44,
)
IMERG_GRID = GridSpec(
    origin_longitude=-105.95,
    origin_latitude=34.05,
    cell_size=0.1,
    n_lon=110,
    n_lat=110,
)


class SyntheticConfig(BaseModel):
    """
    Generator settings.

    Attributes:
        n_stations: Number of gauges
        n_days: Number of consecutive days
        start_date: First day
        zero_probability: Probability that a station-day is dry
        log_mean: Log-location of wet amounts at zero latent value
        log_sigma: Log-scale of wet amounts
        latent_effect: Weight of the latent field in the log-location
        elevation_effect: Log-location change per 1000 m above 1500 m
        n_modes: Plane waves in the latent field
        product_noise: Log-scale noise of the products
        persiann_smoothing: Moving-average window (cells) of PERSIANN
        imerg_smoothing: Moving-average window (cells) of IMERG
        missing_fraction: Fraction of product cells set missing
        lon_min, lon_max, lat_min, lat_max: Station bounding box
        elevation_min, elevation_max: Elevation range, falling west to east
        persiann_grid: Native PERSIANN grid
        imerg_grid: Native IMERG grid
        seed: Master seed
    """

    model_config = ConfigDict(frozen=True)

    n_stations: int = Field(default=100, ge=1)
    n_days: int = Field(default=365, ge=1)
    start_date: Date = Date(2014, 1, 1)
    zero_probability: float = Field(default=0.72, ge=0.0, le=1.0)
    log_mean: float = 1.0
    log_sigma: float = Field(default=1.0, gt=0.0)
    latent_effect: float = 0.6
    elevation_effect: float = -0.2
    n_modes: int = Field(default=6, ge=1)
    product_noise: float = Field(default=0.3, ge=0.0)
    persiann_smoothing: int = Field(default=3, ge=1)
    imerg_smoothing: int = Field(default=5, ge=1)
    missing_fraction: float = Field(default=0.0, ge=0.0, lt=1.0)
    lon_min: float = -104.0
    lon_max: float = -96.0
    lat_min: float = 36.0
    lat_max: float = 44.0
    elevation_min: float = 200.0
    elevation_max: float = 3000.0
    persiann_grid: GridSpec = PERSIANN_GRID
    imerg_grid: GridSpec = IMERG_GRID
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def check_box(self):
        if not (self.lon_min < self.lon_max and self.lat_min < self.lat_max):
            raise ValueError("station box must have positive extent")
        if self.elevation_min > self.elevation_max:
            raise ValueError("elevation_min must not exceed elevation_max")
        corners = [(self.lon_min, self.lat_min), (self.lon_max, self.lat_max)]
        grids = {"persiann": self.persiann_grid, "imerg": self.imerg_grid}
        for name, grid in grids.items():
            if not all(grid.contains(lon, lat) for lon, lat in corners):
                raise ValueError(f"station box is not covered by the {name} grid")
        return self


@dataclass(frozen=True)
class SyntheticTruth:
    """
    Conditional distribution of every generated station-day.

    ``log_location`` is aligned with ``station_id`` and ``date``.
    """

    station_id: np.ndarray
    date: np.ndarray
    log_location: np.ndarray
    log_sigma: float
    zero_probability: float

    def quantile(self, tau: float, rows: Optional[np.ndarray] = None) -> np.ndarray:
        """Exact tau-quantile (infimum convention) for every station-day."""
        level = as_tau(tau)
        mu = self.log_location if rows is None else self.log_location[rows]
        p0 = self.zero_probability
        if level <= p0:
            return np.zeros(mu.shape)
        z = stats.norm.ppf((level - p0) / (1.0 - p0))
        return np.exp(mu + self.log_sigma * z)

    def lookup(self, station_id: str, day: Date, tau: float) -> float:
        hits = np.flatnonzero(
            (self.station_id == station_id) & (self.date == np.datetime64(day, "D"))
        )
        if hits.size != 1:
            raise DataError(f"no truth for station {station_id} on {day}")
        return float(self.quantile(tau, hits)[0])

    def rows_for(self, station_id: Sequence[str], day: np.ndarray) -> np.ndarray:
        """Row of every (station, day) pair; DataError when one is unknown."""
        index = pd.MultiIndex.from_arrays([self.station_id, self.date])
        keys = pd.MultiIndex.from_arrays(
            [np.asarray(station_id, dtype=str), np.asarray(day, dtype="datetime64[D]")]
        )
        rows = index.get_indexer(keys)
        if np.any(rows < 0):
            raise DataError("samples include station-days without truth")
        return rows

    def to_frame(self, taus: Sequence[float] = DEFAULT_TAU_LEVELS) -> pd.DataFrame:
        frame = pd.DataFrame(
            {
                "station_id": self.station_id,
                "date": pd.to_datetime(self.date).strftime("%Y-%m-%d"),
            }
        )
        for tau in taus:
            frame[f"q_{tau:g}"] = self.quantile(tau)
        return frame


@dataclass(frozen=True)
class SyntheticDataset:
    """Station table, native product fields and the truth oracle."""

    stations: pd.DataFrame
    persiann: List[GridField]
    imerg: List[GridField]
    truth: SyntheticTruth
    config: SyntheticConfig

    def records(self):
        return frame_to_records(self.stations)


class _LatentField:
    """Unit-variance sum of plane waves, one draw per day."""

    def __init__(self, rng: np.random.Generator, n_days: int, n_modes: int):
        # Wavelengths between 3 and 12 degrees
        wavelength = rng.uniform(3.0, 12.0, size=(n_days, n_modes))
        angle = rng.uniform(0.0, 2 * np.pi, size=(n_days, n_modes))
        k = 2 * np.pi / wavelength
        self.kx = k * np.cos(angle)
        self.ky = k * np.sin(angle)
        self.phase = rng.uniform(0.0, 2 * np.pi, size=(n_days, n_modes))
        self.scale = np.sqrt(2.0 / n_modes)

    def at(self, day: int, lon: np.ndarray, lat: np.ndarray) -> np.ndarray:
        lon = np.asarray(lon)[..., np.newaxis]
        lat = np.asarray(lat)[..., np.newaxis]
        waves = np.cos(self.kx[day] * lon + self.ky[day] * lat + self.phase[day])
        return self.scale * waves.sum(axis=-1)


def _product_fields(
    product_id: str,
    spec: GridSpec,
    latent: _LatentField,
    days: List[Date],
    config: SyntheticConfig,
    smoothing: int,
    rng: np.random.Generator,
) -> List[GridField]:
    lon, lat = np.meshgrid(spec.longitudes, spec.latitudes)
    wet_probability = 1.0 - config.zero_probability
    fields = []
    for d, day in enumerate(days):
        noise = rng.standard_normal(lon.shape)
        wet = rng.random(lon.shape) < wet_probability
        amount = np.exp(
            config.log_mean
            + config.latent_effect * latent.at(d, lon, lat)
            + config.product_noise * noise
        )
        values = ndimage.uniform_filter(amount * wet, size=smoothing, mode="nearest")
        values = np.maximum(values, 0.0)
        if config.missing_fraction > 0:
            values[rng.random(lon.shape) < config.missing_fraction] = np.nan
        fields.append(GridField(product_id, spec, day, values))
    return fields


def generate_synthetic(config: SyntheticConfig) -> SyntheticDataset:
    """
    Generate stations, products and the truth oracle.

    Args:
        config: Generator settings

    Returns:
        SyntheticDataset; identical for identical configs
    """
    rng = np.random.default_rng(derive_seed(config.seed, "synthetic"))
    n_s, n_d = config.n_stations, config.n_days
    days = [config.start_date + timedelta(days=d) for d in range(n_d)]

    lon = rng.uniform(config.lon_min, config.lon_max, size=n_s)
    lat = rng.uniform(config.lat_min, config.lat_max, size=n_s)
    east = (lon - config.lon_min) / (config.lon_max - config.lon_min)
    relief = config.elevation_max - config.elevation_min
    elevation = config.elevation_max - relief * east
    station_ids = np.array([f"S{s:04d}" for s in range(n_s)])

    latent = _LatentField(rng, n_d, config.n_modes)
    # Rows ordered by station, then day
    latent_values = np.stack([latent.at(d, lon, lat) for d in range(n_d)], axis=1)
    log_location = (
        config.log_mean
        + config.latent_effect * latent_values
        + config.elevation_effect * ((elevation - 1500.0) / 1000.0)[:, np.newaxis]
    ).ravel()

    wet = rng.random(n_s * n_d) >= config.zero_probability
    z = rng.standard_normal(n_s * n_d)
    precip = np.where(wet, np.exp(log_location + config.log_sigma * z), 0.0)

    dates = np.tile(np.array(days, dtype="datetime64[D]"), n_s)
    stations = pd.DataFrame(
        {
            "station_id": np.repeat(station_ids, n_d),
            "longitude": np.repeat(lon, n_d),
            "latitude": np.repeat(lat, n_d),
            "elevation_m": np.repeat(elevation, n_d),
            "date": pd.to_datetime(dates),
            "precip_mm": precip,
        }
    )[STATION_COLUMNS]

    persiann = _product_fields(
        "persiann",
        config.persiann_grid,
        latent,
        days,
        config,
        config.persiann_smoothing,
        np.random.default_rng(derive_seed(config.seed, "synthetic", 1)),
    )
    imerg = _product_fields(
        "imerg",
        config.imerg_grid,
        latent,
        days,
        config,
        config.imerg_smoothing,
        np.random.default_rng(derive_seed(config.seed, "synthetic", 2)),
    )

    truth = SyntheticTruth(
        station_id=stations["station_id"].to_numpy(),
        date=dates,
        log_location=log_location,
        log_sigma=config.log_sigma,
        zero_probability=config.zero_probability,
    )
    logger.info(
        f"Generated {len(stations)} station-days, "
        f"{float(np.mean(precip == 0)):.3f} of them dry"
    )
    return SyntheticDataset(stations, persiann, imerg, truth, config)


def write_truth(
    truth: SyntheticTruth, path: PathLike, taus: Sequence[float] = DEFAULT_TAU_LEVELS
) -> None:
    """Write oracle quantiles at the given levels, one row per station-day."""
    truth.to_frame(taus).to_csv(path, index=False)
