"""
Regression samples and random fold assignment.

Every station-day becomes one sample with 19 predictors: the values and
great-circle distances of the four nearest cells of each satellite
product, plus the station longitude, latitude and elevation.
"""

import logging
from dataclasses import dataclass
from datetime import date as Date
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.data import GridField, GridSpec, PathLike
from src.errors import DataError

# Configure logger
logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0
N_NEIGHBORS = 4
PRODUCTS = ("persiann", "imerg")

FEATURE_NAMES = (
    [f"persiann_{k}" for k in range(1, 5)]
    + [f"imerg_{k}" for k in range(1, 5)]
    + [f"persiann_distance_{k}" for k in range(1, 5)]
    + [f"imerg_distance_{k}" for k in range(1, 5)]
    + ["longitude", "latitude", "elevation"]
)
FEATURE_COUNT = len(FEATURE_NAMES)
SAMPLE_COLUMNS = FEATURE_NAMES + ["target", "station_id", "date", "fold_index"]


@dataclass(frozen=True)
class FeatureVector:
    """The 19 predictors of one station-day, in column order."""

    persiann_values: Tuple[float, float, float, float]
    imerg_values: Tuple[float, float, float, float]
    persiann_distances: Tuple[float, float, float, float]
    imerg_distances: Tuple[float, float, float, float]
    longitude: float
    latitude: float
    elevation: float

    def __post_init__(self):
        for name in ("persiann_distances", "imerg_distances"):
            d = np.asarray(getattr(self, name))
            if np.any(d < 0) or np.any(np.diff(d) < 0):
                raise DataError(f"{name} must be nonnegative and non-decreasing")

    def to_array(self) -> np.ndarray:
        return np.array(
            [
                *self.persiann_values,
                *self.imerg_values,
                *self.persiann_distances,
                *self.imerg_distances,
                self.longitude,
                self.latitude,
                self.elevation,
            ],
            dtype=np.float64,
        )

    @classmethod
    def from_array(cls, row: Sequence[float]) -> "FeatureVector":
        row = [float(v) for v in row]
        if len(row) != FEATURE_COUNT:
            raise DataError(f"expected {FEATURE_COUNT} features, got {len(row)}")
        return cls(
            persiann_values=tuple(row[0:4]),
            imerg_values=tuple(row[4:8]),
            persiann_distances=tuple(row[8:12]),
            imerg_distances=tuple(row[12:16]),
            longitude=row[16],
            latitude=row[17],
            elevation=row[18],
        )


@dataclass(frozen=True)
class Sample:
    """One (predictors, target) pair."""

    features: FeatureVector
    target: float
    station_id: str
    date: Date

    def __post_init__(self):
        if not self.target >= 0:
            raise DataError(f"target must be >= 0, got {self.target}")


@dataclass
class SampleTable:
    """
    Column-oriented sample set.

    ``features`` has shape (n, 19); the other arrays have length n.
    ``drop_count`` is the number of station-days dropped for missing
    predictors while the table was built.
    """

    features: np.ndarray
    target: np.ndarray
    station_id: np.ndarray
    date: np.ndarray
    drop_count: int = 0
    fold_index: Optional[np.ndarray] = None

    def __post_init__(self):
        n = self.target.size
        if self.features.shape != (n, FEATURE_COUNT):
            raise DataError(
                f"features shape {self.features.shape} does not match {n} targets"
            )
        if self.station_id.size != n or self.date.size != n:
            raise DataError("station_id and date must align with targets")

    def __len__(self) -> int:
        return int(self.target.size)

    def subset(self, rows: np.ndarray) -> "SampleTable":
        return SampleTable(
            features=self.features[rows],
            target=self.target[rows],
            station_id=self.station_id[rows],
            date=self.date[rows],
            fold_index=None if self.fold_index is None else self.fold_index[rows],
        )

    def sample(self, i: int) -> Sample:
        return Sample(
            features=FeatureVector.from_array(self.features[i]),
            target=float(self.target[i]),
            station_id=str(self.station_id[i]),
            date=pd.Timestamp(self.date[i]).date(),
        )

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.features, columns=FEATURE_NAMES)
        frame["target"] = self.target
        frame["station_id"] = self.station_id
        frame["date"] = pd.to_datetime(self.date).strftime("%Y-%m-%d")
        if self.fold_index is not None:
            frame["fold_index"] = self.fold_index
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "SampleTable":
        required = FEATURE_NAMES + ["target", "station_id", "date"]
        missing = [c for c in required if c not in frame.columns]
        if missing:
            raise DataError(f"sample table missing columns {missing}")
        fold = None
        if "fold_index" in frame.columns:
            fold = frame["fold_index"].to_numpy(np.int64)
        return cls(
            features=frame[FEATURE_NAMES].to_numpy(np.float64),
            target=frame["target"].to_numpy(np.float64),
            station_id=frame["station_id"].astype(str).to_numpy(),
            date=pd.to_datetime(frame["date"]).to_numpy("datetime64[D]"),
            fold_index=fold,
        )


@dataclass(frozen=True)
class NearestCells:
    """The k nearest cells of one point, nearest first."""

    i_lon: np.ndarray
    j_lat: np.ndarray
    distance_km: np.ndarray

    def __len__(self) -> int:
        return int(self.distance_km.size)

    def pairs(self) -> List[Tuple[Tuple[int, int], float]]:
        return [
            ((int(i), int(j)), float(d))
            for i, j, d in zip(self.i_lon, self.j_lat, self.distance_km)
        ]


@dataclass(frozen=True)
class FoldAssignment:
    """Fold label of every sample."""

    fold_index: np.ndarray
    seed: int
    n_folds: int = 3

    def indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_index == fold)

    def sizes(self) -> List[int]:
        return np.bincount(self.fold_index, minlength=self.n_folds).tolist()


def great_circle_km(lon1, lat1, lon2, lat2) -> np.ndarray:
    """Haversine distance in kilometers; arguments in degrees, broadcastable."""
    lon1, lat1, lon2, lat2 = map(np.radians, [lon1, lat1, lon2, lat2])
    dlon = lon2 - lon1
    dlat = lat2 - lat1
    a = np.sin(dlat / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def _outside_bound(lon, lat, spec: GridSpec, i0, i1, j0, j1) -> float:
    """Lower bound on the distance from (lon, lat) to any cell outside a window."""
    lons, lats = spec.longitudes, spec.latitudes
    bounds = []
    phi = np.radians(lat)
    if j0 > 0:
        bounds.append(EARTH_RADIUS_KM * max(0.0, phi - np.radians(lats[j0 - 1])))
    if j1 < spec.n_lat - 1:
        bounds.append(EARTH_RADIUS_KM * max(0.0, np.radians(lats[j1 + 1]) - phi))

    cos_min = max(0.0, float(np.cos(np.radians(lats)).min()))
    gaps = []
    if i0 > 0:
        gaps.append(lon - lons[i0 - 1])
    if i1 < spec.n_lon - 1:
        gaps.append(lons[i1 + 1] - lon)
    for gap in gaps:
        dlon = np.radians(min(max(gap, 0.0), 180.0))
        a = np.cos(phi) * cos_min * np.sin(dlon / 2) ** 2
        bounds.append(2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(min(a, 1.0))))
    # Shrink slightly so rounding never overstates the bound
    return min(bounds) * (1.0 - 1e-9) if bounds else np.inf


def nearest_grid_points(
    station_lon: float, station_lat: float, spec: GridSpec, k: int = N_NEIGHBORS
) -> NearestCells:
    """
    Find the k cell centers nearest to a point.

    Searches a window around the enclosing cell and doubles it until no
    cell outside can be closer than the k-th candidate. Equidistant cells
    are ordered by ascending (j_lat, i_lon).

    Args:
        station_lon: Longitude in degrees
        station_lat: Latitude in degrees
        spec: Grid to search
        k: Number of cells

    Returns:
        NearestCells sorted by distance
    """
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    if k > spec.n_cells:
        raise DataError(f"k={k} exceeds the {spec.n_cells} cells of the grid")

    ci = round((station_lon - spec.origin_longitude) / spec.cell_size)
    cj = round((station_lat - spec.origin_latitude) / spec.cell_size)
    ci = int(np.clip(ci, 0, spec.n_lon - 1))
    cj = int(np.clip(cj, 0, spec.n_lat - 1))
    radius = 1
    while True:
        i0, i1 = max(0, ci - radius), min(spec.n_lon - 1, ci + radius)
        j0, j1 = max(0, cj - radius), min(spec.n_lat - 1, cj + radius)
        jj, ii = np.meshgrid(
            np.arange(j0, j1 + 1), np.arange(i0, i1 + 1), indexing="ij"
        )
        ii, jj = ii.ravel(), jj.ravel()
        d = great_circle_km(
            station_lon,
            station_lat,
            spec.longitudes[ii],
            spec.latitudes[jj],
        )
        whole_grid = (i1 - i0 + 1) * (j1 - j0 + 1) == spec.n_cells
        if d.size >= k:
            order = np.lexsort((ii, jj, d))[:k]
            if whole_grid or d[order[-1]] < _outside_bound(
                station_lon, station_lat, spec, i0, i1, j0, j1
            ):
                return NearestCells(ii[order], jj[order], d[order])
        radius *= 2


def _station_sites(stations: pd.DataFrame) -> pd.DataFrame:
    sites = stations[["station_id", "longitude", "latitude", "elevation_m"]]
    return sites.drop_duplicates().reset_index(drop=True)


def _stack_fields(fields: Sequence[GridField]) -> Tuple[Dict[Date, int], np.ndarray]:
    if not fields:
        return {}, np.empty((0, 0, 0))
    index = {}
    cube = np.empty((len(fields),) + fields[0].values.shape)
    for n, grid in enumerate(fields):
        if grid.date in index:
            raise DataError(f"two {grid.product_id} fields for {grid.date}")
        if grid.values.shape != cube.shape[1:]:
            raise DataError(f"{grid.product_id} fields do not share one grid")
        index[grid.date] = n
        cube[n] = grid.values
    return index, cube


def build_samples(
    stations: pd.DataFrame,
    persiann_fields: Sequence[GridField],
    imerg_fields: Sequence[GridField],
) -> SampleTable:
    """
    Build one sample per station-day.

    Station-days whose date is missing from a product, or whose nearest
    cells include a missing value, are dropped and counted.

    Args:
        stations: Validated station table
        persiann_fields: Daily PERSIANN fields on one grid
        imerg_fields: Daily IMERG fields, already regridded

    Returns:
        SampleTable in station table order
    """
    products = {"persiann": persiann_fields, "imerg": imerg_fields}
    stacks = {name: _stack_fields(fields) for name, fields in products.items()}

    days = pd.to_datetime(stations["date"]).dt.date.to_numpy()
    common = set(stacks["persiann"][0]) & set(stacks["imerg"][0])
    if not common.intersection(days):
        raise DataError("station dates and grid dates do not overlap")

    sites = _station_sites(stations)
    site_of_row = (
        stations[["station_id", "longitude", "latitude", "elevation_m"]]
        .merge(sites.reset_index(), how="left")["index"]
        .to_numpy()
    )

    n = len(stations)
    features = np.empty((n, FEATURE_COUNT))
    valid = np.ones(n, dtype=bool)
    for p, name in enumerate(PRODUCTS):
        date_index, cube = stacks[name]
        spec = products[name][0].spec
        cells = [
            nearest_grid_points(lon, lat, spec)
            for lon, lat in zip(sites["longitude"], sites["latitude"])
        ]
        i_lon = np.stack([c.i_lon for c in cells])[site_of_row]
        j_lat = np.stack([c.j_lat for c in cells])[site_of_row]
        dist = np.stack([c.distance_km for c in cells])[site_of_row]

        slot = np.array([date_index.get(d, -1) for d in days], dtype=np.intp)
        has_day = slot >= 0
        values = np.full((n, N_NEIGHBORS), np.nan)
        values[has_day] = cube[slot[has_day, None], j_lat[has_day], i_lon[has_day]]

        features[:, 4 * p : 4 * p + 4] = values
        features[:, 8 + 4 * p : 12 + 4 * p] = dist
        valid &= np.all(np.isfinite(values), axis=1)

    features[:, 16] = stations["longitude"].to_numpy(np.float64)
    features[:, 17] = stations["latitude"].to_numpy(np.float64)
    features[:, 18] = stations["elevation_m"].to_numpy(np.float64)

    dropped = int(n - valid.sum())
    if dropped:
        logger.info(f"Dropped {dropped} station-days with missing predictors")
    logger.info(f"Built {int(valid.sum())} samples from {n} station-days")
    return SampleTable(
        features=features[valid],
        target=stations["precip_mm"].to_numpy(np.float64)[valid],
        station_id=stations["station_id"].astype(str).to_numpy()[valid],
        date=pd.to_datetime(stations["date"]).to_numpy("datetime64[D]")[valid],
        drop_count=dropped,
    )


def fold_sizes(n_samples: int, n_folds: int = 3) -> List[int]:
    """Sizes of the contiguous blocks ``split_folds`` cuts; larger blocks first."""
    if n_folds < 1 or n_samples < n_folds:
        raise DataError(f"cannot split {n_samples} samples into {n_folds} folds")
    base, extra = divmod(n_samples, n_folds)
    return [base + 1 if f < extra else base for f in range(n_folds)]


def split_folds(n_samples: int, n_folds: int = 3, seed: int = 0) -> FoldAssignment:
    """
    Randomly partition samples into folds of near-equal size.

    Args:
        n_samples: Number of samples
        n_folds: Number of folds
        seed: Permutation seed

    Returns:
        FoldAssignment; fold f holds the f-th block of a random permutation
    """
    sizes = fold_sizes(n_samples, n_folds)
    permutation = np.random.default_rng(seed).permutation(n_samples)
    fold_index = np.empty(n_samples, dtype=np.int64)
    fold_index[permutation] = np.repeat(np.arange(n_folds), sizes)
    return FoldAssignment(fold_index=fold_index, seed=seed, n_folds=n_folds)


def write_samples(table: SampleTable, path: PathLike) -> None:
    """Write a sample table; fold_index must be assigned."""
    if table.fold_index is None:
        raise DataError("assign folds before writing samples")
    table.to_frame()[SAMPLE_COLUMNS].to_csv(path, index=False)


def read_samples(path: PathLike) -> SampleTable:
    """Read a sample table written by ``write_samples``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Sample table not found: {path}")
    frame = pd.read_csv(path, dtype={"station_id": str})
    if "fold_index" not in frame.columns:
        raise DataError(f"{path}: missing column fold_index")
    table = SampleTable.from_frame(frame)
    logger.info(f"Read {len(table)} samples from {path}")
    return table
