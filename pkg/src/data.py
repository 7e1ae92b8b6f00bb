"""
Station tables, gridded product fields and bilinear regridding.

Station table columns: station_id, longitude, latitude, elevation_m, date
(ISO-8601), precip_mm. Grid tables are long format: product_id, date,
i_lon, j_lat, value_mm, one row per non-missing cell. Missing cells are
NaN in memory.
"""

import logging
from dataclasses import dataclass
from datetime import date as Date
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from src.errors import DataError

# Configure logger
logger = logging.getLogger(__name__)

STATION_COLUMNS = [
    "station_id",
    "longitude",
    "latitude",
    "elevation_m",
    "date",
    "precip_mm",
]
GRID_COLUMNS = ["product_id", "date", "i_lon", "j_lat", "value_mm"]

PathLike = Union[str, Path]


class GridSpec(BaseModel):
    """Regular lon/lat grid; cell centers at origin + index * cell_size."""

    model_config = ConfigDict(frozen=True)

    origin_longitude: float
    origin_latitude: float
    cell_size: float = Field(gt=0.0)
    n_lon: int = Field(ge=1)
    n_lat: int = Field(ge=1)

    @property
    def n_cells(self) -> int:
        return self.n_lon * self.n_lat

    @property
    def longitudes(self) -> np.ndarray:
        return self.origin_longitude + np.arange(self.n_lon) * self.cell_size

    @property
    def latitudes(self) -> np.ndarray:
        return self.origin_latitude + np.arange(self.n_lat) * self.cell_size

    def contains(self, longitude: float, latitude: float) -> bool:
        """Whether a point lies inside the hull of the cell centers."""
        lons, lats = self.longitudes, self.latitudes
        return bool(
            lons[0] <= longitude <= lons[-1] and lats[0] <= latitude <= lats[-1]
        )


@dataclass(frozen=True)
class StationRecord:
    """One station-day of gauge precipitation."""

    station_id: str
    longitude: float
    latitude: float
    elevation: float
    date: Date
    precipitation: float

    def __post_init__(self):
        if not self.precipitation >= 0:
            raise DataError(f"precipitation must be >= 0, got {self.precipitation}")
        if not -90.0 <= self.latitude <= 90.0:
            raise DataError(f"latitude out of range: {self.latitude}")
        if not -180.0 <= self.longitude <= 180.0:
            raise DataError(f"longitude out of range: {self.longitude}")


@dataclass(frozen=True)
class GridField:
    """One product on one day; ``values`` has shape (n_lat, n_lon)."""

    product_id: str
    spec: GridSpec
    date: Date
    values: np.ndarray

    def __post_init__(self):
        shape = (self.spec.n_lat, self.spec.n_lon)
        if self.values.shape != shape:
            raise DataError(
                f"field {self.product_id}/{self.date} has shape "
                f"{self.values.shape}, expected {shape}"
            )
        present = self.values[~np.isnan(self.values)]
        if np.any(present < 0):
            raise DataError(f"field {self.product_id}/{self.date} has negative values")

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)


def records_to_frame(records: Iterable[StationRecord]) -> pd.DataFrame:
    """Convert station records into a station table."""
    rows = [
        (r.station_id, r.longitude, r.latitude, r.elevation, r.date, r.precipitation)
        for r in records
    ]
    frame = pd.DataFrame(rows, columns=STATION_COLUMNS)
    frame["date"] = pd.to_datetime(frame["date"])
    return frame


def frame_to_records(frame: pd.DataFrame) -> List[StationRecord]:
    """Convert a validated station table into records."""
    return [
        StationRecord(
            station_id=str(row.station_id),
            longitude=float(row.longitude),
            latitude=float(row.latitude),
            elevation=float(row.elevation_m),
            date=row.date.date(),
            precipitation=float(row.precip_mm),
        )
        for row in frame.itertuples(index=False)
    ]


def _bad_lines(mask: pd.Series) -> List[int]:
    # Header is line 1, first data row line 2
    return [int(i) + 2 for i in np.flatnonzero(mask.to_numpy())]


def validate_stations(frame: pd.DataFrame, source: str = "<table>") -> pd.DataFrame:
    """
    Validate and normalize a station table.

    Args:
        frame: Raw table with the station columns
        source: Name used in error messages

    Returns:
        Table with typed columns (dates as datetime64)
    """
    missing = [c for c in STATION_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"{source}: missing columns {missing}")

    frame = frame[STATION_COLUMNS].copy()
    frame["station_id"] = frame["station_id"].astype(str)
    problems = []

    dates = pd.to_datetime(frame["date"], format="ISO8601", errors="coerce")
    if dates.isna().any():
        problems.append(f"unparseable dates on lines {_bad_lines(dates.isna())}")
    frame["date"] = dates

    for column in ["longitude", "latitude", "elevation_m", "precip_mm"]:
        numeric = pd.to_numeric(frame[column], errors="coerce")
        if numeric.isna().any():
            problems.append(
                f"non-numeric {column} on lines {_bad_lines(numeric.isna())}"
            )
        frame[column] = numeric.astype(np.float64)

    # NaN compares False, so rows already reported as non-numeric are skipped
    checks = {
        "negative precip_mm": frame["precip_mm"] < 0,
        "latitude outside [-90, 90]": (frame["latitude"] < -90.0)
        | (frame["latitude"] > 90.0),
        "longitude outside [-180, 180]": (frame["longitude"] < -180.0)
        | (frame["longitude"] > 180.0),
    }
    for label, mask in checks.items():
        if mask.any():
            problems.append(f"{label} on lines {_bad_lines(mask)}")

    if problems:
        raise DataError(f"{source}: " + "; ".join(problems))
    return frame.reset_index(drop=True)


def load_stations(path: PathLike) -> pd.DataFrame:
    """
    Load a station table.

    Args:
        path: Delimited text file with the station header

    Returns:
        Validated station table, one row per station-day
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Station table not found: {path}")

    frame = pd.read_csv(path, dtype={"station_id": str})
    frame = validate_stations(frame, source=str(path))
    logger.info(f"Loaded {len(frame)} station-days from {path}")
    return frame


def write_stations(frame: pd.DataFrame, path: PathLike) -> None:
    """Write a station table in the interchange format."""
    out = frame[STATION_COLUMNS].copy()
    out["date"] = pd.to_datetime(out["date"]).dt.strftime("%Y-%m-%d")
    out.to_csv(path, index=False)


def load_grid(
    path: PathLike, spec: GridSpec, product_id: Optional[str] = None
) -> List[GridField]:
    """
    Load gridded fields from a long-format grid table.

    Args:
        path: Delimited text file with the grid header
        spec: Grid the cell indices refer to
        product_id: Keep only this product when the table holds several

    Returns:
        One GridField per (product, date), sorted; absent cells are NaN
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Grid table not found: {path}")

    frame = pd.read_csv(path, dtype={"product_id": str})
    missing = [c for c in GRID_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    if product_id is not None:
        frame = frame[frame["product_id"] == product_id]

    frame = frame.reset_index(drop=True)
    dates = pd.to_datetime(frame["date"], format="ISO8601", errors="coerce")
    if dates.isna().any():
        bad = _bad_lines(dates.isna())
        raise DataError(f"{path}: unparseable dates on lines {bad}")
    frame["date"] = dates
    for column in ["i_lon", "j_lat"]:
        frame[column] = frame[column].astype(np.int64)

    out_of_range = (
        (frame["i_lon"] < 0)
        | (frame["i_lon"] >= spec.n_lon)
        | (frame["j_lat"] < 0)
        | (frame["j_lat"] >= spec.n_lat)
    )
    if out_of_range.any():
        raise DataError(
            f"{path}: cell index out of range for "
            f"{spec.n_lon}x{spec.n_lat} grid on lines {_bad_lines(out_of_range)}"
        )

    duplicated = frame.duplicated(["product_id", "date", "i_lon", "j_lat"], keep=False)
    if duplicated.any():
        raise DataError(f"{path}: duplicate cells on lines {_bad_lines(duplicated)}")

    fields = []
    for (product, day), group in frame.groupby(["product_id", "date"], sort=True):
        values = np.full((spec.n_lat, spec.n_lon), np.nan)
        values[group["j_lat"].to_numpy(), group["i_lon"].to_numpy()] = group[
            "value_mm"
        ].to_numpy(dtype=np.float64)
        fields.append(GridField(str(product), spec, day.date(), values))

    logger.info(f"Loaded {len(fields)} grid fields from {path}")
    return fields


def write_grid(fields: Sequence[GridField], path: PathLike) -> None:
    """Write fields in long format; missing cells are omitted."""
    parts = []
    for field in fields:
        j, i = np.nonzero(~field.missing)
        parts.append(
            pd.DataFrame(
                {
                    "product_id": field.product_id,
                    "date": field.date.isoformat(),
                    "i_lon": i,
                    "j_lat": j,
                    "value_mm": field.values[j, i],
                }
            )
        )
    if parts:
        frame = pd.concat(parts, ignore_index=True)
    else:
        frame = pd.DataFrame(columns=GRID_COLUMNS)
    frame[GRID_COLUMNS].to_csv(path, index=False)


def _axis_weights(coords: np.ndarray, origin: float, cell_size: float, n: int):
    """Lower index, upper index, fractional offset and validity along one axis."""
    position = (coords - origin) / cell_size
    tol = 1e-9
    valid = (position >= -tol) & (position <= (n - 1) + tol)
    if n == 1:
        lower = np.zeros(coords.shape, dtype=np.intp)
        return lower, lower, np.zeros(coords.shape), valid & (np.abs(position) <= tol)
    position = np.clip(position, 0.0, n - 1.0)
    lower = np.clip(np.floor(position).astype(np.intp), 0, n - 2)
    return lower, lower + 1, position - lower, valid


def bilinear_regrid(field: GridField, target: GridSpec) -> GridField:
    """
    Resample a field onto another regular grid by bilinear interpolation.

    Target cells outside the hull of the source cell centers, and cells
    whose four surrounding source cells include a missing value, are
    missing in the result.

    Args:
        field: Source field
        target: Target grid

    Returns:
        Field on ``target`` with the same product and date
    """
    src = field.spec
    i0, i1, tx, valid_x = _axis_weights(
        target.longitudes, src.origin_longitude, src.cell_size, src.n_lon
    )
    j0, j1, ty, valid_y = _axis_weights(
        target.latitudes, src.origin_latitude, src.cell_size, src.n_lat
    )

    v = field.values
    tx = tx[np.newaxis, :]
    ty = ty[:, np.newaxis]
    J0, J1 = j0[:, np.newaxis], j1[:, np.newaxis]
    I0, I1 = i0[np.newaxis, :], i1[np.newaxis, :]
    out = (
        (1.0 - tx) * (1.0 - ty) * v[J0, I0]
        + tx * (1.0 - ty) * v[J0, I1]
        + (1.0 - tx) * ty * v[J1, I0]
        + tx * ty * v[J1, I1]
    )
    out[~(valid_y[:, np.newaxis] & valid_x[np.newaxis, :])] = np.nan
    return GridField(field.product_id, target, field.date, out)
