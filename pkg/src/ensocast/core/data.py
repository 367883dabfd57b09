"""Gridded anomaly datasets: grid geometry, region masks, the planted-signal generator, and file formats."""

import csv
from collections.abc import Sequence
from dataclasses import replace
from logging import getLogger
from math import cos, radians
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import Field, model_validator
from scipy.ndimage import gaussian_filter
from typing_extensions import Self

from ensocast.core.base import Serializable
from ensocast.core.codec import RecordReader, RecordWriter
from ensocast.core.constants import (
    CHANNEL_NAMES,
    DATASET_MAGIC,
    DEFAULT_NLAT,
    DEFAULT_NLON,
    MAX_ELEMENTS,
    MAX_LEAD_MONTHS,
    N_CHANNELS,
    NINO34_BOX,
    SPRING_MONTHS,
)
from ensocast.core.exceptions import ConfigError, EmptyResultError, ExtentOverflowError, FormatError, ShapeError
from ensocast.utils.dataclasses import dataclass
from ensocast.utils.types import BoolArray, FloatArray, PathLike

logger = getLogger(__name__)


class GridSpec(Serializable):
    """Regular lat-lon grid of cell centers.

    Row ``i`` sits at latitude ``lat0 + i * dlat`` and column ``j`` at longitude ``lon0 + j * dlon`` (degrees east).
    """

    nlat: int = Field(DEFAULT_NLAT, ge=1, le=4096, description="Number of latitude rows.")
    nlon: int = Field(DEFAULT_NLON, ge=1, le=8192, description="Number of longitude columns.")
    lat0: float = Field(-57.5, ge=-90.0, le=90.0, description="Latitude of row 0 (cell center).")
    dlat: float = Field(5.0, description="Latitude step between rows; negative for north-to-south grids.")
    lon0: float = Field(2.5, description="Longitude of column 0 (cell center, degrees east).")
    dlon: float = Field(5.0, gt=0.0, description="Longitude step between columns.")

    @model_validator(mode="after")
    def _validate_extent(self) -> Self:
        if self.dlat == 0.0:
            raise ValueError("dlat must be non-zero")
        last = self.lat0 + (self.nlat - 1) * self.dlat
        if not -90.0 <= last <= 90.0:
            raise ValueError(f"latitude rows run past the pole (last row at {last})")
        return self

    @property
    def shape(self) -> tuple[int, int]:
        """Grid extents ``(nlat, nlon)``."""
        return self.nlat, self.nlon

    @property
    def lats(self) -> FloatArray:
        """Latitude of every row."""
        return self.lat0 + self.dlat * np.arange(self.nlat, dtype=np.float64)

    @property
    def lons(self) -> FloatArray:
        """Longitude of every column, wrapped to [0, 360)."""
        return np.mod(self.lon0 + self.dlon * np.arange(self.nlon, dtype=np.float64), 360.0)

    def box_cells(self, lat_range: tuple[float, float], lon_range: tuple[float, float]) -> BoolArray:
        """Cells whose centers fall inside a lat/lon box (inclusive bounds, longitudes in degrees east).

        A box whose western bound exceeds its eastern bound wraps through the prime meridian.
        """
        lat_lo, lat_hi = sorted(lat_range)
        rows = (self.lats >= lat_lo) & (self.lats <= lat_hi)
        west, east = (float(np.mod(v, 360.0)) for v in lon_range)
        lons = self.lons
        if lon_range[1] - lon_range[0] >= 360.0:
            cols = np.ones(self.nlon, dtype=bool)
        elif west <= east:
            cols = (lons >= west) & (lons <= east)
        else:
            cols = (lons >= west) | (lons <= east)
        return np.outer(rows, cols)

    def covers(self, lat_range: tuple[float, float], lon_range: tuple[float, float]) -> bool:
        """Whether the grid's cell edges enclose a lat/lon box."""
        edges = sorted((self.lats[0] - self.dlat / 2.0, self.lats[-1] + self.dlat / 2.0))
        lat_lo, lat_hi = sorted(lat_range)
        if lat_lo < edges[0] or lat_hi > edges[1]:
            return False
        if self.nlon * self.dlon >= 360.0:
            return True
        start = float(np.mod(self.lon0 - self.dlon / 2.0, 360.0))
        span = self.nlon * self.dlon
        west = float(np.mod(lon_range[0] - start, 360.0))
        east = west + (lon_range[1] - lon_range[0]) % 360.0
        return east <= span


@dataclass(frozen=True)
class NamedBox:
    """Labelled lat/lon box."""

    lat_range: tuple[float, float]
    lon_range: tuple[float, float]
    label: str = ""


@dataclass(frozen=True, eq=False)
class RegionMask:
    """Boolean selection of grid cells, optionally described by named boxes."""

    cells: BoolArray
    """Selected cells, shape ``[nlat, nlon]``."""

    boxes: tuple[NamedBox, ...] = ()
    """Boxes the selection was built from, if any."""

    @classmethod
    def from_boxes(cls, grid: GridSpec, boxes: Sequence[NamedBox]) -> "RegionMask":
        """Union of the cells inside each box.

        Raises:
            ShapeError: If a box lies outside the grid.
            EmptyResultError: If a box selects no cell.
        """
        cells = np.zeros(grid.shape, dtype=bool)
        for box in boxes:
            if not grid.covers(box.lat_range, box.lon_range):
                raise ShapeError(f"Box {box.label or box} lies outside the grid")
            sel = grid.box_cells(box.lat_range, box.lon_range)
            if not sel.any():
                raise EmptyResultError(f"Box {box.label or box} selects no grid cell")
            cells |= sel
        return cls(cells=cells, boxes=tuple(boxes))

    @classmethod
    def full(cls, grid: GridSpec) -> "RegionMask":
        """Every cell selected."""
        return cls(cells=np.ones(grid.shape, dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        """Mask extents."""
        return self.cells.shape[0], self.cells.shape[1]

    @property
    def count(self) -> int:
        """Number of selected cells."""
        return int(self.cells.sum())

    def complement(self) -> "RegionMask":
        """Cells not selected by this mask."""
        return RegionMask(cells=~self.cells)

    def check_grid(self, grid: GridSpec) -> None:
        """Raise :class:`ShapeError` unless the mask matches the grid."""
        if self.shape != grid.shape:
            raise ShapeError(f"Mask shape {self.shape} does not match grid {grid.shape}")

    def __eq__(self, other: object) -> bool:
        """Equal when the same cells are selected."""
        return isinstance(other, RegionMask) and np.array_equal(self.cells, other.cells)

    __hash__ = None  # type: ignore[assignment]


def default_driver_boxes() -> tuple[NamedBox, ...]:
    """Planted driver region: the central-eastern equatorial Pacific."""
    return (NamedBox(lat_range=(-10.0, 10.0), lon_range=(170.0, 250.0), label="equatorial_pacific"),)


@dataclass(frozen=True)
class SyntheticTruth:
    """Ground truth planted in a synthetic dataset."""

    driver_mask: RegionMask
    """Cells that causally determine the target."""

    driver_lag: int = 0
    """Months by which the lead-1 response reaches back before the input window."""

    noise_level: float = 0.1
    """White-noise standard deviation relative to the unit-variance signal (fields and targets)."""

    lag_growth: int = 0
    """Additional response lag per lead month beyond 1."""

    hc_shift: int = 3
    """Months by which heat-content channels trail the driver signal."""

    linear_coef: float = 1.0
    """Linear response coefficient of the planted index."""

    quadratic_coef: float = 0.02
    """Quadratic response coefficient of the planted index."""

    ar_coef: float = 0.8
    """AR(1) coefficient of every monthly coefficient series."""

    n_background: int = 8
    """Number of smooth background patterns per variable."""

    smoothing: float = 2.0
    """Gaussian smoothing width of the spatial patterns, in cells."""

    spring_noise_boost: float = 1.0
    """Target-noise multiplier for spring target months (1 disables the planted barrier)."""

    def lag(self, lead: int) -> int:
        """Response lag for a lead."""
        return self.driver_lag + self.lag_growth * (lead - 1)

    def response(self, driver: FloatArray) -> FloatArray:
        """Planted index response to driver values."""
        return self.linear_coef * driver + self.quadratic_coef * (driver * driver - 1.0)


class SynthesisConfig(Serializable):
    """Settings of the synthetic generator (the ``synthesis`` section of a run config)."""

    n_samples: int = Field(2000, ge=1, description="Number of samples (consecutive months).")
    max_lead: int = Field(
        MAX_LEAD_MONTHS, ge=1, le=MAX_LEAD_MONTHS, description="Targets stored for leads 1..max_lead."
    )
    noise_level: float = Field(0.1, ge=0.0, description="Noise standard deviation ratio.")
    driver_lag: int = Field(0, ge=0, le=24, description="Response lag of lead 1 beyond the input window.")
    lag_growth: int = Field(0, ge=0, le=6, description="Extra response lag per lead month.")
    hc_shift: int = Field(3, ge=0, le=24, description="Heat-content lag behind the driver, months.")
    linear_coef: float = Field(1.0, description="Linear response coefficient.")
    quadratic_coef: float = Field(0.02, description="Quadratic response coefficient.")
    ar_coef: float = Field(0.8, gt=-1.0, lt=1.0, description="AR(1) coefficient of monthly coefficients.")
    n_background: int = Field(8, ge=0, le=256, description="Background patterns per variable.")
    smoothing: float = Field(2.0, gt=0.0, description="Pattern smoothing width in cells.")
    spring_noise_boost: float = Field(1.0, ge=0.0, description="Target-noise multiplier for spring months.")
    driver_boxes: list[tuple[float, float, float, float]] = Field(
        default_factory=lambda: [(-10.0, 10.0, 170.0, 250.0)],
        description="Driver boxes as (lat_min, lat_max, lon_min, lon_max).",
    )

    @model_validator(mode="before")
    @classmethod
    def _parse_boxes(cls, raw: object) -> object:
        if not isinstance(raw, dict) or "driver_boxes" not in raw:
            return raw
        boxes = raw["driver_boxes"]
        if isinstance(boxes, (list, tuple)) and boxes and all(isinstance(v, str) for v in boxes):
            boxes = ",".join(boxes)
        if isinstance(boxes, str):
            boxes = boxes.replace(";", ",").split(",")
        if isinstance(boxes, (list, tuple)) and boxes and not isinstance(boxes[0], (list, tuple)):
            values = [float(v) for v in boxes if str(v).strip()]
            if len(values) % 4:
                raise ValueError("driver_boxes needs groups of four numbers")
            raw = {**raw, "driver_boxes": [tuple(values[i : i + 4]) for i in range(0, len(values), 4)]}
        return raw

    def truth(self, grid: GridSpec) -> SyntheticTruth:
        """Build the planted truth for a grid."""
        boxes = [
            NamedBox(lat_range=(a, b), lon_range=(c, d), label=f"driver_{i}")
            for i, (a, b, c, d) in enumerate(self.driver_boxes)
        ]
        return SyntheticTruth(
            driver_mask=RegionMask.from_boxes(grid, boxes),
            driver_lag=self.driver_lag,
            noise_level=self.noise_level,
            lag_growth=self.lag_growth,
            hc_shift=self.hc_shift,
            linear_coef=self.linear_coef,
            quadratic_coef=self.quadratic_coef,
            ar_coef=self.ar_coef,
            n_background=self.n_background,
            smoothing=self.smoothing,
            spring_noise_boost=self.spring_noise_boost,
        )


@dataclass(frozen=True, eq=False)
class GridSample:
    """One example: six anomaly fields and the targets for leads ``1..len(targets)``."""

    fields: FloatArray
    """Shape ``[6, nlat, nlon]`` in channel order :data:`CHANNEL_NAMES`."""

    start_month: int
    """Calendar month (1..12) of the most recent input month."""

    targets: FloatArray
    """Three-month averaged index per lead; ``targets[k]`` belongs to lead ``k + 1``."""

    def target_month(self, lead: int) -> int:
        """Calendar month the forecast at ``lead`` verifies on."""
        return target_month(self.start_month, lead)


def target_month(start_month: int, lead: int) -> int:
    """Calendar month ``lead`` months after ``start_month``.

    Examples:

    .. code-block:: python

    >>> target_month(11, 3)
    2
    """
    return (start_month - 1 + lead) % 12 + 1


@dataclass(frozen=True, eq=False)
class GridDataset:
    """Stack of samples on a common grid."""

    grid: GridSpec
    fields: FloatArray
    """Shape ``[n, 6, nlat, nlon]``."""

    start_months: np.ndarray
    """Shape ``[n]``, calendar months 1..12."""

    targets: FloatArray
    """Shape ``[n, n_leads]``; column ``k`` belongs to lead ``k + 1``."""

    def __post_init__(self) -> None:
        """Validate the array shapes."""
        n = self.fields.shape[0]
        if self.fields.ndim != 4 or self.fields.shape[1] != N_CHANNELS:
            raise ShapeError(f"fields must be [n, {N_CHANNELS}, nlat, nlon], got {self.fields.shape}")
        if self.fields.shape[2:] != self.grid.shape:
            raise ShapeError(f"fields grid {self.fields.shape[2:]} does not match {self.grid.shape}")
        if self.start_months.shape != (n,) or self.targets.ndim != 2 or self.targets.shape[0] != n:
            raise ShapeError(f"start_months {self.start_months.shape} / targets {self.targets.shape} do not match {n}")

    def __len__(self) -> int:
        """Number of samples."""
        return int(self.fields.shape[0])

    def __getitem__(self, index: int) -> GridSample:
        """Sample ``index``."""
        return GridSample(
            fields=self.fields[index],
            start_month=int(self.start_months[index]),
            targets=self.targets[index],
        )

    @property
    def n_leads(self) -> int:
        """Number of stored leads."""
        return int(self.targets.shape[1])

    def target(self, lead: int) -> FloatArray:
        """Targets at ``lead`` for every sample.

        Raises:
            ConfigError: If the lead is not stored.
        """
        if not 1 <= lead <= self.n_leads:
            raise ConfigError(f"lead={lead} is not stored (dataset has leads 1..{self.n_leads})")
        return self.targets[:, lead - 1]

    def target_months(self, lead: int) -> np.ndarray:
        """Verification month of every sample at ``lead``."""
        return (self.start_months.astype(np.int64) - 1 + lead) % 12 + 1

    def subset(self, indices: Sequence[int]) -> "GridDataset":
        """Samples at ``indices``, in that order."""
        idx = np.asarray(indices, dtype=np.int64)
        return replace(self, fields=self.fields[idx], start_months=self.start_months[idx], targets=self.targets[idx])

    def masked(self, mask: RegionMask) -> "GridDataset":
        """Zero every input cell outside ``mask`` in all channels."""
        mask.check_grid(self.grid)
        return replace(self, fields=np.where(mask.cells, self.fields, 0.0))

    def scaled(self, factor: float) -> "GridDataset":
        """Multiply every input field by ``factor`` (targets unchanged)."""
        return replace(self, fields=self.fields * factor)


def three_month_average(series: Sequence[float], center: int) -> float:
    """Mean of the three consecutive values centered on index ``center``.

    Examples:

    .. code-block:: python

    >>> three_month_average([1.0, 2.0, 3.0], 1)
    2.0

    Raises:
        ValueError: If ``center`` has no neighbor on either side.
    """
    values = np.asarray(series, dtype=np.float64)
    if not 1 <= center <= values.size - 2:
        raise ValueError(f"center={center} needs a neighbor on both sides in a series of length {values.size}")
    return float((values[center - 1] + values[center] + values[center + 1]) / 3.0)


def nino34(sst_field: FloatArray, grid: GridSpec) -> float:
    """Cosine-latitude weighted mean SST anomaly over 5S-5N, 170W-120W.

    Raises:
        ShapeError: If the field does not match the grid or the grid does not cover the box.
    """
    field_ = np.asarray(sst_field, dtype=np.float64)
    if field_.shape != grid.shape:
        raise ShapeError(f"SST field {field_.shape} does not match grid {grid.shape}")
    lat_range, lon_range = NINO34_BOX
    cells = grid.box_cells(lat_range, lon_range)
    if not grid.covers(lat_range, lon_range) or not cells.any():
        raise ShapeError("Grid does not cover the Nino3.4 box (5S-5N, 170W-120W)")
    weights = np.where(cells, np.array([cos(radians(v)) for v in grid.lats])[:, None], 0.0)
    return float((weights * field_).sum() / weights.sum())


def _smooth_pattern(rng: np.random.Generator, grid: GridSpec, sigma: float) -> FloatArray:
    raw = gaussian_filter(rng.standard_normal(grid.shape), sigma=sigma, mode=("nearest", "wrap"))
    rms = float(np.sqrt(np.mean(raw * raw)))
    return raw / rms if rms > 0 else raw


def _ar1(rng: np.random.Generator, phi: float, shape: tuple[int, ...]) -> FloatArray:
    """AR(1) series along axis 0 with unit stationary variance."""
    shocks = rng.standard_normal(shape)
    out = np.empty(shape)
    out[0] = shocks[0]
    scale = np.sqrt(1.0 - phi * phi)
    for t in range(1, shape[0]):
        out[t] = phi * out[t - 1] + scale * shocks[t]
    return out


def _driver_pattern(mask: RegionMask, sigma: float) -> FloatArray:
    smooth = gaussian_filter(mask.cells.astype(np.float64), sigma=sigma, mode=("nearest", "wrap"))
    pattern = np.where(mask.cells, smooth, 0.0)
    return pattern / pattern[mask.cells].mean()


def synth_generate(
    seed: int,
    n_samples: int,
    grid: GridSpec,
    truth: SyntheticTruth,
    *,
    max_lead: int = MAX_LEAD_MONTHS,
) -> tuple[GridDataset, SyntheticTruth]:
    """Generate a planted-signal dataset.

    Fields are smooth background patterns with AR(1) monthly coefficients plus white noise. The background is zero
    on the driver mask, where an AR(1) driver series ``d`` is imprinted instead; heat-content channels carry a
    smoother imprint of ``d`` delayed by ``truth.hc_shift`` months. The index for lead ``L`` responds to ``d`` with a
    delay of ``L + 1 + truth.lag(L)`` months, so with zero lag the three input months carry exactly the three months
    its three-month average needs.

    Args:
        seed (int): Root seed; the output is a pure function of the arguments.
        n_samples (int): Number of samples (consecutive months).
        grid (GridSpec): Target grid.
        truth (SyntheticTruth): Planted ground truth.
        max_lead (int): Targets are stored for leads ``1..max_lead``.

    Returns:
        The dataset and the truth it was generated from.

    Raises:
        ValueError: If ``n_samples`` < 1.
        ShapeError: If the driver mask does not match the grid.
        EmptyResultError: If the driver mask is empty.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be at least 1, got {n_samples}")
    truth.driver_mask.check_grid(grid)
    if truth.driver_mask.count == 0:
        raise EmptyResultError("Driver mask selects no cell")
    rng = np.random.default_rng(seed)
    mask = truth.driver_mask.cells
    max_back = max(truth.hc_shift, max(truth.lag(lead) for lead in range(1, max_lead + 1)))
    burn = 24
    first = burn + 2 + max_back
    n_months = first + n_samples + max_lead + 2

    count = truth.n_background
    sst_patterns = [np.where(mask, 0.0, _smooth_pattern(rng, grid, truth.smoothing)) for _ in range(count)]
    hc_patterns = [np.where(mask, 0.0, _smooth_pattern(rng, grid, truth.smoothing * 1.5)) for _ in range(count)]
    sst_coefs = _ar1(rng, truth.ar_coef, (n_months, truth.n_background))
    hc_coefs = _ar1(rng, truth.ar_coef, (n_months, truth.n_background))
    driver = _ar1(rng, truth.ar_coef, (n_months,))
    q_sst = _driver_pattern(truth.driver_mask, truth.smoothing)
    q_hc = _driver_pattern(truth.driver_mask, truth.smoothing * 2.0)

    def monthly(patterns: list[FloatArray], coefs: FloatArray) -> FloatArray:
        if not patterns:
            return np.zeros((n_months, *grid.shape))
        return np.tensordot(coefs, np.stack(patterns), axes=(1, 0))

    sst = monthly(sst_patterns, sst_coefs) + driver[:, None, None] * q_sst
    hc_driver = np.concatenate([np.zeros(truth.hc_shift), driver[: n_months - truth.hc_shift]])
    hc = monthly(hc_patterns, hc_coefs) + hc_driver[:, None, None] * q_hc

    ends = first + np.arange(n_samples)
    fields = np.empty((n_samples, N_CHANNELS, *grid.shape))
    for j in range(3):
        fields[:, j] = sst[ends - 2 + j]
        fields[:, 3 + j] = hc[ends - 2 + j]
    fields += truth.noise_level * rng.standard_normal(fields.shape)

    start_months = ((ends % 12) + 1).astype(np.uint8)
    targets = np.empty((n_samples, max_lead))
    for lead in range(1, max_lead + 1):
        delay = lead + 1 + truth.lag(lead)
        series = np.zeros(n_months)
        series[delay:] = truth.response(driver[: n_months - delay])
        targets[:, lead - 1] = [three_month_average(series, int(t) + lead) for t in ends]
    target_noise = rng.standard_normal(targets.shape)
    if truth.noise_level > 0:
        scale = truth.noise_level * targets.std(axis=0)
        months = (start_months.astype(np.int64)[:, None] - 1 + np.arange(1, max_lead + 1)[None, :]) % 12 + 1
        boost = np.where(np.isin(months, SPRING_MONTHS), truth.spring_noise_boost, 1.0)
        targets = targets + scale[None, :] * boost * target_noise
    logger.info(
        f"Generated {n_samples} samples on a {grid.nlat}x{grid.nlon} grid "
        f"(noise={truth.noise_level}, lag={truth.driver_lag}, driver cells={truth.driver_mask.count})"
    )
    return GridDataset(grid=grid, fields=fields, start_months=start_months, targets=targets), truth


def planted_target(sample: GridSample, truth: SyntheticTruth) -> float:
    """Lead-1 target recomputed from the driver cells of the three SST inputs.

    With zero noise and zero lag this reproduces ``sample.targets[0]``: the driver value of each input month is
    the mean of its SST field over the driver mask.
    """
    cells = truth.driver_mask.cells
    driver = np.array([sample.fields[j][cells].mean() for j in range(3)])
    return float(truth.response(driver).mean())


def driver_signal(dataset: GridDataset, mask: RegionMask) -> FloatArray:
    """Mean of the three SST channels over ``mask`` for every sample."""
    mask.check_grid(dataset.grid)
    return dataset.fields[:, :3][:, :, mask.cells].mean(axis=(1, 2))


def save_grid(path: PathLike, dataset: GridDataset) -> None:
    """Write a dataset in the PPTVDAT1 format.

    Layout: magic, header (n_samples, nlat, nlon, channels as u64; lat0, dlat, lon0, dlon as f64), then per sample
    the start month (u8), the target count (u64), the targets and the raw field floats, all little-endian.
    """
    grid = dataset.grid
    writer = RecordWriter(DATASET_MAGIC)
    for extent in (len(dataset), grid.nlat, grid.nlon, N_CHANNELS):
        writer.u64(extent)
    for value in (grid.lat0, grid.dlat, grid.lon0, grid.dlon):
        writer.f64(value)
    for i in range(len(dataset)):
        writer.u8(int(dataset.start_months[i]))
        writer.u64(dataset.n_leads)
        writer.floats(dataset.targets[i])
        writer.floats(dataset.fields[i])
    writer.save(path)


def load_grid(path: PathLike) -> GridDataset:
    """Read a PPTVDAT1 dataset.

    Raises:
        BadMagicError: If the file is not a dataset file.
        TruncatedPayloadError: If the file ends early; no partial dataset is returned.
        ExtentOverflowError: If declared extents exceed the supported limits.
        FormatError: If records disagree with the header.
    """
    reader = RecordReader.open(path, DATASET_MAGIC)
    n, nlat, nlon, channels = (reader.extent(name) for name in ("n_samples", "nlat", "nlon", "channels"))
    lat0, dlat, lon0, dlon = (reader.f64(name) for name in ("lat0", "dlat", "lon0", "dlon"))
    if channels != N_CHANNELS:
        raise FormatError(f"Dataset declares {channels} channels, expected {N_CHANNELS}")
    try:
        grid = GridSpec(nlat=nlat, nlon=nlon, lat0=lat0, dlat=dlat, lon0=lon0, dlon=dlon)
    except ValueError as err:
        raise FormatError(f"Dataset header describes an invalid grid: {err}") from err
    cells = N_CHANNELS * nlat * nlon
    if n * cells > MAX_ELEMENTS:
        raise ExtentOverflowError(f"Extent overflow: {n} samples of {cells} values exceed {MAX_ELEMENTS}")
    # each record holds at least a start month, a target count and its fields
    reader.require(n * (9 + 8 * cells), "samples")
    fields = np.empty((n, N_CHANNELS, nlat, nlon))
    start_months = np.empty(n, dtype=np.uint8)
    targets: Optional[FloatArray] = None
    for i in range(n):
        start_months[i] = reader.u8(f"start_month[{i}]")
        count = reader.extent(f"target_count[{i}]")
        if targets is None:
            reader.require(8 * (count + cells) + (n - 1) * (9 + 8 * (count + cells)), "samples")
            targets = np.empty((n, count))
        elif count != targets.shape[1]:
            raise FormatError(f"Sample {i} has {count} targets, sample 0 has {targets.shape[1]}")
        targets[i] = reader.floats((count,), f"targets[{i}]")
        fields[i] = reader.floats((N_CHANNELS, nlat, nlon), f"fields[{i}]")
    if not reader.exhausted:
        raise FormatError(f"Trailing bytes after {n} samples in {path}")
    if targets is None:
        targets = np.empty((0, 0))
    return GridDataset(grid=grid, fields=fields, start_months=start_months, targets=targets)


def export_field_csv(path: PathLike, field_: FloatArray, grid: GridSpec) -> None:
    """Write one field as ``lat,lon,value`` rows (17 significant digits), row-major over the grid."""
    values = np.asarray(field_, dtype=np.float64)
    if values.shape != grid.shape:
        raise ShapeError(f"Field {values.shape} does not match grid {grid.shape}")
    with Path(path).open("w", newline="", encoding="utf-8") as stream:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(["lat", "lon", "value"])
        for i, lat in enumerate(grid.lats):
            for j, lon in enumerate(grid.lons):
                writer.writerow([f"{lat:.17g}", f"{lon:.17g}", f"{values[i, j]:.17g}"])


def save_mask_csv(path: PathLike, mask: RegionMask, grid: GridSpec) -> None:
    """Write a region mask as ``lat,lon,selected`` rows."""
    mask.check_grid(grid)
    with Path(path).open("w", newline="", encoding="utf-8") as stream:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(["lat", "lon", "selected"])
        for i, lat in enumerate(grid.lats):
            for j, lon in enumerate(grid.lons):
                writer.writerow([f"{lat:.17g}", f"{lon:.17g}", int(mask.cells[i, j])])


def load_mask_csv(path: PathLike, grid: GridSpec) -> RegionMask:
    """Read a mask written by :func:`save_mask_csv`."""
    with Path(path).open(newline="", encoding="utf-8") as stream:
        rows = list(csv.DictReader(stream))
    if len(rows) != grid.nlat * grid.nlon:
        raise ShapeError(f"Mask file has {len(rows)} cells, grid has {grid.nlat * grid.nlon}")
    cells = np.array([int(r["selected"]) != 0 for r in rows], dtype=bool).reshape(grid.shape)
    return RegionMask(cells=cells)


__all__ = [
    "CHANNEL_NAMES",
    "GridDataset",
    "GridSample",
    "GridSpec",
    "NamedBox",
    "RegionMask",
    "SynthesisConfig",
    "SyntheticTruth",
    "default_driver_boxes",
    "driver_signal",
    "export_field_csv",
    "load_grid",
    "load_mask_csv",
    "nino34",
    "planted_target",
    "save_grid",
    "save_mask_csv",
    "synth_generate",
    "target_month",
    "three_month_average",
]
