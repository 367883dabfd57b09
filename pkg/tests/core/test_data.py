"""Tests for data module."""

from pathlib import Path
from typing import Any

import numpy as np
import pytest

from ensocast.core.codec import RecordWriter
from ensocast.core.constants import DATASET_MAGIC
from ensocast.core.data import (
    GridDataset,
    GridSpec,
    NamedBox,
    RegionMask,
    SynthesisConfig,
    SyntheticTruth,
    default_driver_boxes,
    driver_signal,
    export_field_csv,
    load_grid,
    load_mask_csv,
    nino34,
    planted_target,
    save_grid,
    save_mask_csv,
    synth_generate,
    target_month,
    three_month_average,
)
from ensocast.core.exceptions import (
    BadMagicError,
    ConfigError,
    EmptyResultError,
    ExtentOverflowError,
    FormatError,
    ShapeError,
    TruncatedPayloadError,
)

from tests.utils import SMALL_GRID


def _header_only(path: Path, n: int, grid: GridSpec) -> None:
    writer = RecordWriter(DATASET_MAGIC)
    for extent in (n, grid.nlat, grid.nlon, 6):
        writer.u64(extent)
    for value in (grid.lat0, grid.dlat, grid.lon0, grid.dlon):
        writer.f64(value)
    writer.save(path)


def _truth(noise: float = 0.0, **kwargs: Any) -> SyntheticTruth:
    return SyntheticTruth(
        driver_mask=RegionMask.from_boxes(SMALL_GRID, default_driver_boxes()), noise_level=noise, **kwargs
    )


@pytest.fixture(scope="module")
def clean() -> GridDataset:
    """Noise-free planted dataset on the small grid."""
    dataset, _ = synth_generate(3, 60, SMALL_GRID, _truth(), max_lead=6)
    return dataset


class TestGridSpec:
    """Test grid geometry."""

    def test_defaults(self) -> None:
        """Test the default 5 degree global grid."""
        grid = GridSpec()
        assert grid.shape == (24, 72)
        assert grid.lats[0] == -57.5
        assert grid.lats[-1] == 57.5
        assert grid.lons[-1] == 357.5

    def test_invalid_grids(self) -> None:
        """Test that rows past a pole and zero steps are rejected."""
        with pytest.raises(ConfigError, match="pole"):
            GridSpec.parse({"nlat": 40, "lat0": 0.0, "dlat": 5.0})
        with pytest.raises(ConfigError, match="dlat"):
            GridSpec.parse({"dlat": 0.0})

    def test_default_driver_box_cells(self) -> None:
        """Test the driver box on the default grid: 4 rows by 16 columns."""
        grid = GridSpec()
        mask = RegionMask.from_boxes(grid, default_driver_boxes())
        assert mask.count == 64
        assert mask.cells.any(axis=1).sum() == 4

    def test_wrapping_box(self) -> None:
        """Test a box crossing the prime meridian."""
        cells = GridSpec().box_cells((-2.5, 2.5), (350.0, 10.0))
        np.testing.assert_array_equal(np.flatnonzero(cells.any(axis=0)), [0, 1, 70, 71])

    def test_covers(self) -> None:
        """Test coverage of boxes by a regional grid."""
        assert SMALL_GRID.covers((-10.0, 10.0), (170.0, 250.0))
        assert not SMALL_GRID.covers((-10.0, 10.0), (100.0, 150.0))
        assert not SMALL_GRID.covers((-30.0, 10.0), (170.0, 180.0))
        assert GridSpec().covers((-60.0, 60.0), (0.0, 360.0))


class TestRegionMask:
    """Test region masks."""

    def test_box_outside_grid(self) -> None:
        """Test that a box off the grid raises ShapeError."""
        with pytest.raises(ShapeError, match="outside"):
            RegionMask.from_boxes(SMALL_GRID, [NamedBox(lat_range=(40.0, 50.0), lon_range=(170.0, 180.0))])

    def test_box_between_centres(self) -> None:
        """Test that a box holding no cell centre raises EmptyResultError."""
        with pytest.raises(EmptyResultError):
            RegionMask.from_boxes(SMALL_GRID, [NamedBox(lat_range=(0.0, 1.0), lon_range=(170.0, 171.0))])

    def test_complement_and_equality(self) -> None:
        """Test complement counts and cell-wise equality."""
        mask = RegionMask.from_boxes(SMALL_GRID, default_driver_boxes())
        assert mask.count + mask.complement().count == SMALL_GRID.nlat * SMALL_GRID.nlon
        assert mask == RegionMask(cells=mask.cells.copy())
        assert mask != mask.complement()
        assert RegionMask.full(SMALL_GRID).count == 192

    def test_check_grid(self) -> None:
        """Test mask and grid agreement."""
        with pytest.raises(ShapeError):
            RegionMask.full(GridSpec()).check_grid(SMALL_GRID)


class TestTargets:
    """Test target helpers."""

    def test_three_month_average(self) -> None:
        """Test the centered mean and its bounds."""
        assert three_month_average([1.0, 2.0, 6.0, 10.0], 2) == 6.0
        with pytest.raises(ValueError, match="neighbor"):
            three_month_average([1.0, 2.0, 3.0], 0)

    @pytest.mark.parametrize(("start", "lead", "month"), [(1, 1, 2), (11, 3, 2), (12, 12, 12), (6, 23, 5)])
    def test_target_month(self, start: int, lead: int, month: int) -> None:
        """Test calendar arithmetic of verification months."""
        assert target_month(start, lead) == month

    def test_nino34_selects_box(self) -> None:
        """Test that only the Nino3.4 box contributes."""
        field = np.zeros(SMALL_GRID.shape)
        box = SMALL_GRID.box_cells((-5.0, 5.0), (190.0, 240.0))
        assert box.sum() == 20
        field[box] = 2.0
        field[~box] = 100.0
        assert nino34(field, SMALL_GRID) == pytest.approx(2.0)

    def test_nino34_is_linear(self) -> None:
        """Test nino34(a*F + b*G) == a*nino34(F) + b*nino34(G)."""
        rng = np.random.default_rng(12)
        first, second = rng.standard_normal((2, *SMALL_GRID.shape))
        for a, b in ((2.0, -3.0), (0.5, 0.25), (-1.0, 0.0)):
            combined = nino34(a * first + b * second, SMALL_GRID)
            expected = a * nino34(first, SMALL_GRID) + b * nino34(second, SMALL_GRID)
            assert abs(combined - expected) < 1e-12

    def test_nino34_needs_coverage(self) -> None:
        """Test that a grid without the box raises ShapeError."""
        grid = GridSpec(nlat=4, nlon=4, lat0=30.0, dlat=5.0, lon0=0.0, dlon=5.0)
        with pytest.raises(ShapeError, match="Nino3.4"):
            nino34(np.zeros(grid.shape), grid)


class TestSynthGenerate:
    """Test the planted-signal generator."""

    def test_shapes(self, clean: GridDataset) -> None:
        """Test dataset extents."""
        assert len(clean) == 60
        assert clean.fields.shape == (60, 6, 8, 24)
        assert clean.n_leads == 6
        assert set(np.unique(clean.start_months)) <= set(range(1, 13))

    def test_deterministic(self) -> None:
        """Test that equal seeds give bit-identical datasets and different seeds do not."""
        first, _ = synth_generate(5, 12, SMALL_GRID, _truth(0.2), max_lead=3)
        second, _ = synth_generate(5, 12, SMALL_GRID, _truth(0.2), max_lead=3)
        third, _ = synth_generate(6, 12, SMALL_GRID, _truth(0.2), max_lead=3)
        np.testing.assert_array_equal(first.fields, second.fields)
        np.testing.assert_array_equal(first.targets, second.targets)
        assert not np.array_equal(first.fields, third.fields)

    def test_planted_target_is_exact(self, clean: GridDataset) -> None:
        """Test that noise-free targets follow from the driver cells of the inputs."""
        truth = _truth()
        for i in range(len(clean)):
            assert planted_target(clean[i], truth) == pytest.approx(clean[i].targets[0], abs=1e-12)

    def test_driver_signal_varies(self, clean: GridDataset) -> None:
        """Test that the mean over the driver cells follows the AR(1) driver."""
        truth = _truth()
        signal = driver_signal(clean, truth.driver_mask)
        assert signal.shape == (60,)
        assert np.std(signal) > 0.1

    def test_masked_zeroes_driver_cells(self, clean: GridDataset) -> None:
        """Test that masking with the complement zeroes every driver cell."""
        truth = _truth()
        outside = clean.masked(truth.driver_mask.complement())
        assert not outside.fields[:, :, truth.driver_mask.cells].any()

    def test_noise_changes_targets(self) -> None:
        """Test that target noise scales with noise_level."""
        quiet, _ = synth_generate(1, 40, SMALL_GRID, _truth(0.0), max_lead=2)
        noisy, _ = synth_generate(1, 40, SMALL_GRID, _truth(0.5), max_lead=2)
        gap = np.std(noisy.targets[:, 0] - quiet.targets[:, 0]) / np.std(quiet.targets[:, 0])
        assert 0.3 < gap < 0.7

    def test_rejects_bad_arguments(self) -> None:
        """Test argument validation."""
        with pytest.raises(ValueError, match="n_samples"):
            synth_generate(0, 0, SMALL_GRID, _truth())
        with pytest.raises(ShapeError):
            synth_generate(0, 5, GridSpec(), _truth())
        empty = SyntheticTruth(driver_mask=RegionMask(cells=np.zeros(SMALL_GRID.shape, dtype=bool)))
        with pytest.raises(EmptyResultError):
            synth_generate(0, 5, SMALL_GRID, empty)

    def test_lag_moves_signal_out_of_window(self) -> None:
        """Test that a positive lag breaks the exact reconstruction."""
        truth = _truth(driver_lag=3)
        dataset, _ = synth_generate(2, 40, SMALL_GRID, truth, max_lead=2)
        recon = np.array([planted_target(dataset[i], truth) for i in range(len(dataset))])
        assert not np.allclose(recon, dataset.targets[:, 0])


class TestSynthesisConfig:
    """Test the synthesis section."""

    def test_boxes_from_flat_values(self) -> None:
        """Test the key=value form of driver boxes."""
        config = SynthesisConfig.parse({"driver_boxes": "-10,10,170,250;-5,5,150,160"})
        assert config.driver_boxes == [(-10.0, 10.0, 170.0, 250.0), (-5.0, 5.0, 150.0, 160.0)]
        assert config.truth(SMALL_GRID).driver_mask.count == 64 + 2 * 2

    def test_boxes_need_groups_of_four(self) -> None:
        """Test that stray values are rejected."""
        with pytest.raises(ConfigError, match="four"):
            SynthesisConfig.parse({"driver_boxes": [1.0, 2.0, 3.0]})

    def test_truth_copies_settings(self) -> None:
        """Test that truth() carries every generator setting."""
        truth = SynthesisConfig(noise_level=0.3, driver_lag=2, hc_shift=1).truth(SMALL_GRID)
        assert (truth.noise_level, truth.driver_lag, truth.hc_shift) == (0.3, 2, 1)
        assert truth.lag(3) == 2


class TestGridDataset:
    """Test dataset views."""

    def test_shape_validation(self) -> None:
        """Test that mismatched arrays are rejected."""
        with pytest.raises(ShapeError):
            GridDataset(
                grid=SMALL_GRID,
                fields=np.zeros((2, 5, 8, 24)),
                start_months=np.ones(2, dtype=np.uint8),
                targets=np.zeros((2, 1)),
            )
        with pytest.raises(ShapeError):
            GridDataset(
                grid=SMALL_GRID,
                fields=np.zeros((2, 6, 8, 24)),
                start_months=np.ones(3, dtype=np.uint8),
                targets=np.zeros((2, 1)),
            )

    def test_target_lookup(self, clean: GridDataset) -> None:
        """Test target columns and verification months."""
        np.testing.assert_array_equal(clean.target(2), clean.targets[:, 1])
        with pytest.raises(ConfigError, match="lead=7"):
            clean.target(7)
        months = clean.target_months(3)
        assert months[0] == target_month(int(clean.start_months[0]), 3)

    def test_subset_masked_scaled(self, clean: GridDataset) -> None:
        """Test derived datasets."""
        part = clean.subset([4, 1])
        np.testing.assert_array_equal(part.fields[0], clean.fields[4])
        assert len(part) == 2
        full = clean.masked(RegionMask.full(SMALL_GRID))
        np.testing.assert_array_equal(full.fields, clean.fields)
        np.testing.assert_array_equal(clean.scaled(2.0).fields, 2.0 * clean.fields)


class TestGridFiles:
    """Test the dataset file format and CSV exports."""

    def test_round_trip_is_bit_exact(self, clean: GridDataset, tmp_path: Path) -> None:
        """Test save_grid and load_grid."""
        path = tmp_path / "data.bin"
        save_grid(path, clean)
        loaded = load_grid(path)
        assert loaded.grid == clean.grid
        np.testing.assert_array_equal(loaded.fields, clean.fields)
        np.testing.assert_array_equal(loaded.targets, clean.targets)
        np.testing.assert_array_equal(loaded.start_months, clean.start_months)

    def test_header_layout(self, clean: GridDataset, tmp_path: Path) -> None:
        """Test the fixed header and per-sample record sizes."""
        path = tmp_path / "data.bin"
        save_grid(path, clean.subset([0, 1]))
        payload = path.read_bytes()
        assert payload[:8] == DATASET_MAGIC
        assert int.from_bytes(payload[8:16], "little") == 2
        per_sample = 1 + 8 + 8 * 6 + 8 * 6 * 8 * 24
        assert len(payload) == 8 + 4 * 8 + 4 * 8 + 2 * per_sample

    def test_empty_dataset(self, clean: GridDataset, tmp_path: Path) -> None:
        """Test that a dataset without samples round-trips."""
        path = tmp_path / "empty.bin"
        save_grid(path, clean.subset([]))
        assert len(load_grid(path)) == 0

    def test_bad_magic(self, tmp_path: Path) -> None:
        """Test that a foreign file is rejected."""
        path = tmp_path / "other.bin"
        path.write_bytes(b"PPTVMDL1" + b"\x00" * 64)
        with pytest.raises(BadMagicError):
            load_grid(path)

    def test_truncated(self, clean: GridDataset, tmp_path: Path) -> None:
        """Test that a cut file yields no partial dataset."""
        path = tmp_path / "data.bin"
        save_grid(path, clean.subset([0, 1]))
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(TruncatedPayloadError):
            load_grid(path)

    def test_huge_header_overflows_before_allocating(self, tmp_path: Path) -> None:
        """Test that extents whose product exceeds the element cap are rejected from the header alone."""
        path = tmp_path / "huge.bin"
        _header_only(path, 1 << 24, GridSpec(nlat=4096, nlon=8192, lat0=-80.0, dlat=0.01, lon0=0.0, dlon=0.01))
        with pytest.raises(ExtentOverflowError, match="samples"):
            load_grid(path)

    def test_header_without_samples_is_truncated(self, tmp_path: Path) -> None:
        """Test that a header promising samples that are not there is rejected before reading them."""
        path = tmp_path / "hollow.bin"
        _header_only(path, 100_000, SMALL_GRID)
        with pytest.raises(TruncatedPayloadError, match="samples"):
            load_grid(path)

    def test_huge_target_count_is_truncated(self, tmp_path: Path) -> None:
        """Test that an oversized target count is checked against the remaining bytes."""
        path = tmp_path / "targets.bin"
        _header_only(path, 1, SMALL_GRID)
        payload = path.read_bytes() + b"\x03" + (1 << 24).to_bytes(8, "little") + b"\x00" * (8 * 6 * 8 * 24)
        path.write_bytes(payload)
        with pytest.raises(TruncatedPayloadError):
            load_grid(path)

    def test_trailing_bytes(self, clean: GridDataset, tmp_path: Path) -> None:
        """Test that extra bytes after the last sample are rejected."""
        path = tmp_path / "data.bin"
        save_grid(path, clean.subset([0]))
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError, match="Trailing"):
            load_grid(path)

    def test_mask_csv_round_trip(self, tmp_path: Path) -> None:
        """Test mask export and import."""
        mask = RegionMask.from_boxes(SMALL_GRID, default_driver_boxes())
        path = tmp_path / "mask.csv"
        save_mask_csv(path, mask, SMALL_GRID)
        assert path.read_text().splitlines()[0] == "lat,lon,selected"
        assert load_mask_csv(path, SMALL_GRID) == mask

    def test_field_csv(self, tmp_path: Path) -> None:
        """Test field export rows."""
        path = tmp_path / "field.csv"
        export_field_csv(path, np.full(SMALL_GRID.shape, 0.1), SMALL_GRID)
        lines = path.read_text().splitlines()
        assert lines[0] == "lat,lon,value"
        assert lines[1] == "-17.5,142.5,0.10000000000000001"
        assert len(lines) == 1 + 192
