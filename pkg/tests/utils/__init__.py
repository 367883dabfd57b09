"""Shared helpers for ensocast tests."""

from collections.abc import Generator
from contextlib import contextmanager
from typing import Optional

import numpy as np

from ensocast.core.attribution import configure_attribution
from ensocast.core.data import GridSpec
from ensocast.core.report import configure_report

SMALL_GRID = GridSpec(nlat=8, nlon=24, lat0=-17.5, dlat=5.0, lon0=142.5, dlon=5.0)
"""Tropical Pacific window (20S-20N, 140E-100W) holding the default driver box and the Nino3.4 box."""


@contextmanager
def configure_attribution_context(
    workers: Optional[int] = None, chunk_size: Optional[int] = None, occlusion_batch: Optional[int] = None
) -> Generator[None, None, None]:
    """Context manager to temporarily configure attribution settings."""
    try:
        configure_attribution(workers=workers, chunk_size=chunk_size, occlusion_batch=occlusion_batch)
        yield
    finally:
        configure_attribution()


@contextmanager
def configure_report_context(template: Optional[str] = None) -> Generator[None, None, None]:
    """Context manager to temporarily configure report rendering."""
    try:
        configure_report(template=template)
        yield
    finally:
        configure_report()


def random_fields(n: int, grid: GridSpec = SMALL_GRID, seed: int = 0) -> np.ndarray:
    """Standard-normal field stacks of shape ``[n, 6, H, W]``."""
    return np.random.default_rng(seed).standard_normal((n, 6, *grid.shape))
