"""Gradient attribution: practical partial total variation (PPTV), baselines, reductions and exports.

PPTV credits input cell ``k`` with the expected absolute partial derivative of the model output,
``E_x |df/dx_k|``, estimated by averaging over the samples of a dataset. The same per-sample gradients yield
vanilla back-propagation (VBP) maps; occlusion and Grad-CAM serve as comparison methods.
"""

import csv
from collections.abc import Iterator, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import field
from itertools import product
from logging import getLogger
from pathlib import Path
from typing import Any, Callable, Literal, Optional, Union, overload

import numpy as np
from scipy.ndimage import zoom
from scipy.stats import spearmanr

from ensocast.core.autodiff import Tape, Tensor, grad, no_grad
from ensocast.core.constants import CHANNEL_NAMES, DEFAULT_THRESHOLD
from ensocast.core.data import GridSpec, RegionMask
from ensocast.core.exceptions import ConfigError, EmptyResultError, NonFiniteGradientError, ShapeError
from ensocast.core.model import FINAL_ACTIVATION, Capture, Regressor
from ensocast.utils.dataclasses import dataclass
from ensocast.utils.types import FloatArray, PathLike

logger = getLogger(__name__)


@dataclass
class AttributionSettings:
    """Settings for attribution workers."""

    workers: int = 4
    """Threads evaluating per-sample gradients or occlusions."""

    chunk_size: int = 64
    """Samples handed to the worker pool at once; bounds the per-sample maps held in memory."""

    occlusion_batch: int = 512
    """Occluded copies evaluated per batched forward pass."""


_attribution_settings = AttributionSettings()
"""Global settings for attribution."""


def configure_attribution(
    settings: Optional[AttributionSettings] = None,
    *,
    workers: Optional[int] = None,
    chunk_size: Optional[int] = None,
    occlusion_batch: Optional[int] = None,
) -> None:
    """Configure the attribution settings; calling without arguments restores the defaults.

    Args:
        settings (AttributionSettings | None): Settings to copy. If provided, keyword arguments are ignored.
        workers (int | None): Worker threads; results never depend on this value.
        chunk_size (int | None): Samples submitted to the pool at once.
        occlusion_batch (int | None): Occluded copies per forward pass.
    """
    if settings is None:
        kwargs: dict[str, Any] = {}
        if workers is not None:
            kwargs["workers"] = workers
        if chunk_size is not None:
            kwargs["chunk_size"] = chunk_size
        if occlusion_batch is not None:
            kwargs["occlusion_batch"] = occlusion_batch
        settings = AttributionSettings(**kwargs)
    if settings.workers < 1 or settings.chunk_size < 1 or settings.occlusion_batch < 1:
        raise ConfigError(f"Attribution settings must be positive: {settings}")
    _attribution_settings.workers = settings.workers
    _attribution_settings.chunk_size = settings.chunk_size
    _attribution_settings.occlusion_batch = settings.occlusion_batch


class FunctionModel:
    """Wrap a tensor function as a regressor, e.g. an analytic function used as a reference."""

    batched = False

    def __init__(self, fn: Callable[[Tensor], Tensor], input_shape: Sequence[int]) -> None:
        """Wrap ``fn``, which maps one input of ``input_shape`` to a scalar tensor."""
        self.fn = fn
        self._input_shape = tuple(int(s) for s in input_shape)

    @property
    def input_shape(self) -> tuple[int, ...]:
        """Expected input shape."""
        return self._input_shape

    def forward(self, x: Tensor, capture: Optional[Capture] = None) -> Tensor:
        """Evaluate the wrapped function."""
        return self.fn(x)


@dataclass(frozen=True, eq=False)
class SaliencyMap:
    """Importance of every input cell, raw and normalized to [0, 1]."""

    raw: FloatArray
    """Non-negative importances, usually ``[6, nlat, nlon]``; aggregated maps are ``[nlat, nlon]``."""

    normalized: FloatArray
    """``raw / max(raw)``, or zeros when ``raw`` is identically zero."""

    method: str
    """Producing method (pptv, perturbation, vbp, gradcam, or loaded)."""

    sample_count: int
    """Number of samples averaged."""

    label: str = ""
    """Free-form scope label (channel name, lead, season)."""

    @classmethod
    def from_raw(cls, raw: FloatArray, method: str, sample_count: int, label: str = "") -> "SaliencyMap":
        """Attach the normalized view to raw importances."""
        values = np.asarray(raw, dtype=np.float64)
        return cls(raw=values, normalized=normalize(values), method=method, sample_count=sample_count, label=label)

    @property
    def shape(self) -> tuple[int, ...]:
        """Map extents."""
        return tuple(self.raw.shape)

    def channel(self, index: int) -> "SaliencyMap":
        """Channel ``index`` of a 6-channel map, re-normalized."""
        if self.raw.ndim != 3:
            raise ShapeError(f"channel() needs a [C,H,W] map, got {self.shape}")
        name = CHANNEL_NAMES[index] if self.raw.shape[0] == len(CHANNEL_NAMES) else str(index)
        return SaliencyMap.from_raw(self.raw[index], self.method, self.sample_count, label=name)


@dataclass(frozen=True)
class AttentionScope:
    """What an attention indicator averages over."""

    channel: Optional[int] = None
    """Input channel, or ``None`` for the cross-channel aggregate."""

    lead: Optional[int] = None
    """Forecast lead the map belongs to, if any."""

    season: Optional[str] = None
    """Season group label (``spring``, ``non_spring``), if any."""

    region: Optional[RegionMask] = None
    """Cells to average over; ``None`` means the whole grid."""


@dataclass(frozen=True)
class AttentionIndicator:
    """Mean normalized saliency over a scope; higher values mean more dispersed attention."""

    value: float
    scope: AttentionScope = field(default_factory=AttentionScope)


def tv_1d(values: Sequence[float]) -> float:
    """Total variation of a sequence over its own partition.

    Examples:

    .. code-block:: python

    >>> tv_1d([0.0, 2.0, 1.0, 1.0])
    3.0

    Raises:
        ValueError: If fewer than two values are given.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 2:
        raise ValueError(f"tv_1d needs at least 2 values, got {arr.size}")
    return float(np.abs(np.diff(arr)).sum())


def normalize(raw: FloatArray) -> FloatArray:
    """Divide by the global maximum; an all-zero map stays all-zero.

    Examples:

    .. code-block:: python

    >>> normalize(np.array([1.0, 4.0])).tolist()
    [0.25, 1.0]

    Raises:
        ValueError: If any value is negative or non-finite.
    """
    values = np.asarray(raw, dtype=np.float64)
    if not np.isfinite(values).all():
        raise ValueError("Saliency values must be finite")
    if (values < 0).any():
        raise ValueError(f"Saliency values must be non-negative, found minimum {values.min()}")
    peak = values.max() if values.size else 0.0
    if peak == 0.0:
        return np.zeros(values.shape)
    return values / peak


def _stack(model: Regressor, dataset: Any) -> FloatArray:
    stack = np.asarray(getattr(dataset, "fields", dataset), dtype=np.float64)
    if stack.ndim == 0 or stack.shape[0] == 0:
        raise EmptyResultError("Attribution needs a non-empty dataset")
    if stack.shape[1:] != tuple(model.input_shape):
        raise ShapeError(f"Dataset samples {stack.shape[1:]} do not match model input {model.input_shape}")
    return stack


def _map_in_order(fn: Callable[[int], FloatArray], count: int) -> Iterator[FloatArray]:
    """Yield ``fn(i)`` for ``i = 0..count-1`` in index order, evaluated on the worker pool chunk by chunk."""
    settings = _attribution_settings
    if settings.workers == 1:
        for i in range(count):
            yield fn(i)
        return
    with ThreadPoolExecutor(max_workers=settings.workers) as pool:
        for start in range(0, count, settings.chunk_size):
            yield from pool.map(fn, range(start, min(start + settings.chunk_size, count)))


def input_gradient(model: Regressor, fields: FloatArray, index: int = 0) -> FloatArray:
    """Gradient of the scalar model output with respect to one input, on a tape private to the call.

    Raises:
        ShapeError: If the model output is not a scalar.
        NonFiniteGradientError: If the gradient holds NaN or Inf; the message names ``index``.
    """
    x = Tensor(fields, requires_grad=True)
    with Tape():
        out = model.forward(x)
    if out.size != 1:
        raise ShapeError(f"Attribution needs a scalar model output, got shape {out.shape}")
    if not out.requires_grad:
        return np.zeros(x.shape)
    (g,) = grad(out, [x])
    if not np.isfinite(g).all():
        raise NonFiniteGradientError(f"Non-finite input gradient for sample {index}")
    return g


def _mean_abs_gradient(model: Regressor, stack: FloatArray) -> FloatArray:
    total = np.zeros(stack.shape[1:])
    for g in _map_in_order(lambda i: np.abs(input_gradient(model, stack[i], i)), stack.shape[0]):
        total += g
    return total / stack.shape[0]


def pptv(model: Regressor, dataset: Any) -> SaliencyMap:
    """Practical partial total variation over every sample of a dataset.

    ``raw[k]`` is the mean over samples of ``|df/dx_k|``, one backward pass per sample. Per-sample results are
    summed in sample order, so the map does not depend on the worker count.

    Args:
        model (Regressor): Model, ensemble, or wrapped function.
        dataset: A :class:`GridDataset` or an array of samples ``[m, *input_shape]``.

    Raises:
        EmptyResultError: If the dataset is empty.
        ShapeError: If sample shapes do not match the model.
        NonFiniteGradientError: If a gradient is not finite; the message names the sample index.
    """
    stack = _stack(model, dataset)
    result = SaliencyMap.from_raw(_mean_abs_gradient(model, stack), "pptv", stack.shape[0])
    _warn_if_zero(result)
    logger.info(f"PPTV over {stack.shape[0]} samples: max raw {result.raw.max():.6g}")
    return result


def vbp_saliency(model: Regressor, dataset: Any) -> SaliencyMap:
    """Dataset-level vanilla back-propagation map: the mean absolute input gradient.

    Use :func:`vbp_sample_maps` for the single-sample maps of the method's classic form.
    """
    stack = _stack(model, dataset)
    result = SaliencyMap.from_raw(_mean_abs_gradient(model, stack), "vbp", stack.shape[0])
    _warn_if_zero(result)
    return result


def vbp_sample_maps(model: Regressor, dataset: Any) -> list[SaliencyMap]:
    """One vanilla back-propagation map per sample, in sample order."""
    stack = _stack(model, dataset)
    grads = _map_in_order(lambda i: np.abs(input_gradient(model, stack[i], i)), stack.shape[0])
    return [SaliencyMap.from_raw(g, "vbp", 1, label=f"sample_{i}") for i, g in enumerate(grads)]


def _forward_many(model: Regressor, stack: FloatArray, batch: int) -> FloatArray:
    out = np.empty(stack.shape[0])
    with no_grad():
        if getattr(model, "batched", True):
            for start in range(0, stack.shape[0], batch):
                out[start : start + batch] = model.forward(Tensor(stack[start : start + batch])).data
        else:
            for i in range(stack.shape[0]):
                out[i] = model.forward(Tensor(stack[i])).item()
    return out


def _positions(extent: int, size: int, stride: int) -> list[int]:
    starts = list(range(0, extent - size + 1, stride))
    if starts[-1] != extent - size:
        starts.append(extent - size)
    return starts


def perturbation_saliency(
    model: Regressor,
    dataset: Any,
    patch: tuple[int, int] = (2, 2),
    stride: int = 1,
    fill: float = 0.0,
) -> SaliencyMap:
    """Occlusion saliency.

    Each channel is occluded separately by a ``patch`` moved with ``stride`` (the last row and column of positions
    are always included, so every cell is covered). A patch's ``|f(x) - f(occluded x)|`` is credited to each cell it
    covers, cells average the credits of their covering patches, and samples are averaged in order.

    Raises:
        ShapeError: If the patch does not fit the grid.
        ConfigError: If ``stride`` is not positive.
        EmptyResultError: If the dataset is empty.
    """
    stack = _stack(model, dataset)
    if stack.ndim != 4:
        raise ShapeError(f"Occlusion needs [m, C, H, W] samples, got {stack.shape}")
    channels, h, w = stack.shape[1:]
    ph, pw = patch
    if not (1 <= ph <= h and 1 <= pw <= w):
        raise ShapeError(f"Patch {patch} does not fit the {h}x{w} grid")
    if stride < 1:
        raise ConfigError(f"stride must be positive, got {stride}")
    windows = list(product(range(channels), _positions(h, ph, stride), _positions(w, pw, stride)))
    coverage = np.zeros((channels, h, w))
    for c, r, q in windows:
        coverage[c, r : r + ph, q : q + pw] += 1.0
    batch = _attribution_settings.occlusion_batch

    def sample_map(i: int) -> FloatArray:
        x = stack[i]
        base = _forward_many(model, x[None], 1)[0]
        credit = np.zeros(x.shape)
        for start in range(0, len(windows), batch):
            chunk = windows[start : start + batch]
            occluded = np.repeat(x[None], len(chunk), axis=0)
            for k, (c, r, q) in enumerate(chunk):
                occluded[k, c, r : r + ph, q : q + pw] = fill
            deltas = np.abs(base - _forward_many(model, occluded, batch))
            for k, (c, r, q) in enumerate(chunk):
                credit[c, r : r + ph, q : q + pw] += deltas[k]
        return credit / coverage

    total = np.zeros(stack.shape[1:])
    for m in _map_in_order(sample_map, stack.shape[0]):
        total += m
    result = SaliencyMap.from_raw(total / stack.shape[0], "perturbation", stack.shape[0])
    _warn_if_zero(result)
    logger.info(f"Occlusion over {stack.shape[0]} samples with {len(windows)} patches each")
    return result


def _gradcam_one(model: Regressor, fields: FloatArray, index: int) -> FloatArray:
    capture: Capture = {}
    with Tape():
        out = model.forward(Tensor(fields), capture)
    activation = capture.get(FINAL_ACTIVATION)
    if activation is None:
        raise ConfigError("Grad-CAM needs a model with at least one conv layer")
    h, w = fields.shape[-2:]
    if not out.requires_grad:
        return np.zeros((h, w))
    (g,) = grad(out, [activation])
    if not np.isfinite(g).all():
        raise NonFiniteGradientError(f"Non-finite Grad-CAM gradient for sample {index}")
    weights = g.mean(axis=(1, 2))
    cam = np.abs(np.tensordot(weights, activation.data, axes=(0, 0)))
    up = zoom(cam, (h / cam.shape[0], w / cam.shape[1]), order=1, mode="nearest")
    if up.shape != (h, w):
        raise ShapeError(f"Grad-CAM upsampling produced {up.shape}, expected {(h, w)}")
    return up


def gradcam_saliency(model: Regressor, dataset: Any) -> SaliencyMap:
    """Grad-CAM adapted to regression.

    Per sample, channel weights are the spatial mean of ``df/dA_c`` over the final conv activations ``A``; the map
    ``|sum_c w_c A_c|`` is bilinearly upsampled to the input grid. Maps are averaged over samples and repeated on all
    input channels. For an ensemble the member maps are averaged.

    Raises:
        ConfigError: If the model exposes no conv activations.
    """
    stack = _stack(model, dataset)
    if stack.ndim != 4:
        raise ShapeError(f"Grad-CAM needs [m, C, H, W] samples, got {stack.shape}")
    members = list(getattr(model, "members", [model]))
    total = np.zeros(stack.shape[2:])

    def sample_cam(i: int) -> FloatArray:
        return sum(_gradcam_one(m, stack[i], i) for m in members) / len(members)

    for cam in _map_in_order(sample_cam, stack.shape[0]):
        total += cam
    spatial = total / stack.shape[0]
    raw = np.broadcast_to(spatial, stack.shape[1:]).copy()
    result = SaliencyMap.from_raw(raw, "gradcam", stack.shape[0])
    _warn_if_zero(result)
    return result


def _warn_if_zero(saliency: SaliencyMap) -> None:
    if not saliency.raw.any():
        logger.warning(f"{saliency.method} saliency is identically zero over {saliency.sample_count} samples")


@overload
def aggregate_channels(saliency: SaliencyMap, mode: Literal["mean"] = "mean") -> SaliencyMap: ...


@overload
def aggregate_channels(saliency: SaliencyMap, mode: Literal["per-channel"]) -> list[SaliencyMap]: ...


def aggregate_channels(
    saliency: SaliencyMap, mode: Literal["mean", "per-channel"] = "mean"
) -> Union[SaliencyMap, list[SaliencyMap]]:
    """Reduce a multi-channel map.

    ``mean`` averages the raw values over channels and re-normalizes; ``per-channel`` returns one re-normalized map
    per channel.
    """
    if saliency.raw.ndim != 3:
        raise ShapeError(f"aggregate_channels needs a [C,H,W] map, got {saliency.shape}")
    if mode == "mean":
        return SaliencyMap.from_raw(
            saliency.raw.mean(axis=0), saliency.method, saliency.sample_count, label=saliency.label or "all"
        )
    if mode == "per-channel":
        return [saliency.channel(c) for c in range(saliency.raw.shape[0])]
    raise ConfigError(f"Unknown aggregation mode {mode!r}")


def _spatial(values: Union[SaliencyMap, FloatArray], what: str) -> FloatArray:
    arr = values.normalized if isinstance(values, SaliencyMap) else np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{what} needs a single-channel [H,W] map, got {arr.shape}")
    return arr


def attention_indicator(saliency: SaliencyMap, scope: Optional[AttentionScope] = None) -> AttentionIndicator:
    """Mean normalized saliency over a scope.

    Multi-channel maps are first reduced: the scope's channel selects one re-normalized channel, otherwise the
    cross-channel aggregate is used.

    Raises:
        EmptyResultError: If the scope's region selects no cell.
    """
    scope = scope or AttentionScope()
    if saliency.raw.ndim == 3:
        reduced = saliency.channel(scope.channel) if scope.channel is not None else aggregate_channels(saliency)
    else:
        reduced = saliency
    values = _spatial(reduced, "attention_indicator")
    if scope.region is not None:
        if scope.region.shape != values.shape:
            raise ShapeError(f"Scope region {scope.region.shape} does not match map {values.shape}")
        if scope.region.count == 0:
            raise EmptyResultError("Attention scope selects no cell")
        selected = values[scope.region.cells]
    else:
        selected = values.reshape(-1)
    if selected.size == 0:
        raise EmptyResultError("Attention scope selects no cell")
    return AttentionIndicator(value=float(selected.mean()), scope=scope)


def zonal_mean(values: Union[SaliencyMap, FloatArray]) -> FloatArray:
    """Mean over longitudes for every latitude row."""
    return _spatial(values, "zonal_mean").mean(axis=1)


def meridional_mean(values: Union[SaliencyMap, FloatArray]) -> FloatArray:
    """Mean over latitudes for every longitude column."""
    return _spatial(values, "meridional_mean").mean(axis=0)


def threshold_mask(values: Union[SaliencyMap, FloatArray], tau: float = DEFAULT_THRESHOLD) -> RegionMask:
    """Cells whose normalized value is at least ``tau``.

    Raises:
        ConfigError: If ``tau`` is outside (0, 1].
    """
    if not 0.0 < tau <= 1.0:
        raise ConfigError(f"threshold must lie in (0, 1], got {tau}")
    arr = _spatial(values, "threshold_mask")
    return RegionMask(cells=arr >= tau)


def rank_agreement(first: Union[SaliencyMap, FloatArray], second: Union[SaliencyMap, FloatArray]) -> float:
    """Spearman rank correlation between two maps of equal shape (0 when either map is constant)."""
    a = np.asarray(first.raw if isinstance(first, SaliencyMap) else first, dtype=np.float64).reshape(-1)
    b = np.asarray(second.raw if isinstance(second, SaliencyMap) else second, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"Cannot rank maps of {a.size} and {b.size} cells")
    if np.ptp(a) == 0.0 or np.ptp(b) == 0.0:
        logger.warning("rank_agreement on a constant map; reporting 0")
        return 0.0
    return float(spearmanr(a, b).statistic)


def localization_fraction(
    values: Union[SaliencyMap, FloatArray], region: RegionMask, top_fraction: float = 0.1
) -> float:
    """Share of the saliency mass of the top ``top_fraction`` cells that falls inside ``region``.

    Ties at the cut-off are broken by row-major cell order.
    """
    arr = _spatial(values, "localization_fraction")
    if region.shape != arr.shape:
        raise ShapeError(f"Region {region.shape} does not match map {arr.shape}")
    if not 0.0 < top_fraction <= 1.0:
        raise ConfigError(f"top_fraction must lie in (0, 1], got {top_fraction}")
    flat = arr.reshape(-1)
    keep = max(1, int(round(top_fraction * flat.size)))
    top = np.argsort(-flat, kind="stable")[:keep]
    mass = flat[top].sum()
    if mass == 0.0:
        return 0.0
    return float(flat[top][region.cells.reshape(-1)[top]].sum() / mass)


def pptv_quadrature_oracle(
    fn: Callable[..., Tensor],
    density: Callable[..., FloatArray],
    bounds: Sequence[tuple[float, float]],
    resolution: int = 200,
) -> FloatArray:
    """Tensor-product midpoint quadrature of ``integral P(x) |df/dx_k| dx`` for every variable ``k``.

    ``fn`` receives one ``[N]`` tensor per variable (all grid points at once) and returns ``[N]`` values;
    ``density`` receives the same coordinates as arrays.

    Examples:

    .. code-block:: python

    >>> oracle = pptv_quadrature_oracle(lambda x: x * 3.0, lambda x: np.full(x.shape, 0.5), [(-1.0, 1.0)], 10)
    >>> [round(float(v), 9) for v in oracle]
    [3.0]

    Raises:
        ConfigError: If there are more than three variables or the resolution is not positive.
        ValueError: If the density does not integrate to 1 within 1e-3 on the grid.
    """
    dim = len(bounds)
    if not 1 <= dim <= 3:
        raise ConfigError(f"The quadrature oracle handles 1 to 3 variables, got {dim}")
    if resolution < 1:
        raise ConfigError(f"resolution must be positive, got {resolution}")
    axes = [lo + (np.arange(resolution) + 0.5) * (hi - lo) / resolution for lo, hi in bounds]
    cell = float(np.prod([(hi - lo) / resolution for lo, hi in bounds]))
    coords = [c.reshape(-1) for c in np.meshgrid(*axes, indexing="ij")]
    weights = np.broadcast_to(np.asarray(density(*coords), dtype=np.float64), coords[0].shape) * cell
    mass = float(weights.sum())
    if abs(mass - 1.0) > 1e-3:
        raise ValueError(f"Density integrates to {mass} on the grid, expected 1 within 1e-3")
    inputs = [Tensor(c, requires_grad=True) for c in coords]
    with Tape():
        out = fn(*inputs)
        summed = out.sum()
    if not summed.requires_grad:
        return np.zeros(dim)
    grads = grad(summed, inputs)
    return np.array([float((np.abs(g) * weights).sum()) for g in grads])


def ptv_uniform(fn: Callable[..., Tensor], bounds: Sequence[tuple[float, float]], resolution: int = 200) -> FloatArray:
    """Unweighted partial total variation ``integral |df/dx_k| dx`` over a box, by midpoint quadrature."""
    volume = float(np.prod([hi - lo for lo, hi in bounds]))
    return pptv_quadrature_oracle(fn, lambda *c: np.full(c[0].shape, 1.0 / volume), bounds, resolution) * volume


def _channel_labels(saliency: SaliencyMap) -> list[str]:
    if saliency.raw.ndim == 2:
        return [saliency.label or "all"]
    count = saliency.raw.shape[0]
    return list(CHANNEL_NAMES) if count == len(CHANNEL_NAMES) else [str(c) for c in range(count)]


def _as_channels(values: FloatArray) -> FloatArray:
    return values[None] if values.ndim == 2 else values


def save_saliency_csv(path: PathLike, saliency: SaliencyMap, grid: GridSpec) -> None:
    """Write ``channel,lat,lon,raw,normalized`` rows with 17 significant digits, channel-major then row-major."""
    raw, norm = _as_channels(saliency.raw), _as_channels(saliency.normalized)
    if raw.shape[1:] != grid.shape:
        raise ShapeError(f"Map {saliency.shape} does not match grid {grid.shape}")
    with Path(path).open("w", newline="", encoding="utf-8") as stream:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(["channel", "lat", "lon", "raw", "normalized"])
        for c, name in enumerate(_channel_labels(saliency)):
            for i, lat in enumerate(grid.lats):
                for j, lon in enumerate(grid.lons):
                    values = (lat, lon, raw[c, i, j], norm[c, i, j])
                    writer.writerow([name, *(f"{v:.17g}" for v in values)])
    logger.debug(f"Wrote {saliency.method} saliency to {path}")


def load_saliency_csv(path: PathLike, method: str = "loaded") -> tuple[SaliencyMap, GridSpec]:
    """Read a map written by :func:`save_saliency_csv`, with the grid recovered from its coordinates.

    Raises:
        ShapeError: If the rows do not form a complete regular grid.
    """
    with Path(path).open(newline="", encoding="utf-8") as stream:
        rows = list(csv.DictReader(stream))
    if not rows:
        raise EmptyResultError(f"Saliency file {path} holds no rows")
    names = list(dict.fromkeys(r["channel"] for r in rows))
    lats = list(dict.fromkeys(float(r["lat"]) for r in rows))
    lons = list(dict.fromkeys(float(r["lon"]) for r in rows))
    if len(rows) != len(names) * len(lats) * len(lons):
        raise ShapeError(f"Saliency file {path} does not hold a complete grid")
    shape = (len(names), len(lats), len(lons))
    raw = np.array([float(r["raw"]) for r in rows]).reshape(shape)
    norm = np.array([float(r["normalized"]) for r in rows]).reshape(shape)
    grid = GridSpec(
        nlat=len(lats),
        nlon=len(lons),
        lat0=lats[0],
        dlat=lats[1] - lats[0] if len(lats) > 1 else 1.0,
        lon0=lons[0],
        dlon=(lons[1] - lons[0]) % 360.0 if len(lons) > 1 else 360.0,
    )
    label = ""
    if len(names) == 1:
        raw, norm, label = raw[0], norm[0], names[0]
    return SaliencyMap(raw=raw, normalized=norm, method=method, sample_count=0, label=label), grid


def pgm_bytes(values: FloatArray, grid: GridSpec) -> bytes:
    """Binary 8-bit graymap of one normalized ``[nlat, nlon]`` map, northernmost row first.

    Gray levels are ``floor(255 * v + 0.5)``.

    Examples:

    .. code-block:: python

    >>> pgm_bytes(np.array([[0.0, 1.0]]), GridSpec(nlat=1, nlon=2, lat0=0.0))
    b'P5\\n2 1\\n255\\n\\x00\\xff'
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != grid.shape:
        raise ShapeError(f"Map {arr.shape} does not match grid {grid.shape}")
    if grid.dlat > 0:
        arr = arr[::-1]
    levels = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    header = f"P5\n{grid.nlon} {grid.nlat}\n255\n".encode("ascii")
    return header + levels.tobytes()


def save_saliency_pgm(prefix: PathLike, saliency: SaliencyMap, grid: GridSpec) -> list[Path]:
    """Write one graymap per channel as ``<prefix>_<channel>.pgm`` and return the paths."""
    norm = _as_channels(saliency.normalized)
    base = Path(prefix)
    paths = []
    for c, name in enumerate(_channel_labels(saliency)):
        path = base.with_name(f"{base.name}_{name}.pgm")
        path.write_bytes(pgm_bytes(norm[c], grid))
        paths.append(path)
    return paths


__all__ = [
    "AttentionIndicator",
    "AttentionScope",
    "AttributionSettings",
    "FunctionModel",
    "SaliencyMap",
    "aggregate_channels",
    "attention_indicator",
    "configure_attribution",
    "gradcam_saliency",
    "input_gradient",
    "load_saliency_csv",
    "localization_fraction",
    "meridional_mean",
    "normalize",
    "perturbation_saliency",
    "pgm_bytes",
    "pptv",
    "pptv_quadrature_oracle",
    "ptv_uniform",
    "rank_agreement",
    "save_saliency_csv",
    "save_saliency_pgm",
    "threshold_mask",
    "tv_1d",
    "vbp_sample_maps",
    "vbp_saliency",
    "zonal_mean",
]
