"""The ENSO index regressor, its calibration layers, ensembles, saturation diagnostics and checkpoints."""

from collections.abc import Iterable, Mapping, Sequence
from logging import getLogger
from typing import Any, Literal, Optional, Protocol, Union, runtime_checkable

import numpy as np
from pydantic import Field, field_validator

from ensocast.core.autodiff import Tape, Tensor, conv2d, dense, grad, maxpool2, no_grad, reshape, tanh_act
from ensocast.core.base import Serializable
from ensocast.core.codec import RecordReader, RecordWriter
from ensocast.core.constants import (
    DEAD_GRADIENT,
    DEFAULT_KERNEL,
    DEFAULT_NLAT,
    DEFAULT_NLON,
    MAX_LEAD_MONTHS,
    MODEL_MAGIC,
    N_CHANNELS,
    Z_SAT,
)
from ensocast.core.exceptions import ConfigError, EmptyResultError, ExtentOverflowError, FormatError, ShapeError
from ensocast.utils.dataclasses import dataclass
from ensocast.utils.types import FloatArray, PathLike

logger = getLogger(__name__)

Capture = dict[str, Tensor]
"""Named intermediate tensors recorded during a forward pass."""

CONV_LAYERS = ("conv1", "conv2", "conv3")
HIDDEN_LAYER = "hidden"
FINAL_ACTIVATION = "final_activation"


class ModelConfig(Serializable):
    """Architecture and initialization of one regressor."""

    conv_filters: list[int] = Field(default_factory=lambda: [4, 4, 4], description="Filters of the three conv layers.")
    dense_neurons: int = Field(16, ge=1, description="Neurons of the hidden dense layer.")
    lead_months: int = Field(1, ge=1, le=MAX_LEAD_MONTHS, description="Forecast lead in months.")
    target_month: Union[int, Literal["all"]] = Field("all", description="Target calendar month 1..12, or all.")
    calibration_enabled: bool = Field(True, description="Insert calibration layers before each conv activation.")
    seed: int = Field(0, ge=0, description="Seed of the parameter initialization.")
    kernel: tuple[int, int] = Field(DEFAULT_KERNEL, description="Convolution kernel extents (lat, lon).")
    nlat: int = Field(DEFAULT_NLAT, ge=1, description="Input grid rows.")
    nlon: int = Field(DEFAULT_NLON, ge=1, description="Input grid columns.")

    @field_validator("conv_filters")
    @classmethod
    def _check_filters(cls, value: list[int]) -> list[int]:
        if len(value) != len(CONV_LAYERS):
            raise ValueError(f"exactly {len(CONV_LAYERS)} conv filter counts are required, got {len(value)}")
        if any(v < 1 for v in value):
            raise ValueError(f"filter counts must be positive, got {value}")
        return value

    @field_validator("target_month")
    @classmethod
    def _check_month(cls, value: Union[int, str]) -> Union[int, str]:
        if isinstance(value, int) and not 1 <= value <= 12:
            raise ValueError(f"target_month must be 1..12 or 'all', got {value}")
        return value

    @field_validator("kernel")
    @classmethod
    def _check_kernel(cls, value: tuple[int, int]) -> tuple[int, int]:
        if min(value) < 1:
            raise ValueError(f"kernel extents must be positive, got {value}")
        return value

    @property
    def input_shape(self) -> tuple[int, int, int]:
        """Expected input shape ``[6, nlat, nlon]``."""
        return N_CHANNELS, self.nlat, self.nlon

    def layer_shapes(self) -> list[tuple[int, int, int]]:
        """Pre-activation shape ``[C, H, W]`` of each conv layer."""
        h, w = self.nlat, self.nlon
        shapes = []
        for i, filters in enumerate(self.conv_filters):
            shapes.append((filters, h, w))
            if i < len(CONV_LAYERS) - 1:
                h, w = -(-h // 2), -(-w // 2)
        return shapes


def _same_padding(kh: int, kw: int) -> tuple[tuple[int, int], tuple[int, int]]:
    top, left = (kh - 1) // 2, (kw - 1) // 2
    return (top, kh - 1 - top), (left, kw - 1 - left)


def parameter_count(config: ModelConfig) -> int:
    """Closed-form number of trainable parameters of ``build(config)``.

    Examples:

    .. code-block:: python

    >>> parameter_count(ModelConfig(conv_filters=[2, 2, 2], dense_neurons=4, calibration_enabled=False))
    1519
    """
    kh, kw = config.kernel
    count = 0
    c_in = N_CHANNELS
    for filters in config.conv_filters:
        count += filters * c_in * kh * kw + filters
        c_in = filters
    shapes = config.layer_shapes()
    if config.calibration_enabled:
        count += sum(2 * c * h * w for c, h, w in shapes)
    c3, h3, w3 = shapes[-1]
    n = config.dense_neurons
    return count + n * (c3 * h3 * w3) + n + n + 1


@dataclass(frozen=True)
class CalibrationLayer:
    """Per-element affine map ``gamma * z + beta`` applied before an activation."""

    gamma: Tensor
    beta: Tensor

    def __post_init__(self) -> None:
        """Check that both tensors share one ``[C, H, W]`` shape."""
        if self.gamma.ndim != 3 or self.gamma.shape != self.beta.shape:
            raise ShapeError(f"Calibration gamma {self.gamma.shape} and beta {self.beta.shape} must match as [C,H,W]")

    @classmethod
    def identity(cls, shape: tuple[int, int, int]) -> "CalibrationLayer":
        """Identity calibration (gamma 1, beta 0)."""
        return cls(gamma=Tensor(np.ones(shape), requires_grad=True), beta=Tensor(np.zeros(shape), requires_grad=True))

    def __call__(self, z: Tensor) -> Tensor:
        """Apply to ``[C, H, W]`` or batched ``[N, C, H, W]`` pre-activations."""
        if z.shape[-3:] != self.gamma.shape:
            raise ShapeError(f"Calibration shape {self.gamma.shape} does not match feature map {z.shape}")
        return z * self.gamma + self.beta


@runtime_checkable
class Regressor(Protocol):
    """Anything attribution methods can differentiate: a model or an ensemble."""

    @property
    def input_shape(self) -> tuple[int, ...]:
        """Expected input shape, ``[C, H, W]`` for grid models."""
        ...

    def forward(self, x: Tensor, capture: Optional[Capture] = None) -> Tensor:
        """Scalar output for ``[C,H,W]`` input, ``[N]`` outputs for ``[N,C,H,W]`` input."""
        ...


class Model:
    """Three conv blocks, one hidden dense layer and a scalar head.

    Parameters live in an ordered mapping of gradient-tracking tensors. Inference never mutates them, so one model
    can be read from several threads at once; training replaces tensors through :meth:`update`.
    """

    def __init__(self, config: ModelConfig, params: Mapping[str, Tensor]) -> None:
        """Wrap parameters built for ``config``."""
        self.config = config
        self.params: dict[str, Tensor] = dict(params)
        self._padding = _same_padding(*config.kernel)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        """Expected ``[6, nlat, nlon]`` input."""
        return self.config.input_shape

    def calibration(self, index: int) -> Optional[CalibrationLayer]:
        """Calibration layer of conv block ``index`` (0-based), if enabled."""
        if not self.config.calibration_enabled:
            return None
        prefix = f"calib{index + 1}"
        return CalibrationLayer(gamma=self.params[f"{prefix}.gamma"], beta=self.params[f"{prefix}.beta"])

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Parameters in checkpoint order."""
        return list(self.params.items())

    def parameters(self) -> list[Tensor]:
        """Parameter tensors in checkpoint order."""
        return list(self.params.values())

    def parameter_count(self) -> int:
        """Number of scalar parameters actually held."""
        return sum(t.size for t in self.params.values())

    def state(self) -> dict[str, FloatArray]:
        """Copies of every parameter array."""
        return {name: t.numpy() for name, t in self.params.items()}

    def update(self, values: Mapping[str, FloatArray]) -> None:
        """Replace parameter values; names and shapes must already exist.

        Raises:
            ShapeError: If a name is unknown or a shape differs.
        """
        for name, value in values.items():
            if name not in self.params:
                raise ShapeError(f"Unknown parameter {name}")
            arr = np.asarray(value, dtype=np.float64)
            if arr.shape != self.params[name].shape:
                raise ShapeError(f"Parameter {name} has shape {self.params[name].shape}, got {arr.shape}")
            self.params[name] = Tensor(arr, requires_grad=True)

    def clone(self) -> "Model":
        """Independent copy with the same config and parameter values."""
        return Model(self.config, {name: Tensor(t.data, requires_grad=True) for name, t in self.params.items()})

    def check_input(self, x: Tensor) -> None:
        """Raise :class:`ShapeError` unless ``x`` is ``[6,H,W]`` or ``[N,6,H,W]`` on the model's grid."""
        if x.ndim not in (3, 4) or x.shape[-3:] != self.input_shape:
            raise ShapeError(f"Model expects input {self.input_shape} (optionally batched), got {x.shape}")

    def forward(self, x: Tensor, capture: Optional[Capture] = None) -> Tensor:
        """Run the network.

        Args:
            x (Tensor): ``[6, H, W]`` or ``[N, 6, H, W]`` input.
            capture (dict | None): When given, receives the conv pre-activations (``conv1``..``conv3``), the hidden
                dense pre-activation (``hidden``) and the post-activation of the last conv block
                (``final_activation``).

        Returns:
            Tensor: Scalar output, or ``[N]`` outputs for batched input.
        """
        self.check_input(x)
        h = x
        for i, layer in enumerate(CONV_LAYERS):
            z = conv2d(h, self.params[f"{layer}.kernels"], self.params[f"{layer}.bias"], padding=self._padding)
            calib = self.calibration(i)
            if calib is not None:
                z = calib(z)
            if capture is not None:
                capture[layer] = z
            h = tanh_act(z)
            if i < len(CONV_LAYERS) - 1:
                h = maxpool2(h)
        if capture is not None:
            capture[FINAL_ACTIVATION] = h
        batched = x.ndim == 4
        flat = reshape(h, (x.shape[0], -1) if batched else (-1,))
        z = dense(flat, self.params["dense.weights"], self.params["dense.bias"])
        if capture is not None:
            capture[HIDDEN_LAYER] = z
        out = dense(tanh_act(z), self.params["head.weights"], self.params["head.bias"])
        return reshape(out, (x.shape[0],) if batched else ())

    def __repr__(self) -> str:
        """Short representation."""
        cfg = self.config
        return (
            f"Model(filters={cfg.conv_filters}, neurons={cfg.dense_neurons}, lead={cfg.lead_months}, "
            f"calibration={cfg.calibration_enabled}, params={self.parameter_count()})"
        )


def _parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    kh, kw = config.kernel
    shapes: list[tuple[str, tuple[int, ...]]] = []
    c_in = N_CHANNELS
    for layer, filters, fmap in zip(CONV_LAYERS, config.conv_filters, config.layer_shapes()):
        shapes.append((f"{layer}.kernels", (filters, c_in, kh, kw)))
        shapes.append((f"{layer}.bias", (filters,)))
        if config.calibration_enabled:
            index = layer[-1]
            shapes.append((f"calib{index}.gamma", fmap))
            shapes.append((f"calib{index}.beta", fmap))
        c_in = filters
    c3, h3, w3 = config.layer_shapes()[-1]
    n = config.dense_neurons
    shapes += [
        ("dense.weights", (n, c3 * h3 * w3)),
        ("dense.bias", (n,)),
        ("head.weights", (1, n)),
        ("head.bias", (1,)),
    ]
    return shapes


def build(config: Union[ModelConfig, Mapping[str, Any]]) -> Model:
    """Build a freshly initialized model.

    Weights are drawn uniformly from ``[-b, b]`` with ``b = sqrt(1 / fan_in)`` in parameter order from a generator
    seeded with ``config.seed``; biases start at zero and calibration layers at the identity. The random draws do not
    depend on ``calibration_enabled``.

    Raises:
        ConfigError: If the configuration is invalid; the message names the offending field.
    """
    config = ModelConfig.parse(config)
    rng = np.random.default_rng(config.seed)
    params: dict[str, Tensor] = {}
    for name, shape in _parameter_shapes(config):
        if name.endswith((".kernels", ".weights")):
            fan_in = int(np.prod(shape[1:]))
            bound = float(np.sqrt(1.0 / fan_in))
            value = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gamma"):
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[name] = Tensor(value, requires_grad=True)
    model = Model(config, params)
    logger.debug(f"Built {model}")
    return model


def _sample_fields(sample: Any) -> FloatArray:
    fields = getattr(sample, "fields", sample)
    return fields.data if isinstance(fields, Tensor) else np.asarray(fields, dtype=np.float64)


def predict(model: Regressor, sample: Any) -> float:
    """Scalar prediction for one sample (a :class:`GridSample` or a ``[6, H, W]`` array).

    Raises:
        ShapeError: If the sample does not match the model's input shape.
    """
    fields = _sample_fields(sample)
    if fields.shape != model.input_shape:
        raise ShapeError(f"Sample shape {fields.shape} does not match model input {model.input_shape}")
    with no_grad():
        return model.forward(Tensor(fields)).item()


def predict_batch(model: Regressor, fields: FloatArray, batch_size: int = 256) -> FloatArray:
    """Predictions for a stack ``[N, 6, H, W]``, evaluated in batches without recording."""
    stack = np.asarray(fields, dtype=np.float64)
    if stack.ndim != 4 or stack.shape[1:] != model.input_shape:
        raise ShapeError(f"Expected [N, {', '.join(map(str, model.input_shape))}], got {stack.shape}")
    out = np.empty(stack.shape[0])
    with no_grad():
        for start in range(0, stack.shape[0], batch_size):
            out[start : start + batch_size] = model.forward(Tensor(stack[start : start + batch_size])).data
    return out


class Ensemble:
    """Mean of member models, differentiable like a single model."""

    def __init__(self, members: Sequence[Model]) -> None:
        """Group members that share one input shape.

        Raises:
            EmptyResultError: If ``members`` is empty.
            ShapeError: If the members expect different inputs.
        """
        if not members:
            raise EmptyResultError("An ensemble needs at least one member")
        shapes = {m.input_shape for m in members}
        if len(shapes) != 1:
            raise ShapeError(f"Ensemble members disagree on input shape: {sorted(shapes)}")
        self.members = list(members)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        """Shared member input shape."""
        return self.members[0].input_shape

    def __len__(self) -> int:
        """Number of members."""
        return len(self.members)

    def forward(self, x: Tensor, capture: Optional[Capture] = None) -> Tensor:
        """Arithmetic mean of the member outputs; ``capture`` is filled from the first member only."""
        total = self.members[0].forward(x, capture)
        for member in self.members[1:]:
            total = total + member.forward(x)
        return total * (1.0 / len(self.members))


def ensemble_predict(models: Sequence[Model], sample: Any) -> float:
    """Mean of the member predictions.

    Raises:
        EmptyResultError: If ``models`` is empty.
    """
    if not models:
        raise EmptyResultError("ensemble_predict needs at least one model")
    values = [predict(m, sample) for m in models]
    return float(sum(values) / len(values))


@dataclass(frozen=True)
class SaturationReport:
    """Share of saturated pre-activations and dead input gradients."""

    layer_fractions: dict[str, float]
    """Per layer, fraction of pre-activation values with ``|z| > z_sat``."""

    z_sat: float
    """Saturation threshold."""

    dead_gradient_fraction: float
    """Fraction of (sample, input cell) pairs with ``|df/dx|`` below the dead-gradient threshold."""

    layer_sizes: dict[str, int]
    """Number of pre-activation values counted per layer."""

    @property
    def saturation_fraction(self) -> float:
        """Saturated share over all counted pre-activations."""
        total = sum(self.layer_sizes.values())
        return sum(self.layer_fractions[k] * self.layer_sizes[k] for k in self.layer_sizes) / total


def saturation_report(
    model: Model,
    fields: FloatArray,
    *,
    z_sat: float = Z_SAT,
    dead_threshold: float = DEAD_GRADIENT,
    batch_size: int = 64,
) -> SaturationReport:
    """Measure activation saturation and vanishing input gradients over a field stack.

    Args:
        model (Model): Model to inspect.
        fields (FloatArray): Inputs ``[N, 6, H, W]`` (a dataset's ``fields``).
        z_sat (float): Pre-activation magnitude counted as saturated.
        dead_threshold (float): Input-gradient magnitude counted as dead.
        batch_size (int): Samples per taped forward pass.

    Raises:
        EmptyResultError: If ``fields`` holds no sample.
    """
    stack = np.asarray(getattr(fields, "fields", fields), dtype=np.float64)
    if stack.shape[0] == 0:
        raise EmptyResultError("saturation_report needs at least one sample")
    layers = (*CONV_LAYERS, HIDDEN_LAYER)
    saturated = dict.fromkeys(layers, 0)
    sizes = dict.fromkeys(layers, 0)
    dead = 0
    for start in range(0, stack.shape[0], batch_size):
        x = Tensor(stack[start : start + batch_size], requires_grad=True)
        capture: Capture = {}
        with Tape():
            out = model.forward(x, capture)
            summed = out.sum()
        (g,) = grad(summed, [x])
        dead += int((np.abs(g) < dead_threshold).sum())
        for layer in layers:
            z = capture[layer].data
            saturated[layer] += int((np.abs(z) > z_sat).sum())
            sizes[layer] += z.size
    report = SaturationReport(
        layer_fractions={k: saturated[k] / sizes[k] for k in layers},
        z_sat=z_sat,
        dead_gradient_fraction=dead / stack.size,
        layer_sizes=sizes,
    )
    logger.info(
        f"Saturation {report.saturation_fraction:.4f} (z_sat={z_sat}), "
        f"dead gradients {report.dead_gradient_fraction:.4f} over {stack.shape[0]} samples"
    )
    return report


MAX_RANK = 8


def save_model(path: PathLike, model: Model) -> None:
    """Write a PPTVMDL1 checkpoint.

    Layout: magic, the config as u64 length-prefixed UTF-8 ``key=value`` lines, then per parameter the u32
    length-prefixed name, u32 rank, u64 extents and raw little-endian float64 values.
    """
    writer = RecordWriter(MODEL_MAGIC)
    writer.text("\n".join(model.config.to_key_values()))
    for name, tensor in model.named_parameters():
        writer.name(name)
        writer.u32(tensor.ndim)
        for extent in tensor.shape:
            writer.u64(extent)
        writer.floats(tensor.data)
    writer.save(path)
    logger.info(f"Saved {model} to {path}")


def load_model(path: PathLike) -> Model:
    """Read a PPTVMDL1 checkpoint written by :func:`save_model`; values round-trip bit-exactly.

    Raises:
        BadMagicError: If the file is not a model checkpoint.
        TruncatedPayloadError: If the file ends early.
        ExtentOverflowError: If a declared extent or rank exceeds the supported limits.
        FormatError: If the config or a parameter does not match the architecture.
    """
    reader = RecordReader.open(path, MODEL_MAGIC)
    try:
        config = ModelConfig.from_key_values(reader.text("config").splitlines())
    except ConfigError as err:
        raise FormatError(f"Checkpoint {path} holds an invalid config: {err}") from err
    expected = dict(_parameter_shapes(config))
    values: dict[str, FloatArray] = {}
    while not reader.exhausted:
        name = reader.name("parameter name")
        rank = reader.u32(f"{name} rank")
        if rank > MAX_RANK:
            raise ExtentOverflowError(f"Extent overflow: parameter {name} declares rank {rank} above {MAX_RANK}")
        shape = tuple(reader.extent(f"{name} extent") for _ in range(rank))
        if expected.get(name) != shape:
            raise FormatError(f"Parameter {name} with shape {shape} does not fit the configured architecture")
        values[name] = reader.floats(shape, name)
    missing = [name for name in expected if name not in values]
    if missing:
        raise FormatError(f"Checkpoint {path} is missing parameters: {', '.join(missing)}")
    return Model(config, {name: Tensor(values[name], requires_grad=True) for name in expected})


def load_models(paths: Iterable[PathLike]) -> list[Model]:
    """Load several checkpoints, in order."""
    return [load_model(p) for p in paths]


__all__ = [
    "CONV_LAYERS",
    "FINAL_ACTIVATION",
    "HIDDEN_LAYER",
    "CalibrationLayer",
    "Capture",
    "Ensemble",
    "Model",
    "ModelConfig",
    "Regressor",
    "SaturationReport",
    "build",
    "ensemble_predict",
    "load_model",
    "load_models",
    "parameter_count",
    "predict",
    "predict_batch",
    "save_model",
    "saturation_report",
]
