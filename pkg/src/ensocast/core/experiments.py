"""Training, correlation skill, masked retraining and lead/seasonal sweeps."""

from collections.abc import Mapping, Sequence
from logging import getLogger
from math import sqrt
from typing import Literal, Optional

import numpy as np
from pydantic import Field

from ensocast.core.attribution import (
    AttentionIndicator,
    AttentionScope,
    SaliencyMap,
    attention_indicator,
    gradcam_saliency,
    perturbation_saliency,
    pptv,
    vbp_saliency,
)
from ensocast.core.autodiff import Tape, Tensor, grad, no_grad, square
from ensocast.core.base import Serializable
from ensocast.core.constants import NON_SPRING_MONTHS, SPRING_MONTHS
from ensocast.core.data import GridDataset, RegionMask
from ensocast.core.exceptions import ConfigError, DivergenceError, EmptyResultError
from ensocast.core.model import Model, ModelConfig, build, predict_batch
from ensocast.utils.base import derive_seed
from ensocast.utils.dataclasses import dataclass
from ensocast.utils.types import FloatArray

logger = getLogger(__name__)

MIN_VALIDATION = 3


class TrainSpec(Serializable):
    """Mini-batch training hyperparameters."""

    epochs: int = Field(200, ge=1, description="Maximum number of epochs.")
    batch_size: int = Field(32, ge=1, description="Samples per mini-batch.")
    learning_rate: float = Field(1e-3, ge=0.0, description="Step size (0 leaves parameters unchanged).")
    optimizer: Literal["sgd", "momentum"] = Field("momentum", description="Plain gradient descent or momentum.")
    momentum: float = Field(0.9, ge=0.0, lt=1.0, description="Momentum coefficient.")
    loss: Literal["mse"] = Field("mse", description="Training loss.")
    seed: int = Field(0, ge=0, description="Seed of the split and the batch shuffling.")
    patience: int = Field(20, ge=0, description="Epochs without validation improvement before stopping (0 disables).")
    validation_fraction: float = Field(0.2, gt=0.0, lt=1.0, description="Share of samples held out.")
    log_every: int = Field(10, ge=1, description="Epochs between progress log lines.")


@dataclass(frozen=True)
class SkillReport:
    """Correlation skill on a validation split."""

    r: float
    """Pearson correlation over all validation samples."""

    per_month: dict[int, float]
    """Correlation per target month (months with too few or constant values are omitted)."""

    lead_months: int
    n_validation: int


@dataclass(frozen=True, eq=False)
class TrainReport:
    """Outcome of one training run."""

    initial_loss: float
    """Training-split loss before the first update."""

    train_losses: list[float]
    """Training-split loss after each epoch."""

    validation_losses: list[float]
    """Validation-split loss after each epoch."""

    final_loss: float
    """Training-split loss of the returned parameters."""

    skill: SkillReport
    stopped_early: bool = False
    validation_indices: tuple[int, ...] = ()

    @property
    def epochs_run(self) -> int:
        """Number of completed epochs."""
        return len(self.train_losses)


@dataclass(frozen=True)
class RetrainReport:
    """Paired skills of full-input and masked-input training."""

    full: SkillReport
    masked: SkillReport
    mask_cells: int

    @property
    def delta(self) -> float:
        """Masked minus full correlation."""
        return self.masked.r - self.full.r


@dataclass(frozen=True, eq=False)
class SweepCell:
    """One trained and explained model of a sweep."""

    lead: int
    target_month: Optional[int]
    skill: SkillReport
    saliency: SaliencyMap
    attention: AttentionIndicator
    train: TrainReport


def correlation_skill(predictions: Sequence[float], targets: Sequence[float]) -> float:
    """Pearson correlation coefficient.

    Examples:

    .. code-block:: python

    >>> correlation_skill([1.0, 2.0, 3.0], [2.0, 4.0, 6.0])
    1.0

    Raises:
        ValueError: If lengths differ, fewer than three values are given, or either series is constant.
    """
    a = np.asarray(predictions, dtype=np.float64)
    b = np.asarray(targets, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"Series must be 1-D with equal lengths, got {a.shape} and {b.shape}")
    if a.size < MIN_VALIDATION:
        raise ValueError(f"Correlation needs at least {MIN_VALIDATION} values, got {a.size}")
    da, db = a - a.mean(), b - b.mean()
    ss_a, ss_b = float(da @ da), float(db @ db)
    if ss_a == 0.0 or ss_b == 0.0:
        raise ValueError("Correlation is undefined for a constant series")
    r = float(da @ db) / (sqrt(ss_a) * sqrt(ss_b))
    return min(1.0, max(-1.0, r))


def _select(model: Model, dataset: GridDataset) -> tuple[GridDataset, FloatArray]:
    """Samples the model is trained on and their targets at the model's lead."""
    cfg = model.config
    targets = dataset.target(cfg.lead_months)
    if cfg.target_month == "all":
        return dataset, targets
    keep = np.flatnonzero(dataset.target_months(cfg.lead_months) == cfg.target_month)
    if keep.size == 0:
        raise EmptyResultError(f"No sample verifies in month {cfg.target_month} at lead {cfg.lead_months}")
    return dataset.subset(keep), targets[keep]


def _split(n: int, spec: TrainSpec) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(spec.seed).permutation(n)
    n_val = int(round(n * spec.validation_fraction))
    if n_val < MIN_VALIDATION or n - n_val < 1:
        raise EmptyResultError(f"{n} samples are too few for a validation split of {spec.validation_fraction}")
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _mse(model: Model, fields: FloatArray, targets: FloatArray) -> float:
    residual = predict_batch(model, fields) - targets
    return float(np.mean(residual * residual))


def skill_report(
    predictions: FloatArray, targets: FloatArray, target_months: np.ndarray, lead: int
) -> SkillReport:
    """Overall and per-target-month correlation skill.

    Constant predictions carry no skill and score 0; constant targets are rejected by :func:`correlation_skill`.
    """
    if np.ptp(predictions) == 0.0:
        logger.warning(f"Constant predictions at lead {lead}; reporting zero skill")
        return SkillReport(r=0.0, per_month={}, lead_months=lead, n_validation=int(targets.size))
    per_month: dict[int, float] = {}
    for month in range(1, 13):
        sel = target_months == month
        if sel.sum() < MIN_VALIDATION:
            continue
        try:
            per_month[month] = correlation_skill(predictions[sel], targets[sel])
        except ValueError:
            logger.warning(f"Skipping month {month} skill at lead {lead}: constant series")
    return SkillReport(
        r=correlation_skill(predictions, targets),
        per_month=per_month,
        lead_months=lead,
        n_validation=int(targets.size),
    )


def train(model: Model, dataset: GridDataset, spec: TrainSpec) -> TrainReport:
    """Fit ``model`` in place on the dataset's targets at the model's lead.

    Samples are split 80/20 (``spec.validation_fraction``) by a permutation seeded with ``spec.seed``; each epoch
    visits the training split in a freshly shuffled order, in mini-batches, minimizing mean squared error. When
    ``spec.patience`` epochs pass without a lower validation loss, training stops and the best parameters are
    restored.

    Raises:
        DivergenceError: If a loss becomes non-finite; the message names the epoch.
        EmptyResultError: If too few samples remain for the split.
    """
    spec = TrainSpec.parse(spec)
    data, targets = _select(model, dataset)
    train_idx, val_idx = _split(len(data), spec)
    x_train, y_train = data.fields[train_idx], targets[train_idx]
    x_val, y_val = data.fields[val_idx], targets[val_idx]
    rng = np.random.default_rng(derive_seed(spec.seed, 1))
    names = [name for name, _ in model.named_parameters()]
    velocity = {name: np.zeros(model.params[name].shape) for name in names}
    initial = _mse(model, x_train, y_train)
    train_losses: list[float] = []
    val_losses: list[float] = []
    best = (float("inf"), model.state())
    since_best = 0
    stopped = False
    for epoch in range(1, spec.epochs + 1):
        order = rng.permutation(train_idx.size)
        for start in range(0, order.size, spec.batch_size):
            batch = order[start : start + spec.batch_size]
            params = model.parameters()
            with Tape():
                residual = model.forward(Tensor(x_train[batch])) - Tensor(y_train[batch])
                loss = square(residual).mean()
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"Training diverged at epoch {epoch}: batch loss {loss.item()}")
            grads = grad(loss, params)
            updates = {}
            for name, param, g in zip(names, params, grads):
                if spec.optimizer == "momentum":
                    velocity[name] = spec.momentum * velocity[name] + g
                    step = velocity[name]
                else:
                    step = g
                updates[name] = param.data - spec.learning_rate * step
            model.update(updates)
        train_loss = _mse(model, x_train, y_train)
        val_loss = _mse(model, x_val, y_val)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise DivergenceError(f"Training diverged at epoch {epoch}: loss {train_loss}")
        train_losses.append(train_loss)
        val_losses.append(val_loss)
        if epoch % spec.log_every == 0 or epoch == spec.epochs:
            logger.info(f"Epoch {epoch}/{spec.epochs}: train loss {train_loss:.6g}, validation loss {val_loss:.6g}")
        if val_loss < best[0]:
            best = (val_loss, model.state())
            since_best = 0
        else:
            since_best += 1
        if spec.patience and since_best >= spec.patience:
            logger.warning(f"Early stopping at epoch {epoch}; restoring epoch {epoch - since_best}")
            model.update(best[1])
            stopped = True
            break
    with no_grad():
        predictions = predict_batch(model, x_val)
    month_of = data.target_months(model.config.lead_months)[val_idx]
    skill = skill_report(predictions, y_val, month_of, model.config.lead_months)
    logger.info(f"Lead {model.config.lead_months}: validation r={skill.r:.4f} on {skill.n_validation} samples")
    return TrainReport(
        initial_loss=initial,
        train_losses=train_losses,
        validation_losses=val_losses,
        final_loss=_mse(model, x_train, y_train),
        skill=skill,
        stopped_early=stopped,
        validation_indices=tuple(int(i) for i in val_idx),
    )


def apply_mask(dataset: GridDataset, mask: RegionMask) -> GridDataset:
    """Zero every input cell outside ``mask`` in all channels.

    Raises:
        EmptyResultError: If the mask selects no cell.
    """
    if mask.count == 0:
        raise EmptyResultError("Mask selects no cell; lower the threshold")
    return dataset.masked(mask)


def retrain_validate(
    config: ModelConfig, dataset: GridDataset, mask: RegionMask, spec: TrainSpec
) -> RetrainReport:
    """Train from scratch on full and on masked inputs with identical seeds and compare the skills."""
    masked = apply_mask(dataset, mask)
    full_report = train(build(config), dataset, spec)
    masked_report = train(build(config), masked, spec)
    report = RetrainReport(full=full_report.skill, masked=masked_report.skill, mask_cells=mask.count)
    logger.info(
        f"Retraining on {mask.count} cells: r {report.full.r:.4f} -> {report.masked.r:.4f} (delta {report.delta:+.4f})"
    )
    return report


AttributionMethod = Literal["pptv", "perturbation", "vbp", "gradcam"]


def explain(model: Model, data: GridDataset, method: AttributionMethod = "pptv") -> SaliencyMap:
    """Run one attribution method over a dataset."""
    if method == "pptv":
        return pptv(model, data)
    if method == "vbp":
        return vbp_saliency(model, data)
    if method == "perturbation":
        return perturbation_saliency(model, data)
    if method == "gradcam":
        return gradcam_saliency(model, data)
    raise ConfigError(f"Unknown attribution method {method!r}")


def _cell(
    config: ModelConfig,
    dataset: GridDataset,
    spec: TrainSpec,
    lead: int,
    month: Optional[int],
    method: AttributionMethod,
    explain_samples: Optional[int],
) -> SweepCell:
    keys = (lead,) if month is None else (lead, month)
    cfg = config.model_copy(
        update={
            "lead_months": lead,
            "target_month": "all" if month is None else month,
            "seed": derive_seed(config.seed, *keys),
        }
    )
    cell_spec = spec.model_copy(update={"seed": derive_seed(spec.seed, *keys)})
    model = build(cfg)
    report = train(model, dataset, cell_spec)
    data, _ = _select(model, dataset)
    if explain_samples is not None:
        data = data.subset(range(min(explain_samples, len(data))))
    saliency = explain(model, data, method)
    scope = AttentionScope(lead=lead, season=None if month is None else f"month_{month:02d}")
    return SweepCell(
        lead=lead,
        target_month=month,
        skill=report.skill,
        saliency=saliency,
        attention=attention_indicator(saliency, scope),
        train=report,
    )


def lead_sweep(
    config: ModelConfig,
    dataset: GridDataset,
    leads: Sequence[int],
    spec: TrainSpec,
    *,
    method: AttributionMethod = "pptv",
    explain_samples: Optional[int] = None,
) -> dict[int, SweepCell]:
    """Train and explain one model per lead.

    Model and training seeds are derived from ``(seed, lead)``, so a cell's result does not depend on which other
    leads are swept or in what order.

    Raises:
        ConfigError: If the dataset lacks targets for a requested lead.
    """
    missing = [lead for lead in leads if not 1 <= lead <= dataset.n_leads]
    if missing:
        raise ConfigError(f"Dataset has no targets for leads {missing} (stored: 1..{dataset.n_leads})")
    cells = {}
    for lead in leads:
        cells[lead] = _cell(config, dataset, spec, lead, None, method, explain_samples)
        logger.info(f"Lead {lead}: r={cells[lead].skill.r:.4f}, attention={cells[lead].attention.value:.4f}")
    return cells


def monthly_sweep(
    config: ModelConfig,
    dataset: GridDataset,
    lead: int,
    spec: TrainSpec,
    *,
    months: Sequence[int] = tuple(range(1, 13)),
    method: AttributionMethod = "pptv",
    explain_samples: Optional[int] = None,
) -> dict[int, SweepCell]:
    """Train and explain one model per target month at a fixed lead, keyed by target month."""
    if not 1 <= lead <= dataset.n_leads:
        raise ConfigError(f"Dataset has no targets for lead {lead} (stored: 1..{dataset.n_leads})")
    return {month: _cell(config, dataset, spec, lead, month, method, explain_samples) for month in months}


def _group_mean(maps: Mapping[int, SaliencyMap], months: Sequence[int], label: str) -> SaliencyMap:
    missing = [m for m in months if m not in maps]
    if missing:
        raise ConfigError(f"Seasonal grouping needs maps for months {', '.join(map(str, missing))}")
    total = np.zeros(maps[months[0]].raw.shape)
    for month in months:
        total = total + maps[month].raw
    first = maps[months[0]]
    return SaliencyMap.from_raw(total / len(months), first.method, first.sample_count, label=label)


def seasonal_group(maps: Mapping[int, SaliencyMap]) -> tuple[SaliencyMap, SaliencyMap]:
    """Spring (Mar-Jun) and non-spring (Sep-Dec) mean maps, each re-normalized.

    Raises:
        ConfigError: If a required month is missing; the message names it.
    """
    return _group_mean(maps, SPRING_MONTHS, "spring"), _group_mean(maps, NON_SPRING_MONTHS, "non_spring")


def seasonal_attention(
    maps: Mapping[int, SaliencyMap], lead: Optional[int] = None
) -> tuple[AttentionIndicator, AttentionIndicator]:
    """Attention indicators of the spring and non-spring aggregates."""
    spring, non_spring = seasonal_group(maps)
    return (
        attention_indicator(spring, AttentionScope(lead=lead, season="spring")),
        attention_indicator(non_spring, AttentionScope(lead=lead, season="non_spring")),
    )


__all__ = [
    "AttributionMethod",
    "RetrainReport",
    "SkillReport",
    "SweepCell",
    "TrainReport",
    "TrainSpec",
    "apply_mask",
    "correlation_skill",
    "explain",
    "lead_sweep",
    "monthly_sweep",
    "retrain_validate",
    "seasonal_attention",
    "seasonal_group",
    "skill_report",
    "train",
]
