"""Command-line entry point: ``ensocast <subcommand>``.

Exit codes: 0 success, 2 configuration or usage error, 3 I/O or file format error, 4 numeric failure,
5 empty result.
"""

import argparse
from collections.abc import Sequence
from logging import Formatter, StreamHandler, getLogger
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from ensocast import __version__
from ensocast.core.attribution import (
    AttentionScope,
    SaliencyMap,
    aggregate_channels,
    attention_indicator,
    configure_attribution,
    gradcam_saliency,
    load_saliency_csv,
    meridional_mean,
    perturbation_saliency,
    pptv,
    save_saliency_csv,
    save_saliency_pgm,
    threshold_mask,
    vbp_saliency,
    zonal_mean,
)
from ensocast.core.config import RunConfig, describe_keys, load_run_config
from ensocast.core.constants import CHANNEL_NAMES
from ensocast.core.data import GridDataset, GridSpec, load_grid, save_grid, save_mask_csv, synth_generate
from ensocast.core.exceptions import (
    BadMagicError,
    ConfigError,
    EmptyResultError,
    FormatError,
    NumericError,
    ShapeError,
)
from ensocast.core.experiments import (
    lead_sweep,
    monthly_sweep,
    retrain_validate,
    seasonal_attention,
    seasonal_group,
    train,
)
from ensocast.core.model import Ensemble, ModelConfig, Regressor, build, load_model, save_model
from ensocast.core.report import write_report, write_table
from ensocast.utils.base import dump_yaml

logger = getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_EMPTY = 5


def _setup_logging(level: str) -> None:
    root = getLogger()
    root.setLevel(level)
    if not root.handlers:
        handler = StreamHandler()
        handler.setFormatter(Formatter("%(levelname)s %(name)s: %(message)s"))
        root.addHandler(handler)


def _runtime(args: argparse.Namespace) -> RunConfig:
    config = load_run_config(args.config)
    _setup_logging(args.log_level or config.runtime.log_level)
    configure_attribution(workers=args.workers or config.runtime.workers)
    return config


def _out_dir(config: RunConfig, path: Optional[str]) -> Path:
    return Path(path) if path else config.export.out_dir


def cmd_gen_data(args: argparse.Namespace) -> int:
    """Generate a planted-signal dataset and its truth mask."""
    config = _runtime(args)
    grid, synthesis = config.grid, config.synthesis
    dataset, truth = synth_generate(
        args.seed, synthesis.n_samples, grid, synthesis.truth(grid), max_lead=synthesis.max_lead
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_grid(out, dataset)
    truth_path = out.with_name(f"{out.stem}.truth.csv")
    save_mask_csv(truth_path, truth.driver_mask, grid)
    print(
        f"n_samples={len(dataset)} grid={grid.nlat}x{grid.nlon} noise={truth.noise_level} "
        f"driver_cells={truth.driver_mask.count} out={out} truth={truth_path}"
    )
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    """Train one model and write its checkpoint and report."""
    config = _runtime(args).with_seed(args.seed)
    dataset = load_grid(args.data)
    overrides: dict[str, object] = {}
    if args.lead is not None:
        overrides["lead_months"] = args.lead
    model_config = ModelConfig.parse({**config.model.model_dump(), **overrides})
    model = build(model_config)
    report = train(model, dataset, config.train)
    out = Path(args.out_model)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(out, model)
    if config.export.report:
        write_report(
            _out_dir(config, None),
            "train",
            {**config.sections(), "model": model_config.model_dump(mode="json")},
            {
                "skill": {
                    "r": report.skill.r,
                    "n_validation": report.skill.n_validation,
                    "lead": model_config.lead_months,
                },
                "training": {
                    "epochs_run": report.epochs_run,
                    "initial_loss": report.initial_loss,
                    "final_loss": report.final_loss,
                    "stopped_early": report.stopped_early,
                },
            },
            args.seed,
        )
    print(f"lead={model_config.lead_months} r={report.skill.r:.4f} model={out}")
    return EXIT_OK


def _attribute(config: RunConfig, model: Regressor, dataset: GridDataset, method: str) -> SaliencyMap:
    data: object = dataset
    limit = config.attribution.explain_samples
    if limit is not None:
        data = dataset.subset(range(min(limit, len(dataset))))
    if method == "pptv":
        return pptv(model, data)
    if method == "vbp":
        return vbp_saliency(model, data)
    if method == "gradcam":
        return gradcam_saliency(model, data)
    attribution = config.attribution
    return perturbation_saliency(model, data, patch=attribution.patch, stride=attribution.stride, fill=attribution.fill)


def _export_map(config: RunConfig, saliency: SaliencyMap, grid: GridSpec, out: Path) -> list[Path]:
    out.parent.mkdir(parents=True, exist_ok=True)
    save_saliency_csv(out, saliency, grid)
    paths = [out]
    if config.export.pgm:
        paths += save_saliency_pgm(out.with_suffix(""), saliency, grid)
    return paths


def _export_channels(config: RunConfig, saliency: SaliencyMap, grid: GridSpec, out: Path) -> list[Path]:
    """Write the full map to ``out`` and each re-normalized channel to ``<stem>_<channel>`` files."""
    out.parent.mkdir(parents=True, exist_ok=True)
    save_saliency_csv(out, saliency, grid)
    paths = [out]
    for channel in aggregate_channels(saliency, "per-channel"):
        path = out.with_name(f"{out.stem}_{channel.label}{out.suffix}")
        save_saliency_csv(path, channel, grid)
        paths.append(path)
        if config.export.pgm:
            paths += save_saliency_pgm(out.with_suffix(""), channel, grid)
    return paths


def cmd_explain(args: argparse.Namespace) -> int:
    """Attribute a model (or the mean of several) over a dataset and export the map."""
    config = _runtime(args)
    models = [load_model(p) for p in args.model]
    model: Regressor = models[0] if len(models) == 1 else Ensemble(models)
    dataset = load_grid(args.data)
    saliency = _attribute(config, model, dataset, args.method)
    if args.channels == "mean":
        saliency = aggregate_channels(saliency, "mean")
        paths = _export_map(config, saliency, dataset.grid, Path(args.out))
    else:
        paths = _export_channels(config, saliency, dataset.grid, Path(args.out))
        for c, name in enumerate(CHANNEL_NAMES):
            channel = attention_indicator(saliency, AttentionScope(channel=c))
            print(f"channel={name} attention={channel.value:.6f}")
    indicator = attention_indicator(saliency)
    if not saliency.raw.any():
        logger.warning("All-zero saliency map written")
    print(f"method={args.method} attention={indicator.value:.6f} files={len(paths)}")
    return EXIT_OK


def _validation_config(path: str) -> ModelConfig:
    """Model configuration from a checkpoint header or from the model section of a run config."""
    try:
        return load_model(path).config
    except BadMagicError:
        return load_run_config(path).model


def cmd_validate(args: argparse.Namespace) -> int:
    """Retrain on the thresholded region of a saliency map and compare skills."""
    config = _runtime(args).with_seed(args.seed)
    dataset = load_grid(args.data)
    model_config = _validation_config(args.model_config)
    model_config = model_config.model_copy(update={"seed": args.seed})
    if args.lead is not None:
        model_config = ModelConfig.parse({**model_config.model_dump(), "lead_months": args.lead})
    saliency, grid = load_saliency_csv(args.saliency)
    if grid.shape != dataset.grid.shape:
        raise ShapeError(f"Saliency grid {grid.shape} does not match dataset grid {dataset.grid.shape}")
    if saliency.raw.ndim == 3:
        saliency = aggregate_channels(saliency, "mean")
    tau = args.threshold if args.threshold is not None else config.attribution.threshold
    mask = threshold_mask(saliency, tau)
    if mask.count == 0:
        raise EmptyResultError(f"No cell reaches threshold {tau}; lower --threshold")
    report = retrain_validate(model_config, dataset, mask, config.train)
    out = Path(args.out) if args.out else _out_dir(config, None) / "validate.csv"
    write_table(
        out,
        ["run", "r", "n_validation", "cells"],
        [
            ["full", report.full.r, report.full.n_validation, dataset.grid.nlat * dataset.grid.nlon],
            ["masked", report.masked.r, report.masked.n_validation, mask.count],
            ["delta", report.delta, report.masked.n_validation, mask.count],
        ],
    )
    print(
        f"threshold={tau} cells={mask.count} full_r={report.full.r:.4f} "
        f"masked_r={report.masked.r:.4f} delta={report.delta:+.4f}"
    )
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    """Train and explain one model per lead (or per target month) and write one map per cell."""
    config = _runtime(args).with_seed(args.seed)
    dataset = load_grid(args.data)
    sweep = config.sweep
    method = config.attribution.method
    limit = config.attribution.explain_samples
    model_config = config.model
    if sweep.mode == "lead":
        cells = lead_sweep(model_config, dataset, sweep.leads, config.train, method=method, explain_samples=limit)
        names = {key: f"lead_{key:02d}" for key in cells}
    else:
        cells = monthly_sweep(
            model_config, dataset, sweep.lead, config.train, months=sweep.months, method=method, explain_samples=limit
        )
        names = {key: f"month_{key:02d}" for key in cells}
    out_dir = _out_dir(config, args.out_dir)
    rows = []
    for key in sorted(cells):
        cell = cells[key]
        _export_map(config, cell.saliency, dataset.grid, out_dir / f"{names[key]}.csv")
        rows.append([cell.lead, cell.target_month or "all", cell.skill.r, cell.attention.value])
    write_table(out_dir / "sweep.csv", ["lead", "month", "r", "attention_indicator"], rows)
    dump_yaml(config.sections(), out_dir / "run.yaml")
    if config.export.report:
        results = {names[k]: {"r": cells[k].skill.r, "attention": cells[k].attention.value} for k in sorted(cells)}
        write_report(out_dir, "sweep", config.sections(), results, args.seed)
    print(f"mode={sweep.mode} cells={len(cells)} out={out_dir}")
    return EXIT_OK


def _maps(directory: Path, prefix: str) -> dict[int, SaliencyMap]:
    maps = {}
    for path in sorted(directory.glob(f"{prefix}_*.csv")):
        suffix = path.stem[len(prefix) + 1 :]
        if suffix.isdigit():
            maps[int(suffix)] = load_saliency_csv(path)[0]
    return maps


def _grid_of(directory: Path) -> GridSpec:
    for path in sorted(directory.glob("*_*.csv")):
        if path.stem.split("_")[-1].isdigit():
            return load_saliency_csv(path)[1]
    raise ConfigError(f"No lead_XX.csv or month_XX.csv saliency maps in {directory}")


def _spatial(saliency: SaliencyMap) -> SaliencyMap:
    return aggregate_channels(saliency, "mean") if saliency.raw.ndim == 3 else saliency


def cmd_analyze(args: argparse.Namespace) -> int:
    """Reduce a directory of saliency maps into tables."""
    config = _runtime(args)
    directory = Path(args.saliency_dir)
    if not directory.is_dir():
        raise ConfigError(f"Saliency directory {directory} does not exist")
    out_dir = Path(args.out_dir) if args.out_dir else directory
    if args.mode == "seasonal":
        maps = _maps(directory, "month")
        spring, non_spring = seasonal_group(maps)
        first, second = seasonal_attention(maps)
        grid = _grid_of(directory)
        _export_map(config, spring, grid, out_dir / "spring.csv")
        _export_map(config, non_spring, grid, out_dir / "non_spring.csv")
        rows = [["spring", first.value], ["non_spring", second.value]]
        write_table(out_dir / "seasonal.csv", ["group", "attention_indicator"], rows)
        print(f"spring={first.value:.6f} non_spring={second.value:.6f}")
        return EXIT_OK
    if args.mode == "lead-sweep":
        maps = _maps(directory, "lead")
        if not maps:
            raise ConfigError(f"No lead_XX.csv saliency maps in {directory}")
        if args.leads:
            missing = [lead for lead in args.leads if lead not in maps]
            if missing:
                raise ConfigError(f"Missing saliency maps for leads {missing} in {directory}")
            maps = {lead: maps[lead] for lead in args.leads}
        rows = [[lead, attention_indicator(maps[lead]).value] for lead in sorted(maps)]
        write_table(out_dir / "lead_sweep.csv", ["lead", "attention_indicator"], rows)
        print(f"leads={len(rows)}")
        return EXIT_OK
    grid = _grid_of(directory)
    maps_by_name = {
        f"{prefix}_{key:02d}": saliency
        for prefix in ("lead", "month")
        for key, saliency in _maps(directory, prefix).items()
    }
    reducer: Callable[[SaliencyMap], np.ndarray]
    if args.mode == "zonal":
        reducer, axis_name, axis = lambda m: zonal_mean(_spatial(m)), "lat", grid.lats
    else:
        reducer, axis_name, axis = lambda m: meridional_mean(_spatial(m)), "lon", grid.lons
    columns = {name: reducer(m) for name, m in maps_by_name.items()}
    rows = [[axis[i], *(columns[name][i] for name in columns)] for i in range(axis.size)]
    write_table(out_dir / f"{args.mode}.csv", [axis_name, *columns], rows)
    print(f"mode={args.mode} maps={len(columns)}")
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML run configuration (defaults apply to missing keys).")
    levels = ["DEBUG", "INFO", "WARNING", "ERROR"]
    parser.add_argument("--log-level", choices=levels, help="Override runtime.log_level.")
    parser.add_argument("--workers", type=int, help="Override runtime.workers.")


def build_parser() -> argparse.ArgumentParser:
    """Parser of every subcommand; ``--help`` lists every configuration key with its default."""
    epilog = "configuration keys:\n" + "\n".join(f"  {line}" for line in describe_keys())
    formatter = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(
        prog="ensocast", description=__doc__.splitlines()[0], epilog=epilog, formatter_class=formatter
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, handler: Callable[[argparse.Namespace], int], help_text: str) -> argparse.ArgumentParser:
        cmd = sub.add_parser(name, help=help_text, description=help_text, epilog=epilog, formatter_class=formatter)
        _add_common(cmd)
        cmd.set_defaults(handler=handler)
        return cmd

    cmd = add("gen-data", cmd_gen_data, "Generate a planted-signal dataset and its truth mask.")
    cmd.add_argument("--seed", type=int, required=True, help="Generator seed (required).")
    cmd.add_argument("--out", required=True, help="Dataset file to write.")

    cmd = add("train", cmd_train, "Train one model and write its checkpoint.")
    cmd.add_argument("--data", required=True, help="Dataset file.")
    cmd.add_argument("--lead", type=int, help="Forecast lead, 1..23 (overrides model.lead_months).")
    cmd.add_argument("--seed", type=int, required=True, help="Model and training seed (required).")
    cmd.add_argument("--out-model", required=True, help="Checkpoint file to write.")

    cmd = add("explain", cmd_explain, "Attribute a model over a dataset.")
    cmd.add_argument("--model", required=True, nargs="+", help="Checkpoint(s); several are explained as their mean.")
    cmd.add_argument("--data", required=True, help="Dataset file.")
    cmd.add_argument("--method", choices=["pptv", "perturbation", "vbp", "gradcam"], default="pptv")
    cmd.add_argument("--channels", choices=["mean", "per"], default="mean")
    cmd.add_argument("--out", required=True, help="Saliency CSV to write; graymaps share its stem.")

    cmd = add("validate", cmd_validate, "Retrain on the important region of a saliency map.")
    cmd.add_argument("--model-config", required=True, help="Checkpoint or run config providing the architecture.")
    cmd.add_argument("--data", required=True, help="Dataset file.")
    cmd.add_argument("--saliency", required=True, help="Saliency CSV.")
    cmd.add_argument("--threshold", type=float, help="Normalized threshold in (0, 1] (default attribution.threshold).")
    cmd.add_argument("--lead", type=int, help="Override the configured lead.")
    cmd.add_argument("--seed", type=int, required=True, help="Seed of both training runs (required).")
    cmd.add_argument("--out", help="Paired skill CSV (default <export.out_dir>/validate.csv).")

    cmd = add("analyze", cmd_analyze, "Reduce saliency maps into tables.")
    cmd.add_argument("--saliency-dir", required=True, help="Directory of lead_XX.csv / month_XX.csv maps.")
    cmd.add_argument("--mode", choices=["seasonal", "lead-sweep", "zonal", "meridional"], required=True)
    cmd.add_argument("--leads", type=int, nargs="*", help="Leads required in lead-sweep mode (default: all found).")
    cmd.add_argument("--out-dir", help="Output directory (default: the saliency directory).")

    cmd = add("sweep", cmd_sweep, "Train and explain one model per lead or per target month.")
    cmd.add_argument("--data", required=True, help="Dataset file.")
    cmd.add_argument("--seed", type=int, required=True, help="Root seed; cells derive theirs from it (required).")
    cmd.add_argument("--out-dir", help="Output directory (default export.out_dir).")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the command line and return its exit code."""
    args = build_parser().parse_args(argv)
    try:
        return int(args.handler(args))
    except EmptyResultError as err:
        logger.error(f"Empty result: {err}")
        return EXIT_EMPTY
    except (ConfigError, ShapeError) as err:
        logger.error(f"Configuration error: {err}")
        return EXIT_CONFIG
    except (OSError, FormatError) as err:
        logger.error(f"I/O error: {err}")
        return EXIT_IO
    except NumericError as err:
        logger.error(f"Numeric failure: {err}")
        return EXIT_NUMERIC
    except ValueError as err:
        logger.error(f"Invalid input: {err}")
        return EXIT_CONFIG


__all__ = ["build_parser", "main"]
