"""Experiment reports rendered with Jinja, and CSV tables."""

import csv
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import field
from logging import getLogger
from pathlib import Path
from typing import Any, Callable, Optional

from jinja2 import Environment, StrictUndefined, Undefined
from jinja2.sandbox import ImmutableSandboxedEnvironment

from ensocast.utils.base import config_hash, format_value
from ensocast.utils.dataclasses import dataclass
from ensocast.utils.types import PathLike

logger = getLogger(__name__)

REPORT_TEMPLATE = """\
# ensocast {{ kind }} report
{% for name, items in sections.items() %}

[{{ name }}]
{% for key, value in items.items() %}
{{ key }}={{ value | kv }}
{% endfor %}
{% endfor %}
"""


@dataclass
class ReportSettings:
    """Settings for report rendering."""

    environment_type: type[Environment] = ImmutableSandboxedEnvironment
    """The type of Jinja environment to use."""

    undefined_type: type[Undefined] = StrictUndefined
    """The type of Jinja undefined to use."""

    trim_blocks: bool = True
    """Whether to trim blocks in the template."""

    lstrip_blocks: bool = True
    """Whether to left-strip blocks in the template."""

    template: str = REPORT_TEMPLATE
    """Report template; receives ``kind`` and ``sections``."""

    filters: dict[str, Callable[..., Any]] = field(default_factory=dict)
    """Custom filters added next to ``kv``."""


_report_settings = ReportSettings()
"""Global settings for reports."""


def get_environment() -> Environment:
    """Get the Jinja environment for reports."""
    env = _report_settings.environment_type(
        undefined=_report_settings.undefined_type,
        trim_blocks=_report_settings.trim_blocks,
        lstrip_blocks=_report_settings.lstrip_blocks,
        keep_trailing_newline=True,
    )
    env.filters["kv"] = format_value
    env.filters.update(_report_settings.filters)
    return env


def configure_report(
    settings: Optional[ReportSettings] = None,
    *,
    environment_type: Optional[type[Environment]] = None,
    undefined_type: Optional[type[Undefined]] = None,
    trim_blocks: Optional[bool] = None,
    lstrip_blocks: Optional[bool] = None,
    template: Optional[str] = None,
    filters: Optional[dict[str, Callable[..., Any]]] = None,
) -> None:
    """Configure report rendering; calling without arguments restores the defaults.

    Args:
        settings (ReportSettings | None): Settings to copy. If provided, keyword arguments are ignored.
        environment_type (type[Environment] | None): The type of Jinja environment to use.
        undefined_type (type[Undefined] | None): The type of Jinja undefined to use.
        trim_blocks (bool | None): Whether to trim blocks.
        lstrip_blocks (bool | None): Whether to left-strip blocks.
        template (str | None): Report template source.
        filters (dict[str, Callable[..., Any]] | None): Custom filters.
    """
    if settings is None:
        kwargs: dict[str, Any] = {}
        if environment_type is not None:
            kwargs["environment_type"] = environment_type
        if undefined_type is not None:
            kwargs["undefined_type"] = undefined_type
        if trim_blocks is not None:
            kwargs["trim_blocks"] = trim_blocks
        if lstrip_blocks is not None:
            kwargs["lstrip_blocks"] = lstrip_blocks
        if template is not None:
            kwargs["template"] = template
        if filters is not None:
            kwargs["filters"] = filters
        settings = ReportSettings(**kwargs)
    _report_settings.environment_type = settings.environment_type
    _report_settings.undefined_type = settings.undefined_type
    _report_settings.trim_blocks = settings.trim_blocks
    _report_settings.lstrip_blocks = settings.lstrip_blocks
    _report_settings.template = settings.template
    _report_settings.filters = settings.filters.copy()


def flatten_sections(sections: Mapping[str, Mapping[str, Any]]) -> dict[str, Any]:
    """``section.key`` to value, the canonical form hashed into report names."""
    return {f"{name}.{key}": value for name, items in sections.items() for key, value in items.items()}


def render_report(kind: str, sections: Mapping[str, Mapping[str, Any]]) -> str:
    """Render ``[section]`` blocks of ``key=value`` lines."""
    return get_environment().from_string(_report_settings.template).render(kind=kind, sections=sections)


def report_name(kind: str, config_sections: Mapping[str, Mapping[str, Any]], seed: int, suffix: str = ".txt") -> str:
    """File name embedding the configuration hash and the seed, e.g. ``train_<hash>_seed42.txt``."""
    return f"{kind}_{config_hash(flatten_sections(config_sections))}_seed{seed}{suffix}"


def write_report(
    directory: PathLike,
    kind: str,
    config_sections: Mapping[str, Mapping[str, Any]],
    results: Mapping[str, Mapping[str, Any]],
    seed: int,
) -> Path:
    """Write a report holding the configuration sections followed by result sections; return its path."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    path = out / report_name(kind, config_sections, seed)
    path.write_text(render_report(kind, {**config_sections, **results}), encoding="utf-8")
    logger.info(f"Wrote {kind} report to {path}")
    return path


def write_table(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    """Write a CSV table; floats use 17 significant digits."""
    file = Path(path)
    file.parent.mkdir(parents=True, exist_ok=True)
    with file.open("w", newline="", encoding="utf-8") as stream:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])
    logger.debug(f"Wrote table {file}")
    return file


def read_table(path: PathLike) -> list[dict[str, str]]:
    """Read a CSV table written by :func:`write_table`."""
    with Path(path).open(newline="", encoding="utf-8") as stream:
        return list(csv.DictReader(stream))


__all__ = [
    "REPORT_TEMPLATE",
    "ReportSettings",
    "configure_report",
    "flatten_sections",
    "get_environment",
    "read_table",
    "render_report",
    "report_name",
    "write_report",
    "write_table",
]
