"""Base utility functions for ensocast."""

from collections.abc import Iterable, Mapping
from hashlib import sha256
from pathlib import Path
from typing import Any

import numpy as np
from ruamel.yaml import YAML

from ensocast.utils.types import PathLike


def _yaml() -> YAML:
    # YAML 1.2, pure python so results never depend on the optional C extension
    return YAML(typ="safe", pure=True)


def load_yaml(yaml_file: PathLike) -> Any:
    """Load a yaml file.

    Args:
        yaml_file (PathLike): Path to the yaml file.

    Returns:
        Loaded yaml content.
    """
    with Path(yaml_file).open(encoding="utf-8") as stream:
        return _yaml().load(stream)


def dump_yaml(data: Any, yaml_file: PathLike) -> None:
    """Dump data to a yaml file.

    Args:
        data (Any): The data to dump.
        yaml_file (PathLike): Path to the yaml file.
    """
    with Path(yaml_file).open("w", encoding="utf-8") as stream:
        _yaml().dump(data, stream)


def format_value(value: Any) -> str:
    """Format a scalar or sequence for ``key=value`` lines.

    Floats use 17 significant digits so that the text form round-trips bit-exactly.

    Examples:

    .. code-block:: python

    >>> format_value(0.1)
    '0.10000000000000001'
    >>> format_value([2, 4, 8])
    '2,4,8'
    >>> format_value(True)
    'true'
    """
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    return str(value)


def key_value_lines(items: Mapping[str, Any]) -> list[str]:
    """Render a mapping as ``key=value`` lines in key order of the mapping."""
    return [f"{key}={format_value(value)}" for key, value in items.items()]


def parse_key_value_lines(lines: Iterable[str]) -> dict[str, str]:
    """Parse ``key=value`` lines, ignoring blanks and ``#`` comments.

    Raises:
        ValueError: If a line has no ``=`` separator or a key repeats.
    """
    res: dict[str, str] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"Line {lineno} is not a key=value pair: {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in res:
            raise ValueError(f"Duplicate key on line {lineno}: {key}")
        res[key] = value
    return res


def config_hash(items: Mapping[str, Any], length: int = 12) -> str:
    """Stable short hash of a configuration mapping (SHA-256 over its canonical ``key=value`` dump)."""
    canonical = "\n".join(key_value_lines(dict(sorted(items.items()))))
    return sha256(canonical.encode("utf-8")).hexdigest()[:length]


def derive_seed(seed: int, *keys: int) -> int:
    """Derive an independent child seed from a root seed and integer keys.

    The result depends only on ``(seed, *keys)``, never on call order.
    """
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, dtype=np.uint32)[0])


__all__ = [
    "config_hash",
    "derive_seed",
    "dump_yaml",
    "format_value",
    "key_value_lines",
    "load_yaml",
    "parse_key_value_lines",
]
