"""Base classes for ensocast configurations."""

from collections.abc import Iterable, Mapping
from typing import Any, get_origin

from pydantic import BaseModel, ConfigDict, ValidationError, model_validator
from typing_extensions import Self

from ensocast.core.exceptions import ConfigError
from ensocast.utils.base import key_value_lines, parse_key_value_lines


def describe_validation_error(err: ValidationError) -> str:
    """Summarize a pydantic error as ``field: message`` pairs naming every offending field."""
    parts = []
    for item in err.errors():
        loc = ".".join(str(p) for p in item["loc"]) or "<root>"
        parts.append(f"{loc}: {item['msg']}")
    return "; ".join(parts)


class Serializable(BaseModel):
    """Base configuration."""

    model_config = ConfigDict(frozen=True, validate_default=True, extra="forbid", populate_by_name=True)

    @model_validator(mode="before")
    @classmethod
    def _split_sequences(cls, raw: Any) -> Any:
        """Accept comma-separated strings for sequence fields (the ``key=value`` form)."""
        if not isinstance(raw, Mapping):
            return raw
        res = dict(raw)
        for name, info in cls.model_fields.items():
            value = res.get(name, res.get(info.alias or name))
            if isinstance(value, str) and get_origin(info.annotation) in (list, tuple):
                res[name] = [v.strip() for v in value.split(",") if v.strip()]
        return res

    @classmethod
    def parse(cls, raw: Any) -> Self:
        """Validate raw data into the model, raising :class:`ConfigError` naming the offending fields."""
        if isinstance(raw, cls):
            return raw
        try:
            return cls.model_validate(raw)
        except ValidationError as err:
            raise ConfigError(f"Invalid {cls.__name__}: {describe_validation_error(err)}") from err

    def to_key_values(self) -> list[str]:
        """Render the model as ``key=value`` lines in field order."""
        return key_value_lines(self.model_dump(mode="json"))

    @classmethod
    def from_key_values(cls, lines: Iterable[str]) -> Self:
        """Parse ``key=value`` lines produced by :meth:`to_key_values`."""
        try:
            items: Mapping[str, Any] = parse_key_value_lines(lines)
        except ValueError as err:
            raise ConfigError(str(err)) from err
        return cls.parse(dict(items))


__all__ = ["Serializable", "describe_validation_error"]
