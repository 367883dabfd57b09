"""Dataclass utilities."""

from dataclasses import dataclass as std_dataclass, field
from typing import Any, Callable, Optional, TypeVar, Union, overload

from typing_extensions import dataclass_transform

T = TypeVar("T")


@overload
def dataclass(cls: None = None, **kwargs: Any) -> Callable[[type[T]], type[T]]: ...


@overload
def dataclass(cls: type[T], **kwargs: Any) -> type[T]: ...


@dataclass_transform(field_specifiers=(field,), kw_only_default=True)
def dataclass(cls: Optional[type[T]] = None, **kwargs: Any) -> Union[Callable[[type[T]], type[T]], type[T]]:
    """Keyword-only, slotted dataclass.

    Any keyword accepted by :func:`dataclasses.dataclass` may still be overridden.
    """
    options = {"kw_only": True, "slots": True, **kwargs}
    return std_dataclass(cls, **options)  # type: ignore[call-overload, no-any-return]


__all__ = ["dataclass"]
