"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every differentiable operation executed while it is active. Calling :func:`backward` on a
scalar output replays the tape in reverse order, propagating adjoints through each record's local gradient rule.

Tapes are bound to the current execution context through a :class:`contextvars.ContextVar`, so every thread can
hold its own tape. Operations run outside a tape, or under :func:`no_grad`, are not recorded.

Examples:

.. code-block:: python

>>> x = Tensor([2.0], requires_grad=True)
>>> y = Tensor([3.0], requires_grad=True)
>>> with Tape():
...     out = (x * y).sum()
>>> backward(out)
>>> float(x.grad[0]), float(y.grad[0])
(3.0, 2.0)
"""

from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import field
from logging import getLogger
from math import prod
from typing import Any, Callable, Optional, Union, cast

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from typing_extensions import Self

from ensocast.core.constants import FD_EPSILON
from ensocast.core.exceptions import EmptyResultError, NumericError, ShapeError
from ensocast.utils.dataclasses import dataclass
from ensocast.utils.types import FloatArray

logger = getLogger(__name__)

GradRule = Callable[[FloatArray], Sequence[Optional[FloatArray]]]
Padding = Union[int, tuple[int, int], tuple[tuple[int, int], tuple[int, int]]]


class Tensor:
    """An n-dimensional float64 array with an optional gradient buffer.

    The data array is never written after construction; operations always allocate their outputs.
    """

    __slots__ = ("_tape", "data", "grad", "requires_grad")

    def __init__(self, data: Any, *, requires_grad: bool = False) -> None:
        """Wrap ``data`` as a float64 tensor.

        Args:
            data: Array-like values.
            requires_grad: Whether gradients should be tracked for this tensor.
        """
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data: FloatArray = arr
        self.grad: Optional[FloatArray] = None
        self.requires_grad = requires_grad
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple[int, ...]:
        """Extents of the tensor."""
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        """Rank of the tensor."""
        return self.data.ndim

    @property
    def size(self) -> int:
        """Number of elements."""
        return int(self.data.size)

    def item(self) -> float:
        """Value of a single-element tensor."""
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> FloatArray:
        """Writable copy of the data."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        """Same values, no gradient tracking."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        """Reset the accumulated gradient to zeros (or drop it when gradients are not tracked)."""
        self.grad = np.zeros(self.data.shape) if self.requires_grad else None

    def __repr__(self) -> str:
        """Short representation."""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: Any) -> "Tensor":
        """Elementwise sum with broadcasting."""
        return add(self, _as_tensor(other))

    def __radd__(self, other: Any) -> "Tensor":
        """Elementwise sum with broadcasting."""
        return add(_as_tensor(other), self)

    def __sub__(self, other: Any) -> "Tensor":
        """Elementwise difference with broadcasting."""
        return sub(self, _as_tensor(other))

    def __rsub__(self, other: Any) -> "Tensor":
        """Elementwise difference with broadcasting."""
        return sub(_as_tensor(other), self)

    def __mul__(self, other: Any) -> "Tensor":
        """Elementwise product with broadcasting."""
        return mul(self, _as_tensor(other))

    def __rmul__(self, other: Any) -> "Tensor":
        """Elementwise product with broadcasting."""
        return mul(_as_tensor(other), self)

    def __neg__(self) -> "Tensor":
        """Negation."""
        return mul(self, Tensor(-1.0))

    def sum(self) -> "Tensor":
        """Sum of all elements as a scalar tensor."""
        return total(self)

    def mean(self) -> "Tensor":
        """Mean of all elements as a scalar tensor."""
        return mul(total(self), Tensor(1.0 / self.size))

    def reshape(self, *shape: int) -> "Tensor":
        """Reshape preserving row-major order."""
        return reshape(self, shape)


def _as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class TapeRecord:
    """One recorded operation."""

    name: str
    """Operation name, for diagnostics."""

    inputs: tuple[Tensor, ...]
    """Operands, in the order of the gradient rule's outputs."""

    output: Tensor
    """Produced tensor."""

    rule: GradRule
    """Maps the output adjoint to one adjoint per input (``None`` for inputs that need none)."""


_active_tape: ContextVar[Optional["Tape"]] = ContextVar("ensocast_active_tape", default=None)
_grad_enabled: ContextVar[bool] = ContextVar("ensocast_grad_enabled", default=True)


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager; nested tapes restore the outer tape on exit.
    """

    records: list[TapeRecord] = field(default_factory=list)
    """Operations in execution order."""

    _tokens: list[Any] = field(default_factory=list)

    def __enter__(self) -> Self:
        """Activate the tape for the current context."""
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, *exc: object) -> None:
        """Deactivate the tape."""
        _active_tape.reset(self._tokens.pop())

    def __len__(self) -> int:
        """Number of recorded operations."""
        return len(self.records)

    def leaves(self) -> list[Tensor]:
        """Tensors that require gradients but were not produced on this tape, in first-use order."""
        produced = {id(r.output) for r in self.records}
        seen: set[int] = set()
        res: list[Tensor] = []
        for rec in self.records:
            for t in rec.inputs:
                if t.requires_grad and id(t) not in produced and id(t) not in seen:
                    seen.add(id(t))
                    res.append(t)
        return res

    def reset(self) -> None:
        """Zero the gradient buffers of every tensor touched by the tape."""
        for rec in self.records:
            rec.output.zero_grad()
            for t in rec.inputs:
                t.zero_grad()


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording for the current context."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def _record(name: str, inputs: tuple[Tensor, ...], out_data: FloatArray, rule: GradRule) -> Tensor:
    tape = _active_tape.get()
    track = tape is not None and _grad_enabled.get() and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track and tape is not None:
        tape.records.append(TapeRecord(name=name, inputs=inputs, output=out, rule=rule))
        out._tape = tape
    return out


def _unbroadcast(grad: FloatArray, shape: tuple[int, ...]) -> FloatArray:
    """Sum a broadcast adjoint back to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError as err:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from err


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise ``a + b`` with broadcasting."""
    _check_broadcast(a, b, "add")
    return _record(
        "add", (a, b), a.data + b.data, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise ``a - b`` with broadcasting."""
    _check_broadcast(a, b, "sub")
    return _record(
        "sub", (a, b), a.data - b.data, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise ``a * b`` with broadcasting."""
    _check_broadcast(a, b, "mul")
    return _record(
        "mul",
        (a, b),
        a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def total(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    return _record("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Row-major reshape."""
    target = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(target)
    except ValueError as err:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {target}") from err
    return _record("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def square(a: Tensor) -> Tensor:
    """Elementwise square."""
    return _record("square", (a,), a.data * a.data, lambda g: (2.0 * a.data * g,))


def tanh_act(x: Tensor) -> Tensor:
    """Elementwise hyperbolic tangent; the backward rule multiplies by ``1 - y**2``.

    Examples:

    .. code-block:: python

    >>> float(tanh_act(Tensor(0.0)).item())
    0.0
    """
    y = np.tanh(x.data)
    return _record("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def _resolve_padding(padding: Padding) -> tuple[tuple[int, int], tuple[int, int]]:
    if isinstance(padding, int):
        return (padding, padding), (padding, padding)
    first, second = padding
    if isinstance(first, int) and isinstance(second, int):
        return (first, first), (second, second)
    return (int(first[0]), int(first[1])), (int(second[0]), int(second[1]))  # type: ignore[index]


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, padding: Padding = 0) -> Tensor:
    """Stride-1 cross-correlation with zero padding.

    Accepts a single field stack ``[C_in, H, W]`` or a batch ``[N, C_in, H, W]``.

    Args:
        x (Tensor): Input of shape ``[C_in, H, W]`` or ``[N, C_in, H, W]``.
        kernels (Tensor): Kernels of shape ``[C_out, C_in, kH, kW]``.
        bias (Tensor): Bias of shape ``[C_out]``.
        padding: Zero padding as a single count, ``(pad_h, pad_w)``, or ``((top, bottom), (left, right))``.

    Returns:
        Tensor: Output of shape ``[C_out, H', W']`` (batched: ``[N, C_out, H', W']``) with
        ``H' = H + top + bottom - kH + 1``.

    Raises:
        ShapeError: If ranks, channel counts, or extents disagree.
    """
    if x.ndim not in (3, 4) or kernels.ndim != 4 or bias.ndim != 1:
        raise ShapeError(f"conv2d: bad ranks input={x.shape} kernels={kernels.shape} bias={bias.shape}")
    batched = x.ndim == 4
    c_out, c_in, kh, kw = kernels.shape
    if x.shape[-3] != c_in:
        raise ShapeError(f"conv2d: input has {x.shape[-3]} channels, kernels expect {c_in}")
    if bias.shape[0] != c_out:
        raise ShapeError(f"conv2d: bias has {bias.shape[0]} entries, kernels produce {c_out}")
    (top, bottom), (left, right) = _resolve_padding(padding)
    if min(top, bottom, left, right) < 0:
        raise ShapeError(f"conv2d: negative padding {padding}")
    h, w = x.shape[-2:]
    hp, wp = h + top + bottom, w + left + right
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    lead = ((0, 0),) * (x.ndim - 2)
    xp = np.pad(x.data, lead + ((top, bottom), (left, right)))
    # windows: [..., C_in, H', W', kH, kW]
    windows = sliding_window_view(xp, (kh, kw), axis=(-2, -1))
    k = kernels.data
    if batched:
        out = np.einsum("nchwij,ocij->nohw", windows, k, optimize=True) + bias.data[None, :, None, None]
    else:
        out = np.tensordot(k, windows, axes=([1, 2, 3], [0, 3, 4])) + bias.data[:, None, None]

    def rule(g: FloatArray) -> tuple[FloatArray, FloatArray, FloatArray]:
        if batched:
            g_bias = g.sum(axis=(0, 2, 3))
            g_kernels = np.einsum("nohw,nchwij->ocij", g, windows, optimize=True)
        else:
            g_bias = g.sum(axis=(1, 2))
            g_kernels = np.tensordot(g, windows, axes=([1, 2], [1, 2]))
        gp = np.pad(g, lead + ((kh - 1, kh - 1), (kw - 1, kw - 1)))
        g_windows = sliding_window_view(gp, (kh, kw), axis=(-2, -1))
        flipped = k[:, :, ::-1, ::-1]
        if batched:
            g_xp = np.einsum("nohwij,ocij->nchw", g_windows, flipped, optimize=True)
        else:
            g_xp = np.tensordot(flipped, g_windows, axes=([0, 2, 3], [0, 3, 4]))
        g_x = g_xp[..., top : top + h, left : left + w]
        return np.ascontiguousarray(g_x), g_kernels, g_bias

    return _record("conv2d", (x, kernels, bias), out, rule)


def maxpool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling with ceil extents.

    Odd trailing rows/columns form partial windows. Ties route the gradient to the first cell in row-major order.

    Examples:

    .. code-block:: python

    >>> maxpool2(Tensor([[[1.0, 2.0], [3.0, 4.0]]])).data.tolist()
    [[[4.0]]]
    """
    if x.ndim not in (3, 4):
        raise ShapeError(f"maxpool2: expected [C,H,W] or [N,C,H,W], got {x.shape}")
    h, w = x.shape[-2:]
    h2, w2 = -(-h // 2), -(-w // 2)
    lead = ((0, 0),) * (x.ndim - 2)
    xp = np.pad(x.data, lead + ((0, 2 * h2 - h), (0, 2 * w2 - w)), constant_values=-np.inf)
    blocks = xp.reshape(*xp.shape[:-2], h2, 2, w2, 2)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*xp.shape[:-2], h2, w2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def rule(g: FloatArray) -> tuple[FloatArray]:
        onehot = np.zeros(blocks.shape)
        np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
        spread = onehot.reshape(*xp.shape[:-2], h2, w2, 2, 2)
        spread = np.moveaxis(spread, -2, -3).reshape(xp.shape)
        return (np.ascontiguousarray(spread[..., :h, :w]),)

    return _record("maxpool2", (x,), out, rule)


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``weights @ x + bias`` for ``x`` of shape ``[N]`` or a batch ``[B, N]``."""
    if weights.ndim != 2 or bias.ndim != 1 or x.ndim not in (1, 2):
        raise ShapeError(f"dense: bad ranks input={x.shape} weights={weights.shape} bias={bias.shape}")
    m, n = weights.shape
    if x.shape[-1] != n or bias.shape[0] != m:
        raise ShapeError(f"dense: input {x.shape}, weights {weights.shape}, bias {bias.shape} disagree")
    wd = weights.data
    out = x.data @ wd.T + bias.data

    def rule(g: FloatArray) -> tuple[FloatArray, FloatArray, FloatArray]:
        if x.ndim == 1:
            return wd.T @ g, np.outer(g, x.data), g.copy()
        return g @ wd, g.T @ x.data, g.sum(axis=0)

    return _record("dense", (x, weights, bias), out, rule)


def _propagate(output: Tensor) -> dict[int, FloatArray]:
    """Replay the output's tape in reverse; returns adjoints keyed by tensor id."""
    if output.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    tape = output._tape
    if tape is None or not tape.records:
        raise EmptyResultError("backward needs an output recorded on a non-empty tape")
    adjoints: dict[int, FloatArray] = {id(output): np.ones(output.shape)}
    for rec in reversed(tape.records):
        g = adjoints.get(id(rec.output))
        if g is None:
            continue
        for tensor, contrib in zip(rec.inputs, rec.rule(g)):
            if contrib is None or not tensor.requires_grad:
                continue
            prev = adjoints.get(id(tensor))
            adjoints[id(tensor)] = contrib if prev is None else prev + contrib
    return adjoints


def backward(output: Tensor) -> None:
    """Accumulate ``d output / d t`` into ``t.grad`` for every gradient-tracking tensor on the output's tape.

    Repeated calls accumulate; use :meth:`Tape.reset` or :meth:`Tensor.zero_grad` to clear.

    Raises:
        ShapeError: If ``output`` is not a scalar.
        EmptyResultError: If ``output`` was not recorded on a tape, or the tape is empty.
    """
    adjoints = _propagate(output)
    tape = cast(Tape, output._tape)
    touched = [output] + [t for rec in tape.records for t in (*rec.inputs, rec.output)]
    done: set[int] = set()
    for tensor in touched:
        key = id(tensor)
        if key in done or not tensor.requires_grad:
            continue
        done.add(key)
        adj = adjoints.get(key)
        contrib = np.zeros(tensor.shape) if adj is None else adj
        tensor.grad = contrib.copy() if tensor.grad is None else tensor.grad + contrib


def grad(output: Tensor, wrt: Sequence[Tensor]) -> list[FloatArray]:
    """Gradients of a scalar output with respect to ``wrt`` without touching any ``grad`` buffer.

    This is the form used by attribution, where several contexts read the same model concurrently.
    """
    adjoints = _propagate(output)
    return [adjoints[id(t)].copy() if id(t) in adjoints else np.zeros(t.shape) for t in wrt]


def finite_diff_check(
    fn: Callable[[Tensor], Tensor],
    point: Union[Tensor, FloatArray, Sequence[float]],
    step: float = 1e-6,
) -> float:
    """Largest relative gap between the autodiff gradient and central finite differences.

    For each coordinate ``k`` the discrepancy is ``|analytic - numeric| / (|analytic| + 1e-12)``.

    Args:
        fn: Scalar-valued function of one tensor, built from the operations of this module.
        point: Evaluation point.
        step: Central-difference step, must be positive.

    Returns:
        float: The maximum discrepancy over all coordinates.

    Examples:

    .. code-block:: python

    >>> finite_diff_check(lambda t: (t * Tensor([3.0, -2.0])).sum(), [1.0, 2.0], step=0.5)
    0.0
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base, requires_grad=True)
    with Tape():
        out = fn(x)
    (analytic,) = grad(out, [x])
    flat = base.reshape(-1)
    worst = 0.0
    with no_grad():
        for k in range(flat.size):
            plus, minus = flat.copy(), flat.copy()
            plus[k] += step
            minus[k] -= step
            f_plus = fn(Tensor(plus.reshape(base.shape))).item()
            f_minus = fn(Tensor(minus.reshape(base.shape))).item()
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic.reshape(-1)[k])
            worst = max(worst, abs(a - numeric) / (abs(a) + FD_EPSILON))
    if not np.isfinite(worst):
        raise NumericError(f"finite_diff_check produced a non-finite discrepancy at {prod(base.shape)} points")
    return worst


__all__ = [
    "Tape",
    "TapeRecord",
    "Tensor",
    "add",
    "backward",
    "conv2d",
    "dense",
    "finite_diff_check",
    "grad",
    "maxpool2",
    "mul",
    "no_grad",
    "reshape",
    "square",
    "sub",
    "tanh_act",
    "total",
]
