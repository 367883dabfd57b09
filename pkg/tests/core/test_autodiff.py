"""Tests for autodiff module."""

from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from ensocast.core.autodiff import (
    Tape,
    Tensor,
    backward,
    conv2d,
    dense,
    finite_diff_check,
    grad,
    maxpool2,
    no_grad,
    square,
    tanh_act,
)
from ensocast.core.exceptions import EmptyResultError, ShapeError
from ensocast.core.model import ModelConfig, build


def _conv_reference(x: np.ndarray, k: np.ndarray, b: np.ndarray, top: int, left: int, bottom: int, right: int):
    xp = np.pad(x, ((0, 0), (top, bottom), (left, right)))
    c_out, _, kh, kw = k.shape
    h, w = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    out = np.zeros((c_out, h, w))
    for o in range(c_out):
        for i in range(h):
            for j in range(w):
                out[o, i, j] = np.sum(xp[:, i : i + kh, j : j + kw] * k[o]) + b[o]
    return out


class TestTensor:
    """Test Tensor basics."""

    def test_data_is_read_only(self) -> None:
        """Test that tensor data cannot be written."""
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0

    def test_item_needs_single_element(self) -> None:
        """Test item on scalar and vector tensors."""
        assert Tensor([[4.0]]).item() == 4.0
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0]).item()

    def test_operators(self) -> None:
        """Test arithmetic operators with broadcasting."""
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = (a * 2.0 + 1.0 - Tensor([1.0, 0.0])).data
        np.testing.assert_array_equal(out, [[2.0, 5.0], [6.0, 9.0]])
        assert (-a).data[1, 1] == -4.0
        assert a.mean().item() == 2.5

    def test_bad_broadcast(self) -> None:
        """Test that incompatible shapes raise ShapeError."""
        with pytest.raises(ShapeError, match="do not broadcast"):
            Tensor(np.zeros(3)) + Tensor(np.zeros(4))


class TestTape:
    """Test recording and backward."""

    def test_backward_product(self) -> None:
        """Test the gradient of a product."""
        x = Tensor([2.0, -1.0], requires_grad=True)
        y = Tensor([3.0, 5.0], requires_grad=True)
        with Tape():
            out = (x * y).sum()
        backward(out)
        np.testing.assert_array_equal(x.grad, [3.0, 5.0])
        np.testing.assert_array_equal(y.grad, [2.0, -1.0])

    def test_backward_accumulates(self) -> None:
        """Test that repeated backward calls accumulate until reset."""
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            out = square(x).sum()
        backward(out)
        backward(out)
        np.testing.assert_array_equal(x.grad, [4.0])
        tape.reset()
        np.testing.assert_array_equal(x.grad, [0.0])

    def test_broadcast_gradient_is_summed(self) -> None:
        """Test the adjoint of a broadcast operand."""
        x = Tensor(np.ones((3, 2)), requires_grad=True)
        b = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            out = (x + b).sum()
        (gb,) = grad(out, [b])
        np.testing.assert_array_equal(gb, [3.0, 3.0])

    def test_grad_leaves_buffers_alone(self) -> None:
        """Test that grad() does not write grad buffers."""
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            out = square(x).sum()
        (gx,) = grad(out, [x])
        np.testing.assert_array_equal(gx, [2.0, 4.0])
        assert x.grad is None

    def test_unused_input_gets_zero(self) -> None:
        """Test that a tensor off the path gets a zero gradient."""
        x = Tensor([1.0], requires_grad=True)
        other = Tensor([1.0, 1.0], requires_grad=True)
        with Tape():
            out = square(x).sum()
        _, g_other = grad(out, [x, other])
        np.testing.assert_array_equal(g_other, [0.0, 0.0])

    def test_no_grad_and_untaped(self) -> None:
        """Test that nothing is recorded outside a tape or under no_grad."""
        x = Tensor([1.0], requires_grad=True)
        assert not (x * 2.0).requires_grad
        with Tape() as tape, no_grad():
            out = x * 2.0
        assert not out.requires_grad
        assert len(tape) == 0

    def test_backward_needs_scalar_on_tape(self) -> None:
        """Test backward preconditions."""
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            vec = x * 2.0
        with pytest.raises(ShapeError, match="scalar"):
            backward(vec)
        with pytest.raises(EmptyResultError, match="tape"):
            backward(Tensor(1.0))

    def test_empty_tape_is_an_empty_result(self) -> None:
        """Test that differentiating an untracked output is an empty result, also through grad."""
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape, no_grad():
            out = (x * 2.0).sum()
        assert len(tape) == 0
        with pytest.raises(EmptyResultError):
            backward(out)
        with pytest.raises(EmptyResultError):
            grad(out, [x])

    def test_leaves(self) -> None:
        """Test leaf discovery in first-use order."""
        a = Tensor([1.0], requires_grad=True)
        b = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            (b * a + a).sum()
        assert tape.leaves() == [b, a]

    def test_threads_hold_their_own_tapes(self) -> None:
        """Test that concurrent tapes do not mix records."""
        w = Tensor(np.arange(4.0), requires_grad=True)

        def run(scale: float) -> np.ndarray:
            with Tape():
                out = (w * scale).sum()
            return grad(out, [w])[0]

        with ThreadPoolExecutor(4) as pool:
            results = list(pool.map(run, [1.0, 2.0, 3.0, 4.0] * 4))
        for scale, g in zip([1.0, 2.0, 3.0, 4.0] * 4, results):
            np.testing.assert_array_equal(g, np.full(4, scale))


class TestOperations:
    """Test the forward values and gradients of each operation."""

    def test_tanh_derivative(self) -> None:
        """Test that the tanh gradient is 1 - tanh^2."""
        values = np.array([-2.0, 0.0, 0.5])
        x = Tensor(values, requires_grad=True)
        with Tape():
            out = tanh_act(x).sum()
        (g,) = grad(out, [x])
        np.testing.assert_allclose(g, 1.0 - np.tanh(values) ** 2)

    @pytest.mark.parametrize(
        ("padding", "pads"),
        [
            (0, (0, 0, 0, 0)),
            (1, (1, 1, 1, 1)),
            ((1, 2), (1, 2, 1, 2)),
            (((1, 2), (3, 4)), (1, 3, 2, 4)),
        ],
    )
    def test_conv2d_forward(self, padding: object, pads: tuple[int, int, int, int]) -> None:
        """Test conv2d against a direct loop."""
        rng = np.random.default_rng(0)
        x, k, b = rng.standard_normal((2, 5, 7)), rng.standard_normal((3, 2, 2, 4)), rng.standard_normal(3)
        out = conv2d(Tensor(x), Tensor(k), Tensor(b), padding)  # type: ignore[arg-type]
        top, left, bottom, right = pads
        np.testing.assert_allclose(out.data, _conv_reference(x, k, b, top, left, bottom, right))

    def test_conv2d_batched_matches_single(self) -> None:
        """Test that a batch gives the per-sample outputs."""
        rng = np.random.default_rng(1)
        x, k, b = rng.standard_normal((3, 2, 6, 6)), rng.standard_normal((2, 2, 3, 3)), rng.standard_normal(2)
        batched = conv2d(Tensor(x), Tensor(k), Tensor(b), 1).data
        for n in range(3):
            np.testing.assert_allclose(batched[n], conv2d(Tensor(x[n]), Tensor(k), Tensor(b), 1).data)

    def test_conv2d_shape_errors(self) -> None:
        """Test conv2d validation."""
        k, b = Tensor(np.zeros((2, 3, 2, 2))), Tensor(np.zeros(2))
        with pytest.raises(ShapeError, match="channels"):
            conv2d(Tensor(np.zeros((2, 4, 4))), k, b)
        with pytest.raises(ShapeError, match="bias"):
            conv2d(Tensor(np.zeros((3, 4, 4))), k, Tensor(np.zeros(3)))
        with pytest.raises(ShapeError, match="larger"):
            conv2d(Tensor(np.zeros((3, 1, 1))), k, b)

    def test_conv2d_gradients(self) -> None:
        """Test conv2d gradients against finite differences for every operand."""
        rng = np.random.default_rng(2)
        x, k, b = rng.standard_normal((2, 5, 6)), rng.standard_normal((2, 2, 2, 3)), rng.standard_normal(2)
        w = rng.standard_normal((2, 5, 6))
        pad = ((0, 1), (1, 1))
        assert finite_diff_check(lambda t: (conv2d(t, Tensor(k), Tensor(b), pad) * w).sum(), x) < 1e-5
        assert finite_diff_check(lambda t: (conv2d(Tensor(x), t, Tensor(b), pad) * w).sum(), k) < 1e-5
        assert finite_diff_check(lambda t: (conv2d(Tensor(x), Tensor(k), t, pad) * w).sum(), b) < 1e-5

    def test_maxpool_ceil_extents(self) -> None:
        """Test that odd extents keep a partial window."""
        x = Tensor(np.arange(15.0).reshape(1, 3, 5))
        out = maxpool2(x)
        assert out.shape == (1, 2, 3)
        np.testing.assert_array_equal(out.data[0], [[6.0, 8.0, 9.0], [11.0, 13.0, 14.0]])

    def test_maxpool_routes_gradient_to_max(self) -> None:
        """Test that the gradient reaches only window maxima."""
        values = np.array([[[1.0, 5.0, 2.0], [3.0, 0.0, 7.0]]])
        x = Tensor(values, requires_grad=True)
        with Tape():
            out = maxpool2(x).sum()
        (g,) = grad(out, [x])
        np.testing.assert_array_equal(g, [[[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]])

    def test_maxpool_ties_route_to_first_cell(self) -> None:
        """Test that equal window entries send the gradient to the first in row-major order."""
        values = np.array([[[2.0, 2.0, 1.0], [2.0, 2.0, 1.0], [0.0, 3.0, 3.0]]])
        x = Tensor(values, requires_grad=True)
        with Tape():
            out = maxpool2(x).sum()
        (g,) = grad(out, [x])
        np.testing.assert_array_equal(g, [[[1.0, 0.0, 1.0], [0.0, 0.0, 0.0], [0.0, 1.0, 1.0]]])
        batched = Tensor(np.ones((2, 1, 2, 2)), requires_grad=True)
        with Tape():
            total = maxpool2(batched).sum()
        (g,) = grad(total, [batched])
        np.testing.assert_array_equal(g, np.tile([[[[1.0, 0.0], [0.0, 0.0]]]], (2, 1, 1, 1)))

    def test_dense_single_and_batched(self) -> None:
        """Test dense values and gradients."""
        rng = np.random.default_rng(3)
        w, b = rng.standard_normal((3, 4)), rng.standard_normal(3)
        x = rng.standard_normal((5, 4))
        np.testing.assert_allclose(dense(Tensor(x[0]), Tensor(w), Tensor(b)).data, w @ x[0] + b)
        np.testing.assert_allclose(dense(Tensor(x), Tensor(w), Tensor(b)).data, x @ w.T + b)
        assert finite_diff_check(lambda t: square(dense(Tensor(x), t, Tensor(b))).sum(), w) < 1e-5
        assert finite_diff_check(lambda t: square(dense(t, Tensor(w), Tensor(b))).sum(), x[0]) < 1e-5

    def test_dense_shape_error(self) -> None:
        """Test dense validation."""
        with pytest.raises(ShapeError):
            dense(Tensor(np.zeros(3)), Tensor(np.zeros((2, 4))), Tensor(np.zeros(2)))

    def test_composite_chain(self) -> None:
        """Test a conv, tanh, pool and dense chain against finite differences."""
        rng = np.random.default_rng(4)
        k, b = rng.standard_normal((2, 1, 2, 2)) * 0.5, rng.standard_normal(2) * 0.1
        w, c = rng.standard_normal((1, 2 * 2 * 3)) * 0.5, np.zeros(1)

        def fn(t: Tensor) -> Tensor:
            h = maxpool2(tanh_act(conv2d(t, Tensor(k), Tensor(b), ((0, 1), (0, 1)))))
            return dense(h.reshape(h.size), Tensor(w), Tensor(c)).sum()

        assert finite_diff_check(fn, rng.standard_normal((1, 4, 6))) < 1e-4


class TestFiniteDiffCheck:
    """Test finite_diff_check."""

    def test_exact_for_linear(self) -> None:
        """Test a linear function has no discrepancy."""
        assert finite_diff_check(lambda t: (t * Tensor([3.0, -2.0])).sum(), [1.0, 2.0], step=0.5) == 0.0

    def test_rejects_non_positive_step(self) -> None:
        """Test step validation."""
        with pytest.raises(ValueError, match="positive"):
            finite_diff_check(lambda t: t.sum(), [1.0], step=0.0)


class TestModelGradients:
    """Test end-to-end input gradients of randomly configured small models."""

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_finite_differences(self, seed: int) -> None:
        """Test one seeded architecture against central differences."""
        rng = np.random.default_rng(seed)
        config = ModelConfig(
            conv_filters=[int(v) for v in rng.integers(1, 4, size=3)],
            dense_neurons=int(rng.integers(2, 6)),
            kernel=(int(rng.integers(1, 4)), int(rng.integers(1, 4))),
            nlat=4,
            nlon=6,
            calibration_enabled=bool(seed % 2),
            seed=seed,
        )
        point = rng.standard_normal(config.input_shape)
        assert finite_diff_check(build(config).forward, point) < 1e-4
