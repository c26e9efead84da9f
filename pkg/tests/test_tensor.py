"""
Tests for the tape-based autodiff engine.
"""
import threading

import numpy as np
import pytest

from ..src.lanmsff.exceptions import EmptyTapeError, NonScalarLossError, ShapeMismatchError
from ..src.lanmsff.layers import relu
from ..src.lanmsff.tensor import (
    Parameter,
    Tape,
    Tensor,
    active_tape,
    backward,
    check_gradients,
    div,
    no_grad,
    unbroadcast,
)


class TestBackward:
    def test_scalar_expression(self):
        """d/dx of x*y + x at x=3, y=4."""
        x = Tensor(3.0, requires_grad=True, name="x")
        y = Tensor(4.0, requires_grad=True, name="y")
        with Tape() as tape:
            z = x * y + x
            grads = backward(z, tape)

        assert grads["x"] == pytest.approx(5.0)
        assert grads["y"] == pytest.approx(3.0)

    def test_fan_out_accumulates(self):
        """A tensor used twice receives the sum of both gradients."""
        w = Tensor([1.0, 2.0], requires_grad=True, name="w")
        with Tape() as tape:
            loss = (w * w).sum() + w.sum()
            backward(loss, tape)

        np.testing.assert_allclose(w.grad, 2 * w.data + 1)

    def test_gradients_accumulate_across_calls(self):
        w = Tensor([1.0, -1.0], requires_grad=True, name="w")
        for _ in range(2):
            with Tape() as tape:
                backward((w * 3.0).sum(), tape)

        np.testing.assert_allclose(w.grad, [6.0, 6.0])

    def test_broadcast_gradient_is_reduced(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True, name="x")
        b = Tensor(np.ones((1, 3)), requires_grad=True, name="b")
        with Tape() as tape:
            grads = backward((x + b).sum(), tape)

        assert grads["b"].shape == (1, 3)
        np.testing.assert_allclose(grads["b"], [[2.0, 2.0, 2.0]])

    def test_division_and_mean(self):
        x = Tensor([2.0, 4.0], requires_grad=True, name="x")
        with Tape() as tape:
            grads = backward(div(1.0, x).mean(), tape)

        np.testing.assert_allclose(grads["x"], [-0.5 / 4.0, -0.5 / 16.0])

    def test_tape_is_cleared(self):
        x = Tensor(1.0, requires_grad=True)
        with Tape() as tape:
            backward(x * 2.0, tape)
            assert len(tape) == 0

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            with pytest.raises(NonScalarLossError):
                backward(x * 2.0, tape)

    def test_unrecorded_loss_rejected(self):
        with Tape() as tape:
            with pytest.raises(EmptyTapeError):
                backward(Tensor(1.0), tape)

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            with no_grad():
                assert active_tape() is None
                y = x * 2.0
            assert len(tape) == 0
        assert y.node is None

    def test_tapes_are_thread_local(self):
        seen = []

        def worker():
            seen.append(active_tape())

        with Tape() as tape:
            thread = threading.Thread(target=worker)
            thread.start()
            thread.join()
        assert seen[0] is not tape


class TestShapes:
    def test_incompatible_extents_raise(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones((4,)))
        with pytest.raises(ShapeMismatchError) as info:
            a + b
        assert info.value.op_id == "add"

    def test_item_requires_scalar(self):
        with pytest.raises(ShapeMismatchError):
            Tensor([1.0, 2.0]).item()

    def test_unbroadcast_leading_axes(self):
        grad = np.ones((4, 2, 3))
        np.testing.assert_allclose(unbroadcast(grad, (3,)), np.full(3, 8.0))


class TestParameter:
    def test_parameter_names_and_flags_its_tensor(self):
        param = Parameter(Tensor(np.zeros((3, 2))), "block1.conv1.weight")

        assert param.value.name == "block1.conv1.weight"
        assert param.value.requires_grad
        assert param.count == 6

    def test_frozen_parameter_gets_no_gradient(self):
        frozen = Parameter(Tensor([1.0, 2.0]), "frozen", trainable=False)
        live = Tensor([1.0, 1.0], requires_grad=True, name="live")
        with Tape() as tape:
            grads = backward((frozen.value * live).sum(), tape)

        assert "frozen" not in grads
        assert frozen.value.grad is None


class TestGradientCheck:
    def test_smooth_function_passes(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        w = Tensor(np.random.default_rng(1).normal(size=(3, 4)))

        report = check_gradients(lambda a, b: (a * b * a / (b * b + 1.0)).sum(), [x, w])

        assert report.passed
        assert report.checked == 24
        assert report.excluded == []

    def test_wrong_backward_is_caught(self):
        from ..src.lanmsff.tensor import record

        def bad_square(t):
            return record("bad", [t], lambda a: (a * a, {"a": a}), lambda g, ctx: (g * ctx["a"],))

        report = check_gradients(lambda t: bad_square(t).sum(), [Tensor([1.0, 2.0, 3.0])])

        assert not report.passed
        assert report.max_rel_err == pytest.approx(0.5)

    def test_relu_kink_is_excluded(self):
        x = Tensor([1e-7, 0.5, -0.5])

        report = check_gradients(lambda t: relu(t).sum(), [x], h=1e-6)

        assert (0, 0) in report.excluded
        assert report.passed

    def test_max_coords_limits_checked_coordinates(self):
        x = Tensor(np.linspace(0.1, 1.0, 50))

        report = check_gradients(lambda t: (t * t).sum(), [x], max_coords=5)

        assert report.checked == 5

    def test_inputs_are_restored(self):
        data = np.array([0.3, -0.7])
        x = Tensor(data.copy())
        check_gradients(lambda t: (t * t * t).sum(), [x])

        np.testing.assert_array_equal(x.data, data)

    def test_step_must_be_positive(self):
        with pytest.raises(ValueError):
            check_gradients(lambda t: t.sum(), [Tensor([1.0])], h=0.0)
