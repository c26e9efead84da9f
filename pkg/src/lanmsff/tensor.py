"""
Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array. Every differentiable operation goes through
``record``: it runs a forward function on the raw arrays and, when any input
requires a gradient, appends a ``GraphNode`` to the active ``Tape``. Recording
order is a valid forward order, so ``backward`` simply walks the tape in
reverse and accumulates input gradients additively.

Each thread owns a stack of tapes whose bottom entry is a default tape, so the
short form works without any setup:

    ```python
    w = Tensor([1.0, 2.0], requires_grad=True, name="w")
    loss = (w * Tensor([3.0, 4.0])).sum()
    grads = backward(loss)          # {"w": array([3., 4.])}
    ```

Library code that runs many forward passes opens its own ``Tape`` (training)
or disables recording with ``no_grad`` (inference) so the default tape does
not grow.
"""

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import (
    Any,
    Callable,
    Dict,
    Iterator,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from .exceptions import EmptyTapeError, NonScalarLossError, ShapeMismatchError

logger = logging.getLogger(__name__)

Context = Dict[str, Any]
ForwardFn = Callable[..., Tuple[np.ndarray, Context]]
BackwardFn = Callable[[np.ndarray, Context], Sequence[Optional[np.ndarray]]]
Operand = Union["Tensor", np.ndarray, float, int]


class Tensor:
    """
    N-dimensional array with an optional gradient slot.

    Image tensors use (N, C, H, W) order. Data is stored row-major; the only
    in-place mutations allowed are on leaves (optimizer updates, finite
    difference checks) and on ``grad``.

    Attributes:
        data: The values, a floating-point numpy array.
        requires_grad: Whether backward should populate ``grad``.
        grad: Accumulated gradient, same shape as ``data``, or None.
        name: Parameter path for leaves (e.g. ``block2.massatt.Z0``).
        node: The GraphNode that produced this tensor, None for leaves.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "node")

    def __init__(
        self,
        data: Union[np.ndarray, float, int, Sequence[Any]],
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype: Optional[Union[str, np.dtype]] = None,
    ):
        array = np.asarray(data, dtype=dtype)
        if array.dtype.kind != "f":
            array = array.astype(np.float64)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.node: Optional["GraphNode"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeMismatchError("item", f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def accumulate_grad(self, grad: np.ndarray) -> None:
        """Add ``grad`` into the gradient slot (in place once allocated)."""
        if grad.shape != self.data.shape:
            raise ShapeMismatchError(
                "accumulate_grad",
                f"gradient extents {grad.shape} do not match tensor {self.data.shape}",
            )
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # arithmetic sugar over the recorded ops below
    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Operand) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None) -> "Tensor":
        return tensor_sum(self, axis)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None) -> "Tensor":
        return tensor_mean(self, axis)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)


@dataclass
class Parameter:
    """
    A named, optionally trainable model weight.

    The parameter count of a model is the sum of ``count`` over its
    parameters; names are unique within a model.
    """

    value: Tensor
    name: str
    trainable: bool = True

    def __post_init__(self) -> None:
        self.value.name = self.name
        self.value.requires_grad = self.trainable

    @property
    def count(self) -> int:
        return self.value.size

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape


@dataclass
class GraphNode:
    """One recorded operation: enough to run its backward rule later."""

    op_id: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward_fn: BackwardFn
    saved_context: Context = field(default_factory=dict)


class Tape:
    """
    Ordered record of the operations of one forward pass.

    Used as a context manager it becomes the active tape of the current
    thread until the block exits. ``backward`` frees it.
    """

    def __init__(self) -> None:
        self.nodes: List[GraphNode] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def append(self, node: GraphNode) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def kink_signature(self) -> bytes:
        """
        Concatenated branch decisions of every non-differentiable op.

        ReLU masks, pooling argmaxes and PWFS orderings are stored under the
        ``kink`` key of their node context. Two evaluations with equal
        signatures lie on the same smooth piece of the function.
        """
        parts = []
        for node in self.nodes:
            kink = node.saved_context.get("kink")
            if kink is not None:
                parts.append(node.op_id.encode())
                parts.append(np.ascontiguousarray(kink).tobytes())
        return b"".join(parts)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc_info: Any) -> None:
        _tape_stack().pop()


_local = threading.local()


def _tape_stack() -> List[Optional[Tape]]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = [Tape()]
        _local.stack = stack
    return stack


def active_tape() -> Optional[Tape]:
    """The tape new nodes go to, or None inside ``no_grad``."""
    return _tape_stack()[-1]


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording for the enclosed block (inference)."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def record(
    op_id: str,
    inputs: Sequence[Tensor],
    forward_fn: ForwardFn,
    backward_fn: BackwardFn,
) -> Tensor:
    """
    Run ``forward_fn`` on the input arrays and record it for backward.

    ``forward_fn(*arrays)`` returns ``(result, context)``;
    ``backward_fn(grad_output, context)`` returns one gradient (or None) per
    input. A node is appended only when some input requires a gradient and
    a tape is active.

    Raises:
        ShapeMismatchError: the forward function could not combine the
            input extents.
    """
    arrays = [t.data for t in inputs]
    try:
        out, context = forward_fn(*arrays)
    except ShapeMismatchError:
        raise
    except ValueError as exc:
        extents = ", ".join(str(a.shape) for a in arrays)
        raise ShapeMismatchError(op_id, f"cannot combine extents {extents} ({exc})") from exc

    result = Tensor(out)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        node = GraphNode(op_id, tuple(inputs), result, backward_fn, context)
        result.node = node
        tape.append(node)
    return result


def backward(loss: Tensor, tape: Optional[Tape] = None) -> Dict[str, np.ndarray]:
    """
    Propagate d(loss)/d(x) to every recorded tensor reachable from ``loss``.

    Gradients accumulate additively across fan-out and across calls; callers
    zero leaf gradients between optimizer steps. The tape is cleared
    afterwards.

    Returns:
        Mapping from leaf name to its accumulated gradient, for every named
        leaf that took part in the recorded graph.

    Raises:
        NonScalarLossError: ``loss`` has more than one element.
        EmptyTapeError: nothing was recorded for ``loss``.
    """
    if loss.size != 1:
        raise NonScalarLossError(f"loss must be a scalar, got shape {loss.shape}")
    tape = tape if tape is not None else active_tape()
    if tape is None or len(tape) == 0 or loss.node is None:
        raise EmptyTapeError("backward called but no operations were recorded for the loss")

    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        grad_output = node.output.grad
        if grad_output is None:
            continue
        input_grads = node.backward_fn(grad_output, node.saved_context)
        for tensor, grad in zip(node.inputs, input_grads):
            if grad is None or not tensor.requires_grad:
                continue
            tensor.accumulate_grad(np.asarray(grad, dtype=tensor.data.dtype))

    named: Dict[str, np.ndarray] = {}
    for node in tape.nodes:
        for tensor in node.inputs:
            if tensor.node is None and tensor.name and tensor.grad is not None:
                named[tensor.name] = tensor.grad
    tape.clear()
    return named


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------


@dataclass
class GradientReport:
    """
    Outcome of a finite-difference comparison.

    Attributes:
        max_rel_err: Largest |a - n| / max(|a|, |n|, 1e-8) over checked coordinates.
        passed: ``max_rel_err < tol``.
        checked: Number of coordinates compared.
        excluded: (input index, flat index) pairs skipped because a kink
            (ReLU, max, PWFS ordering) changes branch within the step margin.
        worst: Coordinate with the largest error, if any was checked.
    """

    max_rel_err: float
    passed: bool
    checked: int
    excluded: List[Tuple[int, int]]
    worst: Optional[Tuple[int, int]] = None


def _evaluate(fn: Callable[..., Tensor], inputs: Sequence[Tensor]) -> Tuple[float, bytes]:
    with Tape() as tape:
        out = fn(*inputs)
        signature = tape.kink_signature()
    if out.size != 1:
        raise NonScalarLossError(f"checked function must return a scalar, got {out.shape}")
    return float(out.data.reshape(-1)[0]), signature


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: Optional[int] = None,
    kink_margin: float = 10.0,
    seed: int = 0,
) -> GradientReport:
    """
    Compare analytic gradients with central differences.

    For every coordinate x of every input, the numeric derivative is
    (f(x+h) - f(x-h)) / 2h. A coordinate is excluded when the kink signature
    at x±h or x±(kink_margin·h) differs from the one at x, i.e. the stencil
    straddles a non-differentiable point.

    Args:
        fn: Maps the input tensors to a scalar tensor.
        inputs: Leaf tensors; their data is perturbed in place and restored.
        h: Finite-difference step, must be positive.
        tol: Pass threshold on the maximum relative error.
        max_coords: Check at most this many (seeded random) coordinates per input.
        kink_margin: Multiple of h used for the exclusion test; 0 disables it.
        seed: Seed for coordinate sampling.
    """
    if h <= 0:
        raise ValueError("h must be positive")

    for tensor in inputs:
        tensor.data = np.ascontiguousarray(tensor.data)
        tensor.requires_grad = True
        tensor.grad = None

    with Tape() as tape:
        out = fn(*inputs)
        base_signature = tape.kink_signature()
        backward(out, tape)
    analytic = [
        np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs
    ]

    rng = np.random.default_rng(seed)
    max_err = 0.0
    worst: Optional[Tuple[int, int]] = None
    excluded: List[Tuple[int, int]] = []
    checked = 0
    for i, tensor in enumerate(inputs):
        coords = np.arange(tensor.size)
        if max_coords is not None and tensor.size > max_coords:
            coords = np.sort(rng.choice(tensor.size, size=max_coords, replace=False))
        flat = tensor.data.reshape(-1)
        for j in coords:
            original = flat[j]
            flat[j] = original + h
            f_plus, sig_plus = _evaluate(fn, inputs)
            flat[j] = original - h
            f_minus, sig_minus = _evaluate(fn, inputs)
            near_kink = sig_plus != base_signature or sig_minus != base_signature
            if not near_kink and kink_margin > 0:
                flat[j] = original + kink_margin * h
                _, sig_far_plus = _evaluate(fn, inputs)
                flat[j] = original - kink_margin * h
                _, sig_far_minus = _evaluate(fn, inputs)
                near_kink = sig_far_plus != base_signature or sig_far_minus != base_signature
            flat[j] = original
            if near_kink:
                excluded.append((i, int(j)))
                continue
            numeric = (f_plus - f_minus) / (2.0 * h)
            exact = float(analytic[i].reshape(-1)[j])
            err = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
            checked += 1
            if err > max_err or worst is None:
                max_err = max(max_err, err)
                worst = (i, int(j))

    if excluded:
        logger.debug("gradient check excluded %d coordinates near kinks", len(excluded))
    return GradientReport(
        max_rel_err=max_err,
        passed=max_err < tol,
        checked=checked,
        excluded=excluded,
        worst=worst,
    )


# --------------------------------------------------------------------------
# Elementwise arithmetic and reductions
# --------------------------------------------------------------------------


def as_tensor(value: Operand, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting expanded to reach it."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op_id: str, a: np.ndarray, b: np.ndarray) -> Tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError:
        raise ShapeMismatchError(op_id, f"extents {a.shape} and {b.shape} do not broadcast")


def add(a: Operand, b: Operand) -> Tensor:
    ta = as_tensor(a, b if isinstance(b, Tensor) else None)
    tb = as_tensor(b, ta)

    def forward(x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, Context]:
        _broadcast_shape("add", x, y)
        return x + y, {"shapes": (x.shape, y.shape)}

    def backward_fn(g: np.ndarray, ctx: Context) -> Tuple[np.ndarray, np.ndarray]:
        sx, sy = ctx["shapes"]
        return unbroadcast(g, sx), unbroadcast(g, sy)

    return record("add", [ta, tb], forward, backward_fn)


def sub(a: Operand, b: Operand) -> Tensor:
    ta = as_tensor(a, b if isinstance(b, Tensor) else None)
    tb = as_tensor(b, ta)

    def forward(x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, Context]:
        _broadcast_shape("sub", x, y)
        return x - y, {"shapes": (x.shape, y.shape)}

    def backward_fn(g: np.ndarray, ctx: Context) -> Tuple[np.ndarray, np.ndarray]:
        sx, sy = ctx["shapes"]
        return unbroadcast(g, sx), unbroadcast(-g, sy)

    return record("sub", [ta, tb], forward, backward_fn)


def mul(a: Operand, b: Operand) -> Tensor:
    ta = as_tensor(a, b if isinstance(b, Tensor) else None)
    tb = as_tensor(b, ta)

    def forward(x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, Context]:
        _broadcast_shape("mul", x, y)
        return x * y, {"x": x, "y": y}

    def backward_fn(g: np.ndarray, ctx: Context) -> Tuple[np.ndarray, np.ndarray]:
        x, y = ctx["x"], ctx["y"]
        return unbroadcast(g * y, x.shape), unbroadcast(g * x, y.shape)

    return record("mul", [ta, tb], forward, backward_fn)


def div(a: Operand, b: Operand) -> Tensor:
    ta = as_tensor(a, b if isinstance(b, Tensor) else None)
    tb = as_tensor(b, ta)

    def forward(x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, Context]:
        _broadcast_shape("div", x, y)
        return x / y, {"x": x, "y": y}

    def backward_fn(g: np.ndarray, ctx: Context) -> Tuple[np.ndarray, np.ndarray]:
        x, y = ctx["x"], ctx["y"]
        return unbroadcast(g / y, x.shape), unbroadcast(-g * x / (y * y), y.shape)

    return record("div", [ta, tb], forward, backward_fn)


def _normalize_axes(axis: Optional[Union[int, Tuple[int, ...]]], ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def tensor_sum(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)

    def forward(a: np.ndarray) -> Tuple[np.ndarray, Context]:
        return np.sum(a, axis=axes), {"shape": a.shape}

    def backward_fn(g: np.ndarray, ctx: Context) -> Tuple[np.ndarray]:
        shape = ctx["shape"]
        kept = tuple(1 if i in axes else s for i, s in enumerate(shape))
        return (np.broadcast_to(g.reshape(kept), shape).copy(),)

    return record("sum", [x], forward, backward_fn)


def tensor_mean(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1

    def forward(a: np.ndarray) -> Tuple[np.ndarray, Context]:
        return np.sum(a, axis=axes) / count, {"shape": a.shape}

    def backward_fn(g: np.ndarray, ctx: Context) -> Tuple[np.ndarray]:
        shape = ctx["shape"]
        kept = tuple(1 if i in axes else s for i, s in enumerate(shape))
        return (np.broadcast_to(g.reshape(kept) / count, shape).copy(),)

    return record("mean", [x], forward, backward_fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    target = tuple(shape[0]) if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else tuple(shape)

    def forward(a: np.ndarray) -> Tuple[np.ndarray, Context]:
        return a.reshape(target), {"shape": a.shape}

    def backward_fn(g: np.ndarray, ctx: Context) -> Tuple[np.ndarray]:
        return (g.reshape(ctx["shape"]),)

    return record("reshape", [x], forward, backward_fn)
