"""
Convolutional and auxiliary layers.

Functional operations (``conv2d``, ``maxpool2x2``, ``batch_norm`` ...) take
and return ``Tensor`` objects and record themselves on the active tape. The
``Module`` classes at the bottom hold named ``Parameter`` objects and call the
functional operations; models are trees of modules.

Conventions:
    - Tensors are (N, C, H, W).
    - Convolution weights are (out, in/groups, kh, kw); transposed
      convolution weights are (out, in, kh, kw); dense weights are (out, in).
    - "same" padding is symmetric zero padding with the extra pixel on the
      bottom/right, output extent ceil(H / stride).
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy.special import expit
from scipy.special import softmax as _softmax

from .exceptions import ShapeMismatchError
from .tensor import Context, Parameter, Tensor, record, reshape, tensor_mean

logger = logging.getLogger(__name__)

Mode = Literal["train", "eval"]
Pair = Tuple[int, int]


class ConvSpec(BaseModel):
    """
    Hyperparameters of one convolution.

    Attributes:
        in_channels / out_channels: Channel counts, each divisible by ``groups``.
        kernel, stride, dilation: (h, w) pairs; a single int is expanded.
        groups: ``groups == in_channels`` is the depthwise case.
        padding: ``same`` or ``valid``.
        bias: Whether the convolution carries a per-output-channel bias.
    """

    model_config = ConfigDict(frozen=True)

    in_channels: int
    out_channels: int
    kernel: Pair = (3, 3)
    stride: Pair = (1, 1)
    dilation: Pair = (1, 1)
    groups: int = 1
    padding: Literal["same", "valid"] = "same"
    bias: bool = False

    @field_validator("kernel", "stride", "dilation", mode="before")
    @classmethod
    def _expand_pair(cls, value: Union[int, Sequence[int]]) -> Pair:
        if isinstance(value, int):
            return (value, value)
        return tuple(value)  # type: ignore[return-value]

    @model_validator(mode="after")
    def _check_divisibility(self) -> "ConvSpec":
        for label, value in (
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("groups", self.groups),
        ):
            if value <= 0:
                raise ValueError(f"{label} must be positive, got {value}")
        for label, pair in (("kernel", self.kernel), ("stride", self.stride), ("dilation", self.dilation)):
            if min(pair) <= 0:
                raise ValueError(f"{label} must be positive, got {pair}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )
        return self

    @property
    def effective_kernel(self) -> Pair:
        """Receptive extent k + (k - 1)(d - 1) per axis."""
        kh, kw = self.kernel
        dh, dw = self.dilation
        return (kh + (kh - 1) * (dh - 1), kw + (kw - 1) * (dw - 1))

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.in_channels and self.groups > 1

    def depthwise(self) -> "ConvSpec":
        """The per-channel spatial stage of a depthwise-separable convolution."""
        return ConvSpec(
            in_channels=self.in_channels,
            out_channels=self.in_channels,
            kernel=self.kernel,
            stride=self.stride,
            dilation=self.dilation,
            groups=self.in_channels,
            padding=self.padding,
            bias=False,
        )

    def pointwise(self) -> "ConvSpec":
        """The 1x1 cross-channel stage of a depthwise-separable convolution."""
        return ConvSpec(
            in_channels=self.in_channels,
            out_channels=self.out_channels,
            kernel=(1, 1),
            bias=self.bias,
        )


def same_padding(size: int, effective_kernel: int, stride: int) -> Tuple[int, int, int]:
    """(pad_before, pad_after, output_extent) for same padding along one axis."""
    out = -(-size // stride)
    total = max((out - 1) * stride + effective_kernel - size, 0)
    return total // 2, total - total // 2, out


def _conv_geometry(spec: ConvSpec, height: int, width: int) -> Tuple[Tuple[int, int, int, int], int, int]:
    keh, kew = spec.effective_kernel
    sh, sw = spec.stride
    if spec.padding == "same":
        top, bottom, out_h = same_padding(height, keh, sh)
        left, right, out_w = same_padding(width, kew, sw)
        return (top, bottom, left, right), out_h, out_w
    out_h = (height - keh) // sh + 1
    out_w = (width - kew) // sw + 1
    if out_h < 1 or out_w < 1:
        raise ShapeMismatchError(
            "conv2d",
            f"valid convolution with kernel extent {(keh, kew)} does not fit input {height}x{width}",
        )
    return (0, 0, 0, 0), out_h, out_w


def _check_image(op_id: str, x: Tensor) -> None:
    if x.ndim != 4:
        raise ShapeMismatchError(op_id, f"expected an (N, C, H, W) tensor, got shape {x.shape}")
    if min(x.shape) <= 0:
        raise ShapeMismatchError(op_id, f"all extents must be positive, got {x.shape}")


def _check_conv_operands(
    op_id: str,
    x: Tensor,
    spec: ConvSpec,
    weight: Tensor,
    bias: Optional[Tensor],
    weight_shape: Tuple[int, ...],
) -> None:
    _check_image(op_id, x)
    if x.shape[1] != spec.in_channels:
        raise ShapeMismatchError(
            op_id, f"input has {x.shape[1]} channels, spec expects {spec.in_channels}"
        )
    if weight.shape != weight_shape:
        raise ShapeMismatchError(op_id, f"weight extents {weight.shape}, expected {weight_shape}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeMismatchError(op_id, f"bias extents {bias.shape}, expected ({spec.out_channels},)")


def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """
    Grouped, strided, dilated 2-D convolution (cross-correlation).

    Output extent is ceil(H / stride) under same padding and
    floor((H - k_eff) / stride) + 1 under valid padding.
    """
    _check_conv_operands("conv2d", x, spec, weight, bias, spec.weight_shape)
    n, c, h, w = x.shape
    (top, bottom, left, right), out_h, out_w = _conv_geometry(spec, h, w)
    kh, kw = spec.kernel
    sh, sw = spec.stride
    dh, dw = spec.dilation
    keh, kew = spec.effective_kernel
    groups = spec.groups
    o = spec.out_channels
    cg, og = c // groups, o // groups

    def forward(xa: np.ndarray, wa: np.ndarray, *rest: np.ndarray) -> Tuple[np.ndarray, Context]:
        padded = np.pad(xa, ((0, 0), (0, 0), (top, bottom), (left, right)))
        windows = sliding_window_view(padded, (keh, kew), axis=(2, 3))
        windows = windows[:, :, ::sh, ::sw, ::dh, ::dw][:, :, :out_h, :out_w]
        cols = windows.reshape(n, groups, cg, out_h, out_w, kh, kw)
        wg = wa.reshape(groups, og, cg, kh, kw)
        out = np.einsum("ngchwij,gocij->ngohw", cols, wg, optimize=True).reshape(n, o, out_h, out_w)
        if rest:
            out = out + rest[0].reshape(1, o, 1, 1)
        return out, {"cols": cols, "wg": wg, "padded_shape": padded.shape}

    def backward_fn(g: np.ndarray, ctx: Context) -> List[np.ndarray]:
        cols, wg = ctx["cols"], ctx["wg"]
        gg = g.reshape(n, groups, og, out_h, out_w)
        grad_w = np.einsum("ngohw,ngchwij->gocij", gg, cols, optimize=True).reshape(o, cg, kh, kw)
        grad_padded = np.zeros(ctx["padded_shape"], dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                contrib = np.einsum("ngohw,goc->ngchw", gg, wg[..., i, j], optimize=True)
                r0, c0 = i * dh, j * dw
                grad_padded[
                    :, :, r0 : r0 + sh * (out_h - 1) + 1 : sh, c0 : c0 + sw * (out_w - 1) + 1 : sw
                ] += contrib.reshape(n, c, out_h, out_w)
        grads = [grad_padded[:, :, top : top + h, left : left + w], grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = [x, weight] + ([bias] if bias is not None else [])
    return record("conv2d", inputs, forward, backward_fn)


def dws_conv(
    x: Tensor,
    spec: ConvSpec,
    depthwise_weight: Tensor,
    pointwise_weight: Tensor,
    pointwise_bias: Optional[Tensor] = None,
) -> Tensor:
    """
    Depthwise-separable convolution: per-channel k x k, then 1 x 1 mixing.

    ``spec`` describes the composite (in -> out, kernel, dilation, padding);
    the stages use ``spec.depthwise()`` and ``spec.pointwise()``. Parameter
    count is in·kh·kw + in·out (+ out when ``spec.bias``).
    """
    if spec.groups != 1:
        raise ShapeMismatchError("dws_conv", f"composite spec must have groups=1, got {spec.groups}")
    hidden = conv2d(x, spec.depthwise(), depthwise_weight)
    return conv2d(hidden, spec.pointwise(), pointwise_weight, pointwise_bias)


def transposed_conv2d(
    x: Tensor,
    spec: ConvSpec,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    output_size: Optional[Pair] = None,
) -> Tensor:
    """
    Transposed convolution, the adjoint of ``conv2d`` with the same geometry.

    Under same padding the output extent defaults to stride * H and may be
    set to any extent whose stride-s same convolution yields H, which is how
    MassAtt restores recorded pre-reduction sizes exactly. Weights are
    (out, in, kh, kw); groups must be 1.

    Raises:
        ShapeMismatchError: ``output_size`` cannot be reached from the input.
    """
    o, c = spec.out_channels, spec.in_channels
    kh, kw = spec.kernel
    if spec.groups != 1:
        raise ShapeMismatchError("transposed_conv2d", "grouped transposed convolution is not supported")
    _check_conv_operands("transposed_conv2d", x, spec, weight, bias, (o, c, kh, kw))
    n, _, h, w = x.shape
    sh, sw = spec.stride
    dh, dw = spec.dilation
    keh, kew = spec.effective_kernel
    full_h, full_w = (h - 1) * sh + keh, (w - 1) * sw + kew

    if spec.padding == "same":
        out_h, out_w = output_size if output_size is not None else (h * sh, w * sw)
        top, _, reached_h = same_padding(out_h, keh, sh)
        left, _, reached_w = same_padding(out_w, kew, sw)
        if (reached_h, reached_w) != (h, w):
            raise ShapeMismatchError(
                "transposed_conv2d",
                f"cannot re-expand {h}x{w} to {out_h}x{out_w}: a stride-{spec.stride} "
                f"same convolution of {out_h}x{out_w} yields {reached_h}x{reached_w}",
            )
    else:
        out_h, out_w = output_size if output_size is not None else (full_h, full_w)
        top = left = 0
        if (out_h, out_w) != (full_h, full_w):
            raise ShapeMismatchError(
                "transposed_conv2d",
                f"cannot re-expand {h}x{w} to {out_h}x{out_w}: valid geometry yields {full_h}x{full_w}",
            )
    canvas_h, canvas_w = max(full_h, top + out_h), max(full_w, left + out_w)

    def tap(i: int, j: int) -> Tuple[slice, slice]:
        r0, c0 = i * dh, j * dw
        return slice(r0, r0 + sh * (h - 1) + 1, sh), slice(c0, c0 + sw * (w - 1) + 1, sw)

    def forward(xa: np.ndarray, wa: np.ndarray, *rest: np.ndarray) -> Tuple[np.ndarray, Context]:
        canvas = np.zeros((n, o, canvas_h, canvas_w), dtype=np.result_type(xa, wa))
        for i in range(kh):
            for j in range(kw):
                rows, cols = tap(i, j)
                canvas[:, :, rows, cols] += np.einsum("nchw,oc->nohw", xa, wa[:, :, i, j], optimize=True)
        out = canvas[:, :, top : top + out_h, left : left + out_w].copy()
        if rest:
            out = out + rest[0].reshape(1, o, 1, 1)
        return out, {"x": xa, "w": wa}

    def backward_fn(g: np.ndarray, ctx: Context) -> List[np.ndarray]:
        xa, wa = ctx["x"], ctx["w"]
        canvas = np.zeros((n, o, canvas_h, canvas_w), dtype=g.dtype)
        canvas[:, :, top : top + out_h, left : left + out_w] = g
        grad_x = np.zeros_like(xa)
        grad_w = np.zeros_like(wa)
        for i in range(kh):
            for j in range(kw):
                rows, cols = tap(i, j)
                window = canvas[:, :, rows, cols]
                grad_x += np.einsum("nohw,oc->nchw", window, wa[:, :, i, j], optimize=True)
                grad_w[:, :, i, j] = np.einsum("nohw,nchw->oc", window, xa, optimize=True)
        grads = [grad_x, grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = [x, weight] + ([bias] if bias is not None else [])
    return record("transposed_conv2d", inputs, forward, backward_fn)


def maxpool2x2(x: Tensor) -> Tensor:
    """
    2x2 max pooling with stride 2.

    The argmax of each window (first index in row-major order on ties) is
    kept in the node context under ``idx``; backward routes the gradient there.
    """
    _check_image("maxpool2x2", x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatchError("maxpool2x2", f"spatial extent {h}x{w} must be even")
    oh, ow = h // 2, w // 2

    def forward(a: np.ndarray) -> Tuple[np.ndarray, Context]:
        windows = a.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
        idx = windows.argmax(axis=-1)
        out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
        return out, {"idx": idx, "kink": idx.astype(np.int8)}

    def backward_fn(g: np.ndarray, ctx: Context) -> Tuple[np.ndarray]:
        routed = np.zeros((n, c, oh, ow, 4), dtype=g.dtype)
        np.put_along_axis(routed, ctx["idx"][..., None], g[..., None], axis=-1)
        return (routed.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return record("maxpool2x2", [x], forward, backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C): mean of every channel plane."""
    _check_image("global_avg_pool", x)
    return tensor_mean(x, (2, 3))


def channel_mean(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, 1, H, W): mean across channels at every pixel."""
    _check_image("channel_mean", x)
    n, _, h, w = x.shape
    return reshape(tensor_mean(x, 1), (n, 1, h, w))


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Fully connected layer: x @ W.T + b with W of shape (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatchError(
            "dense", f"input extents {x.shape} incompatible with weight {weight.shape}"
        )

    def forward(xa: np.ndarray, wa: np.ndarray, *rest: np.ndarray) -> Tuple[np.ndarray, Context]:
        out = xa @ wa.T
        if rest:
            out = out + rest[0]
        return out, {"x": xa, "w": wa}

    def backward_fn(g: np.ndarray, ctx: Context) -> List[np.ndarray]:
        grads = [g @ ctx["w"], g.T @ ctx["x"]]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    inputs = [x, weight] + ([bias] if bias is not None else [])
    return record("dense", inputs, forward, backward_fn)


def relu(x: Tensor) -> Tensor:
    def forward(a: np.ndarray) -> Tuple[np.ndarray, Context]:
        mask = a > 0
        return np.where(mask, a, 0.0).astype(a.dtype, copy=False), {"kink": mask}

    def backward_fn(g: np.ndarray, ctx: Context) -> Tuple[np.ndarray]:
        return (g * ctx["kink"],)

    return record("relu", [x], forward, backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    def forward(a: np.ndarray) -> Tuple[np.ndarray, Context]:
        s = expit(a)
        return s, {"s": s}

    def backward_fn(g: np.ndarray, ctx: Context) -> Tuple[np.ndarray]:
        s = ctx["s"]
        return (g * s * (1.0 - s),)

    return record("sigmoid", [x], forward, backward_fn)


def softmax_array(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax over ``axis`` on a plain array."""
    return _softmax(np.asarray(z, dtype=np.float64 if np.asarray(z).dtype.kind != "f" else None), axis=axis)


def softmax(z: Tensor) -> Tensor:
    """Differentiable softmax over the last axis."""

    def forward(a: np.ndarray) -> Tuple[np.ndarray, Context]:
        s = _softmax(a, axis=-1)
        return s, {"s": s}

    def backward_fn(g: np.ndarray, ctx: Context) -> Tuple[np.ndarray]:
        s = ctx["s"]
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return record("softmax", [z], forward, backward_fn)


@dataclass
class BatchNormState:
    """
    Running statistics of one batch-normalization layer.

    In eval mode the layer output depends only on these values.
    """

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: Mode) -> Tensor:
    """
    Per-channel batch normalization over (N, H, W).

    Train mode normalizes with the batch statistics and folds them into the
    running estimates (``momentum`` weight on the old value, unbiased
    variance); eval mode uses the running estimates only.
    """
    _check_image("batch_norm", x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatchError("batch_norm", f"gamma/beta extents {gamma.shape} for {c} channels")
    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]

    def as_channels(v: np.ndarray) -> np.ndarray:
        return v.reshape(1, c, 1, 1)

    if mode == "train":

        def forward(a: np.ndarray, ga: np.ndarray, ba: np.ndarray) -> Tuple[np.ndarray, Context]:
            mean = a.mean(axis=axes)
            var = a.var(axis=axes)
            inv = 1.0 / np.sqrt(var + state.epsilon)
            xhat = (a - as_channels(mean)) * as_channels(inv)
            unbiased = var * count / (count - 1) if count > 1 else var
            state.running_mean = state.momentum * state.running_mean + (1 - state.momentum) * mean
            state.running_var = state.momentum * state.running_var + (1 - state.momentum) * unbiased
            return as_channels(ga) * xhat + as_channels(ba), {"xhat": xhat, "inv": inv, "gamma": ga}

        def backward_fn(g: np.ndarray, ctx: Context) -> List[np.ndarray]:
            xhat, inv, ga = ctx["xhat"], ctx["inv"], ctx["gamma"]
            gxhat = g * as_channels(ga)
            grad_x = as_channels(inv / count) * (
                count * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
            return [grad_x, (g * xhat).sum(axis=axes), g.sum(axis=axes)]

    else:

        def forward(a: np.ndarray, ga: np.ndarray, ba: np.ndarray) -> Tuple[np.ndarray, Context]:
            inv = 1.0 / np.sqrt(state.running_var + state.epsilon)
            xhat = (a - as_channels(state.running_mean)) * as_channels(inv)
            return as_channels(ga) * xhat + as_channels(ba), {"xhat": xhat, "inv": inv, "gamma": ga}

        def backward_fn(g: np.ndarray, ctx: Context) -> List[np.ndarray]:
            xhat, inv, ga = ctx["xhat"], ctx["inv"], ctx["gamma"]
            return [g * as_channels(ga * inv), (g * xhat).sum(axis=axes), g.sum(axis=axes)]

    return record("batch_norm", [x, gamma, beta], forward, backward_fn)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, mode: Mode) -> Tensor:
    """
    Inverted dropout: survivors are scaled by 1 / (1 - rate).

    Identity in eval mode and for ``rate == 0``.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)

    def forward(a: np.ndarray) -> Tuple[np.ndarray, Context]:
        return a * keep, {}

    def backward_fn(g: np.ndarray, ctx: Context) -> Tuple[np.ndarray]:
        return (g * keep,)

    return record("dropout", [x], forward, backward_fn)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 1."""
    if not tensors:
        raise ShapeMismatchError("concat_channels", "nothing to concatenate")
    rest = {t.shape[:1] + t.shape[2:] for t in tensors}
    if len(rest) != 1:
        raise ShapeMismatchError(
            "concat_channels", f"non-channel extents differ: {[t.shape for t in tensors]}"
        )
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def forward(*arrays: np.ndarray) -> Tuple[np.ndarray, Context]:
        return np.concatenate(arrays, axis=1), {}

    def backward_fn(g: np.ndarray, ctx: Context) -> List[np.ndarray]:
        return np.split(g, bounds, axis=1)

    return record("concat_channels", list(tensors), forward, backward_fn)


def take_channels(x: Tensor, index: Sequence[int]) -> Tensor:
    """Select (and reorder) channels; backward scatters into the selected slots."""
    idx = np.asarray(index, dtype=np.intp)

    def forward(a: np.ndarray) -> Tuple[np.ndarray, Context]:
        return a[:, idx], {"shape": a.shape}

    def backward_fn(g: np.ndarray, ctx: Context) -> Tuple[np.ndarray]:
        grad = np.zeros(ctx["shape"], dtype=g.dtype)
        np.add.at(grad, (slice(None), idx), g)
        return (grad,)

    return record("take_channels", [x], forward, backward_fn)


def channel_shuffle_split(x: Tensor) -> Tuple[Tensor, Tensor]:
    """
    Two-group channel shuffle followed by a split into halves.

    Channel i of group g is original channel 2i + g, so group A holds the
    even channels and group B the odd ones.
    """
    _check_image("channel_shuffle_split", x)
    c = x.shape[1]
    if c % 2:
        raise ShapeMismatchError("channel_shuffle_split", f"channel count {c} must be even")
    return take_channels(x, range(0, c, 2)), take_channels(x, range(1, c, 2))


def channel_merge(a: Tensor, b: Tensor) -> Tensor:
    """Inverse of ``channel_shuffle_split``: re-interleave two halves."""
    half = a.shape[1]
    if b.shape[1] != half:
        raise ShapeMismatchError("channel_merge", f"halves differ: {a.shape} vs {b.shape}")
    order = [k // 2 if k % 2 == 0 else half + k // 2 for k in range(2 * half)]
    return take_channels(concat_channels([a, b]), order)


# --------------------------------------------------------------------------
# Modules
# --------------------------------------------------------------------------


def he_uniform(
    rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype: Union[str, np.dtype]
) -> np.ndarray:
    """Uniform(-b, b) with b = sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """
    Container of parameters, buffers and child modules.

    Assigning a ``Parameter`` or ``Module`` to an attribute registers it;
    registration order is the serialization order. Full dotted names are
    given by ``assign_names`` once the tree is complete.
    """

    def __init__(self) -> None:
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})

    def __setattr__(self, name: str, value: object) -> None:
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, array: np.ndarray) -> None:
        self._buffers[name] = array

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, param in self._parameters.items():
            yield prefix + name, param
        for name, child in self._modules.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, "Module", str]]:
        """Yields (full name, owning module, local name) for every buffer."""
        for name in self._buffers:
            yield prefix + name, self, name
        for child_name, child in self._modules.items():
            yield from child.named_buffers(f"{prefix}{child_name}.")

    def get_buffer(self, name: str) -> np.ndarray:
        return self._buffers[name]

    def set_buffer(self, name: str, array: np.ndarray) -> None:
        self._buffers[name] = array

    def assign_names(self, prefix: str = "") -> None:
        for full_name, param in self.named_parameters(prefix):
            param.name = full_name
            param.value.name = full_name

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.value.zero_grad()

    def __call__(self, *args: object, **kwargs: object) -> Tensor:
        return self.forward(*args, **kwargs)  # type: ignore[attr-defined, no-any-return]


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, dtype: str = "float64"):
        super().__init__()
        self.spec = spec
        fan_in = (spec.in_channels // spec.groups) * spec.kernel[0] * spec.kernel[1]
        self.weight = Parameter(Tensor(he_uniform(rng, spec.weight_shape, fan_in, dtype)), "weight")
        if spec.bias:
            self.bias = Parameter(Tensor(np.zeros(spec.out_channels, dtype=dtype)), "bias")

    def forward(self, x: Tensor) -> Tensor:
        bias = self.bias.value if self.spec.bias else None
        return conv2d(x, self.spec, self.weight.value, bias)


class DWSConv2d(Module):
    """Depthwise-separable convolution; a bias, when enabled, sits on the pointwise stage."""

    def __init__(self, spec: ConvSpec, rng: np.random.Generator, dtype: str = "float64"):
        super().__init__()
        self.spec = spec
        self.depthwise = Conv2d(spec.depthwise(), rng, dtype)
        self.pointwise = Conv2d(spec.pointwise(), rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.pointwise(self.depthwise(x))


class Dense(Module):
    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        bias: bool = True,
        dtype: str = "float64",
    ):
        super().__init__()
        self.weight = Parameter(
            Tensor(he_uniform(rng, (out_features, in_features), in_features, dtype)), "weight"
        )
        self.has_bias = bias
        if bias:
            self.bias = Parameter(Tensor(np.zeros(out_features, dtype=dtype)), "bias")

    def forward(self, x: Tensor) -> Tensor:
        return dense(x, self.weight.value, self.bias.value if self.has_bias else None)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.9, epsilon: float = 1e-5, dtype: str = "float64"):
        super().__init__()
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {momentum}")
        self.gamma = Parameter(Tensor(np.ones(channels, dtype=dtype)), "gamma")
        self.beta = Parameter(Tensor(np.zeros(channels, dtype=dtype)), "beta")
        self.state = BatchNormState(
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            epsilon=epsilon,
        )
        self.register_buffer("running_mean", self.state.running_mean)
        self.register_buffer("running_var", self.state.running_var)

    def get_buffer(self, name: str) -> np.ndarray:
        return getattr(self.state, name)  # type: ignore[no-any-return]

    def set_buffer(self, name: str, array: np.ndarray) -> None:
        setattr(self.state, name, array)
        self._buffers[name] = array

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        return batch_norm(x, self.gamma.value, self.beta.value, self.state, mode)


@dataclass(frozen=True)
class DropoutSpec:
    rate: float = 0.25
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.rate}")


class Dropout(Module):
    def __init__(self, spec: DropoutSpec):
        super().__init__()
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)

    def reseed(self, *key: int) -> None:
        """Restart the mask stream from (own seed, *key)."""
        self.rng = np.random.default_rng([self.spec.seed, *key])

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        return dropout(x, self.spec.rate, self.rng, mode)


def reseed_dropout(module: Module, *key: int) -> None:
    """Reseed every ``Dropout`` in the tree so masks depend only on ``key``."""
    if isinstance(module, Dropout):
        module.reseed(*key)
    for child in module._modules.values():
        reseed_dropout(child, *key)


def parameter_count(module: Module) -> int:
    return sum(p.count for p in module.parameters())


def state_arrays(module: Module) -> Dict[str, np.ndarray]:
    """Copies of every parameter and buffer, keyed by full name."""
    arrays = {name: p.value.data.copy() for name, p in module.named_parameters()}
    for name, owner, local in module.named_buffers():
        arrays[name] = np.array(owner.get_buffer(local), copy=True)
    return arrays


def load_state_arrays(module: Module, arrays: Dict[str, np.ndarray]) -> None:
    """Overwrite parameters and buffers in place from ``state_arrays`` output."""
    for name, param in module.named_parameters():
        param.value.data = np.array(arrays[name], dtype=param.value.dtype, copy=True)
    for name, owner, local in module.named_buffers():
        owner.set_buffer(local, np.array(arrays[name], copy=True))
