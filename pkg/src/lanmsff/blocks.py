"""
Composite blocks of the LANMSFF network.

    - ``pwfs``: point-wise feature selection over three channel sub-groups.
    - ``MassAtt``: joint channel x spatial attention map.
    - ``StemBlock``: [conv, DWS conv, conv] -> BN -> maxpool -> dropout
      (blocks 1 and 3).
    - ``DualPathBlock``: shuffle-split into two three-stage paths with
      dilation 1 and 2, fused through MassAtt and a 1x1 conv (blocks 2 and 4).
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .exceptions import ShapeMismatchError
from .layers import (
    BatchNorm2d,
    Conv2d,
    ConvSpec,
    Dropout,
    DropoutSpec,
    DWSConv2d,
    Mode,
    Module,
    channel_mean,
    channel_shuffle_split,
    concat_channels,
    conv2d,
    dense,
    global_avg_pool,
    he_uniform,
    maxpool2x2,
    relu,
    sigmoid,
    transposed_conv2d,
)
from .tensor import Context, Parameter, Tensor, record, reshape

logger = logging.getLogger(__name__)

Taps = Dict[str, Tensor]


def pwfs(x: Tensor) -> Tensor:
    """
    Point-wise feature selection.

    Channels split into contiguous thirds S0, S1, S2; at every (c, h, w) the
    output is the mean of the maximum and the median of the three aligned
    values, i.e. the mean of the two largest. Backward sends half of the
    incoming gradient to each of the two selected elements; equal values are
    ranked by sub-group index (S0 before S1 before S2).

    Raises:
        ShapeMismatchError: the channel count is not divisible by 3.
    """
    if x.ndim != 4:
        raise ShapeMismatchError("pwfs", f"expected an (N, C, H, W) tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    if c % 3:
        raise ShapeMismatchError("pwfs", f"channel count C={c} is not divisible by 3")
    third = c // 3

    def forward(a: np.ndarray) -> Tuple[np.ndarray, Context]:
        groups = a.reshape(n, 3, third, h, w)
        order = np.argsort(-groups, axis=1, kind="stable")
        top = order[:, :2]
        chosen = np.take_along_axis(groups, top, axis=1)
        out = 0.5 * (chosen[:, 0] + chosen[:, 1])
        return out, {"top": top, "kink": order.astype(np.int8)}

    def backward_fn(g: np.ndarray, ctx: Context) -> Tuple[np.ndarray]:
        top = ctx["top"]
        grad = np.zeros((n, 3, third, h, w), dtype=g.dtype)
        np.put_along_axis(grad, top, np.broadcast_to(0.5 * g[:, None], top.shape), axis=1)
        return (grad.reshape(n, c, h, w),)

    return record("pwfs", [x], forward, backward_fn)


# --------------------------------------------------------------------------
# MassAtt
# --------------------------------------------------------------------------


@dataclass
class MassAttWeights:
    """
    Weights of one MassAtt block for C channels and reduction r.

    Z0 (C/r, C) and Z1 (C, C/r) form the channel MLP; Z2 (2, 1, 3, 3) and
    Z3 (4, 2, 3, 3) are stride-2 convolutions; Z4 (4, 4, 3, 3) and
    Z5 (1, 4, 3, 3) are stride-2 transposed convolutions. ``b0``..``b5`` are
    the matching biases.
    """

    Z0: Tensor
    b0: Tensor
    Z1: Tensor
    b1: Tensor
    Z2: Tensor
    b2: Tensor
    Z3: Tensor
    b3: Tensor
    Z4: Tensor
    b4: Tensor
    Z5: Tensor
    b5: Tensor


_DOWN1 = ConvSpec(in_channels=1, out_channels=2, kernel=3, stride=2, bias=True)
_DOWN2 = ConvSpec(in_channels=2, out_channels=4, kernel=3, stride=2, bias=True)
_UP1 = ConvSpec(in_channels=4, out_channels=4, kernel=3, stride=2, bias=True)
_UP2 = ConvSpec(in_channels=4, out_channels=1, kernel=3, stride=2, bias=True)


def mass_att(x: Tensor, weights: MassAttWeights, reduction: int = 4) -> Tensor:
    """
    Attention map A_m = sigmoid(A_c * A_s) of the same shape as ``x``.

    A_c = Z1 relu(Z0 GAP(x) + b0) + b1 is broadcast over space; A_s runs the
    per-pixel channel mean through two stride-2 convolutions and two stride-2
    transposed convolutions (ReLU after the first three) that restore the
    recorded extents exactly. Every entry lies strictly inside (0, 1).

    Raises:
        ShapeMismatchError: C is not divisible by ``reduction``, or the channel
            MLP is not (C/r, C).
    """
    if x.ndim != 4:
        raise ShapeMismatchError("mass_att", f"expected an (N, C, H, W) tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    if weights.Z0.shape[1] != c:
        raise ShapeMismatchError(
            "mass_att", f"input has {c} channels, channel MLP expects {weights.Z0.shape[1]}"
        )
    if reduction < 1 or c % reduction:
        raise ShapeMismatchError(
            "mass_att", f"channel count {c} is not divisible by reduction {reduction}"
        )
    if weights.Z0.shape[0] != c // reduction:
        raise ShapeMismatchError(
            "mass_att",
            f"channel MLP has {weights.Z0.shape[0]} hidden units, reduction {reduction} needs {c // reduction}",
        )

    channel = dense(relu(dense(global_avg_pool(x), weights.Z0, weights.b0)), weights.Z1, weights.b1)
    channel = reshape(channel, (n, c, 1, 1))

    spatial_in = channel_mean(x)
    down1 = relu(conv2d(spatial_in, _DOWN1, weights.Z2, weights.b2))
    down2 = relu(conv2d(down1, _DOWN2, weights.Z3, weights.b3))
    up1 = relu(transposed_conv2d(down2, _UP1, weights.Z4, weights.b4, output_size=down1.shape[2:]))
    spatial = transposed_conv2d(up1, _UP2, weights.Z5, weights.b5, output_size=(h, w))

    return sigmoid(channel * spatial)


class MassAtt(Module):
    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4, dtype: str = "float64"):
        super().__init__()
        if channels % reduction:
            raise ShapeMismatchError(
                "mass_att", f"channel count {channels} is not divisible by reduction {reduction}"
            )
        hidden = channels // reduction
        self.channels = channels
        self.reduction = reduction

        def weight(name: str, shape: Tuple[int, ...], fan_in: int) -> Parameter:
            return Parameter(Tensor(he_uniform(rng, shape, fan_in, dtype)), name)

        def zeros(name: str, size: int) -> Parameter:
            return Parameter(Tensor(np.zeros(size, dtype=dtype)), name)

        self.Z0 = weight("Z0", (hidden, channels), channels)
        self.b0 = zeros("b0", hidden)
        self.Z1 = weight("Z1", (channels, hidden), hidden)
        self.b1 = zeros("b1", channels)
        self.Z2 = weight("Z2", _DOWN1.weight_shape, 1 * 9)
        self.b2 = zeros("b2", 2)
        self.Z3 = weight("Z3", _DOWN2.weight_shape, 2 * 9)
        self.b3 = zeros("b3", 4)
        self.Z4 = weight("Z4", (4, 4, 3, 3), 4 * 9)
        self.b4 = zeros("b4", 4)
        self.Z5 = weight("Z5", (1, 4, 3, 3), 4 * 9)
        self.b5 = zeros("b5", 1)

    def weights(self) -> MassAttWeights:
        return MassAttWeights(**{name: param.value for name, param in self._parameters.items()})

    def forward(self, x: Tensor) -> Tensor:
        return mass_att(x, self.weights(), self.reduction)


# --------------------------------------------------------------------------
# Block configs
# --------------------------------------------------------------------------


class StemBlockConfig(BaseModel):
    """Blocks 1 and 3: three 3x3 convolutions (standard, DWS, standard) at ``width``."""

    model_config = ConfigDict(frozen=True)

    in_channels: int
    width: int
    kernel: int = 3
    dropout_rate: float = 0.25
    dropout_seed: int = 0
    bn_momentum: float = 0.9
    bn_epsilon: float = 1e-5

    @model_validator(mode="after")
    def _check(self) -> "StemBlockConfig":
        if self.in_channels <= 0 or self.width <= 0:
            raise ValueError("in_channels and width must be positive")
        return self


class DualPathBlockConfig(BaseModel):
    """
    Blocks 2 and 4.

    Attributes:
        width: Output channels; each path stage produces width / 2.
        dilations: (path A, path B) dilation rates.
        dws_stage: 1-based stage that uses a depthwise-separable convolution.
        wiring: ``shared`` feeds every stage's concatenation to both paths;
            ``independent`` keeps each path on its own output.
    """

    model_config = ConfigDict(frozen=True)

    in_channels: int
    width: int
    kernel: int = 3
    dilations: Tuple[int, int] = (1, 2)
    stages: int = 3
    dws_stage: int = 2
    enable_massatt: bool = True
    reduction: int = 4
    wiring: Literal["shared", "independent"] = "shared"
    dropout_rate: float = 0.25
    dropout_seed: int = 0
    bn_momentum: float = 0.9
    bn_epsilon: float = 1e-5

    @model_validator(mode="after")
    def _check(self) -> "DualPathBlockConfig":
        if self.in_channels % 2:
            raise ValueError(f"in_channels={self.in_channels} must be even for the shuffle split")
        if self.width % 2:
            raise ValueError(f"width={self.width} must be even (two paths of width/2)")
        if self.enable_massatt and self.width % self.reduction:
            raise ValueError(
                f"width={self.width} must be divisible by the MassAtt reduction {self.reduction}"
            )
        if not 1 <= self.dws_stage <= self.stages:
            raise ValueError(f"dws_stage={self.dws_stage} outside 1..{self.stages}")
        return self


# --------------------------------------------------------------------------
# Blocks
# --------------------------------------------------------------------------


class StemBlock(Module):
    def __init__(self, cfg: StemBlockConfig, rng: np.random.Generator, dtype: str = "float64"):
        super().__init__()
        self.cfg = cfg
        k, width = cfg.kernel, cfg.width
        self.conv1 = Conv2d(ConvSpec(in_channels=cfg.in_channels, out_channels=width, kernel=k, bias=True), rng, dtype)
        self.dws = DWSConv2d(ConvSpec(in_channels=width, out_channels=width, kernel=k, bias=True), rng, dtype)
        self.conv3 = Conv2d(ConvSpec(in_channels=width, out_channels=width, kernel=k), rng, dtype)
        self.bn = BatchNorm2d(width, cfg.bn_momentum, cfg.bn_epsilon, dtype)
        self.dropout = Dropout(DropoutSpec(rate=cfg.dropout_rate, seed=cfg.dropout_seed))

    def forward(self, x: Tensor, mode: Mode, taps: Optional[Taps] = None) -> Tensor:
        out = relu(self.conv1(x))
        out = relu(self.dws(out))
        out = self.bn(relu(self.conv3(out)), mode)
        if taps is not None:
            taps["prepool"] = out
        return self.dropout(maxpool2x2(out), mode)


class ConvPath(Module):
    """One branch of a dual-path block: ``stages`` 3x3 convolutions at a fixed dilation."""

    def __init__(self, in_channels: List[int], out_channels: int, dilation: int, dws_stage: int,
                 kernel: int, rng: np.random.Generator, dtype: str = "float64"):
        super().__init__()
        self.stages: List[Module] = []
        for index, channels in enumerate(in_channels, start=1):
            spec = ConvSpec(in_channels=channels, out_channels=out_channels, kernel=kernel, dilation=dilation)
            stage: Module = DWSConv2d(spec, rng, dtype) if index == dws_stage else Conv2d(spec, rng, dtype)
            setattr(self, f"stage{index}", stage)
            self.stages.append(stage)


class DualPathBlock(Module):
    def __init__(self, cfg: DualPathBlockConfig, rng: np.random.Generator, dtype: str = "float64"):
        super().__init__()
        self.cfg = cfg
        half = cfg.width // 2
        later = cfg.width if cfg.wiring == "shared" else half
        widths = [cfg.in_channels // 2] + [later] * (cfg.stages - 1)
        dil_a, dil_b = cfg.dilations
        self.path_a = ConvPath(widths, half, dil_a, cfg.dws_stage, cfg.kernel, rng, dtype)
        self.path_b = ConvPath(widths, half, dil_b, cfg.dws_stage, cfg.kernel, rng, dtype)
        if cfg.enable_massatt:
            self.massatt = MassAtt(cfg.width, rng, cfg.reduction, dtype)
        self.fuse = Conv2d(ConvSpec(in_channels=cfg.width, out_channels=cfg.width, kernel=1), rng, dtype)
        self.bn = BatchNorm2d(cfg.width, cfg.bn_momentum, cfg.bn_epsilon, dtype)
        self.dropout = Dropout(DropoutSpec(rate=cfg.dropout_rate, seed=cfg.dropout_seed))

    def forward(self, x: Tensor, mode: Mode, taps: Optional[Taps] = None) -> Tensor:
        in_a, in_b = channel_shuffle_split(x)
        fused = x
        for stage_a, stage_b in zip(self.path_a.stages, self.path_b.stages):
            out_a, out_b = relu(stage_a(in_a)), relu(stage_b(in_b))
            fused = concat_channels([out_a, out_b])
            if self.cfg.wiring == "shared":
                in_a = in_b = fused
            else:
                in_a, in_b = out_a, out_b
        if self.cfg.enable_massatt:
            attention = self.massatt(fused)
            if taps is not None:
                taps["attention"] = attention
            fused = fused * attention
        out = self.bn(relu(self.fuse(fused)), mode)
        if taps is not None:
            taps["prepool"] = out
        return self.dropout(maxpool2x2(out), mode)
