"""
The full LANMSFF network, its configuration and the parameter audit.

Topology:
    stem(w1) -> dual_path(w2) -> stem(w3) -> dual_path(w4)

The outputs of blocks 1-3 pass through PWFS (when enabled) and GAP, block 4
through GAP alone; the concatenated descriptors (156 values for the default
widths) feed a dense classifier. Spatial extent halves at every block:
64 -> 32 -> 16 -> 8 -> 4.
"""

import hashlib
import json
import logging
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .blocks import DualPathBlock, DualPathBlockConfig, StemBlock, StemBlockConfig, Taps, pwfs
from .exceptions import ShapeMismatchError, ShapeTraceError
from .layers import Dense, Mode, Module, concat_channels, global_avg_pool, softmax_array
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

REFERENCE_PARAMS = 358_000
REFERENCE_BAND = 0.10

# Architecture fields hashed into weight files; seed, dropout and dtype are not.
_ARCHITECTURE_FIELDS = (
    "input_channels",
    "num_classes",
    "block_widths",
    "enable_massatt",
    "enable_pwfs",
    "input_size",
    "path_wiring",
    "reduction",
)


class LANMSFFConfig(BaseModel):
    """
    Architecture hyperparameters.

    The four ablation configurations are the combinations of
    ``enable_pwfs`` and ``enable_massatt``.

    Attributes:
        input_channels: 1 (grayscale, default) or 3.
        num_classes: 7 for FER-2013 / KDEF, 8 for FERPlus; any value >= 2 is accepted.
        block_widths: Output channels of blocks 1-4.
        path_wiring: Dual-path stage wiring, ``shared`` or ``independent``.
        dtype: ``float64`` (tests, audit) or ``float32`` (bulk training).
    """

    model_config = ConfigDict(frozen=True)

    input_channels: Literal[1, 3] = 1
    num_classes: int = Field(default=7, ge=2)
    block_widths: Tuple[int, int, int, int] = (66, 72, 78, 84)
    enable_massatt: bool = True
    enable_pwfs: bool = True
    dropout_rate: float = Field(default=0.25, ge=0.0, lt=1.0)
    input_size: int = 64
    path_wiring: Literal["shared", "independent"] = "shared"
    reduction: int = Field(default=4, ge=1)
    bn_momentum: float = Field(default=0.9, gt=0.0, lt=1.0)
    bn_epsilon: float = Field(default=1e-5, gt=0.0)
    seed: int = Field(default=0, ge=0)
    dtype: Literal["float64", "float32"] = "float64"

    @model_validator(mode="after")
    def _check_widths(self) -> "LANMSFFConfig":
        w1, w2, w3, w4 = self.block_widths
        if min(self.block_widths) <= 0:
            raise ValueError(f"block widths must be positive, got {self.block_widths}")
        if w1 % 2 or w3 % 2:
            raise ValueError(
                f"widths[0]={w1} and widths[2]={w3} must be even: they feed a shuffle split"
            )
        if w2 % 2 or w4 % 2:
            raise ValueError(f"widths[1]={w2} and widths[3]={w4} must be even: two paths of width/2")
        if self.enable_pwfs:
            for index, width in enumerate((w1, w2, w3)):
                if width % 3:
                    raise ValueError(f"widths[{index}]={width} must be divisible by 3 for PWFS")
        if self.enable_massatt:
            for index, width in ((1, w2), (3, w4)):
                if width % self.reduction:
                    raise ValueError(
                        f"widths[{index}]={width} must be divisible by the MassAtt reduction {self.reduction}"
                    )
        if self.input_size < 16 or self.input_size % 16:
            raise ValueError(f"input_size={self.input_size} must be a positive multiple of 16")
        return self

    @property
    def fusion_length(self) -> int:
        w1, w2, w3, w4 = self.block_widths
        if self.enable_pwfs:
            return w1 // 3 + w2 // 3 + w3 // 3 + w4
        return w1 + w2 + w3 + w4

    def architecture_hash(self) -> bytes:
        """16-byte digest of the fields that determine parameter names and shapes."""
        fields = {name: getattr(self, name) for name in _ARCHITECTURE_FIELDS}
        canonical = json.dumps(fields, sort_keys=True, default=list).encode()
        return hashlib.blake2b(canonical, digest_size=16).digest()

    def trace_table(self) -> List[Tuple[str, Tuple[int, int, int]]]:
        """Expected (C, H, W) at the input and after every block."""
        size = self.input_size
        rows = [("input", (self.input_channels, size, size))]
        for index, width in enumerate(self.block_widths, start=1):
            size //= 2
            rows.append((f"block{index}", (width, size, size)))
        return rows


class LANMSFF(Module):
    """
    Built network: the four blocks plus the fusion classifier.

    Parameters are registered in forward order; ``named_parameters`` yields
    the stable, dotted names (``block2.massatt.Z0``, ``classifier.weight``)
    that the weight format and the audit rely on.
    """

    def __init__(self, config: LANMSFFConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        dtype = config.dtype
        w1, w2, w3, w4 = config.block_widths
        common = dict(
            dropout_rate=config.dropout_rate,
            bn_momentum=config.bn_momentum,
            bn_epsilon=config.bn_epsilon,
        )
        dual = dict(
            enable_massatt=config.enable_massatt,
            reduction=config.reduction,
            wiring=config.path_wiring,
            **common,
        )
        self.block1 = StemBlock(
            StemBlockConfig(in_channels=config.input_channels, width=w1, dropout_seed=config.seed + 1, **common),
            rng,
            dtype,
        )
        self.block2 = DualPathBlock(
            DualPathBlockConfig(in_channels=w1, width=w2, dropout_seed=config.seed + 2, **dual), rng, dtype
        )
        self.block3 = StemBlock(
            StemBlockConfig(in_channels=w2, width=w3, dropout_seed=config.seed + 3, **common), rng, dtype
        )
        self.block4 = DualPathBlock(
            DualPathBlockConfig(in_channels=w3, width=w4, dropout_seed=config.seed + 4, **dual), rng, dtype
        )
        self.classifier = Dense(config.fusion_length, config.num_classes, rng, bias=True, dtype=dtype)
        self.assign_names()
        self._trace = dict(config.trace_table())

    @property
    def blocks(self) -> List[Module]:
        return [self.block1, self.block2, self.block3, self.block4]

    def _check_input(self, x: Tensor) -> None:
        expected = self._trace["input"]
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeMismatchError(
                "forward", f"expected input (N, {', '.join(map(str, expected))}), got {x.shape}"
            )

    def forward(self, x: Tensor, mode: Mode = "eval", taps: Optional[Taps] = None) -> Tensor:
        """
        Logits for a batch.

        Args:
            x: (N, input_channels, input_size, input_size).
            mode: ``train`` uses batch statistics and dropout.
            taps: When given, filled with intermediate tensors under
                ``blockN.out``, ``blockN.prepool`` and ``fusion``.
        """
        x = x if isinstance(x, Tensor) else Tensor(x, dtype=self.config.dtype)
        self._check_input(x)
        descriptors: List[Tensor] = []
        out = x
        for index, block in enumerate(self.blocks, start=1):
            name = f"block{index}"
            block_taps: Optional[Taps] = {} if taps is not None else None
            out = block(out, mode, block_taps)
            if tuple(out.shape[1:]) != self._trace[name]:
                raise ShapeTraceError(name, self._trace[name], out.shape[1:])
            if taps is not None:
                taps[f"{name}.out"] = out
                for key, value in (block_taps or {}).items():
                    taps[f"{name}.{key}"] = value
            if index < 4 and self.config.enable_pwfs:
                descriptors.append(global_avg_pool(pwfs(out)))
            else:
                descriptors.append(global_avg_pool(out))
        fusion = concat_channels(descriptors)
        if taps is not None:
            taps["fusion"] = fusion
        return self.classifier(fusion)

    def predict_proba(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Class probabilities (softmax over logits) in eval mode, no recording."""
        chunks = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                batch = Tensor(images[start : start + batch_size], dtype=self.config.dtype)
                chunks.append(softmax_array(self.forward(batch, "eval").data))
        if not chunks:
            return np.zeros((0, self.config.num_classes))
        return np.concatenate(chunks, axis=0)

    def predict(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        return self.predict_proba(images, batch_size).argmax(axis=1)


def build_model(config: Optional[LANMSFFConfig] = None) -> LANMSFF:
    """Build and initialize a network; the same config (and seed) gives identical weights."""
    config = config or LANMSFFConfig()
    model = LANMSFF(config)
    logger.debug("built LANMSFF %s with %d parameters", config.block_widths, model_parameter_count(model))
    return model


def model_parameter_count(model: Module) -> int:
    return sum(p.count for p in model.parameters())


# --------------------------------------------------------------------------
# Audit
# --------------------------------------------------------------------------


class AuditRow(BaseModel):
    name: str
    shape: Tuple[int, ...]
    count: int


class AuditReport(BaseModel):
    """
    Exact parameter accounting of a built model.

    ``module_totals`` holds every dotted prefix (``block2``,
    ``block2.massatt``, ``block2.path_a.stage2`` ...); ``block_totals`` only
    the top-level entries.
    """

    rows: List[AuditRow]
    block_totals: Dict[str, int]
    module_totals: Dict[str, int]
    grand_total: int
    fusion_length: int
    reference_total: int = REFERENCE_PARAMS
    reference_band: float = REFERENCE_BAND

    @property
    def within_band(self) -> bool:
        return abs(self.grand_total - self.reference_total) <= self.reference_band * self.reference_total

    @property
    def relative_deviation(self) -> float:
        return (self.grand_total - self.reference_total) / self.reference_total

    def to_text(self) -> str:
        width = max(len(row.name) for row in self.rows) if self.rows else 10
        lines = [f"{'parameter':<{width}}  {'shape':<18}{'count':>10}"]
        lines.append("-" * (width + 30))
        for row in self.rows:
            shape = "x".join(str(s) for s in row.shape)
            lines.append(f"{row.name:<{width}}  {shape:<18}{row.count:>10,}")
        lines.append("-" * (width + 30))
        for block, total in self.block_totals.items():
            lines.append(f"{block:<{width}}  {'':<18}{total:>10,}")
        lines.append(f"{'total':<{width}}  {'':<18}{self.grand_total:>10,}")
        lines.append(f"fusion vector length: {self.fusion_length}")
        lines.append(
            f"reference {self.reference_total:,} (+/-{self.reference_band:.0%}): "
            f"deviation {self.relative_deviation:+.2%}, "
            f"{'within' if self.within_band else 'OUTSIDE'} band"
        )
        return "\n".join(lines)


def audit_parameters(model: LANMSFF) -> AuditReport:
    rows = [
        AuditRow(name=name, shape=param.shape, count=param.count)
        for name, param in model.named_parameters()
    ]
    module_totals: Dict[str, int] = {}
    block_totals: Dict[str, int] = {}
    for row in rows:
        parts = row.name.split(".")
        block_totals[parts[0]] = block_totals.get(parts[0], 0) + row.count
        for depth in range(1, len(parts)):
            prefix = ".".join(parts[:depth])
            module_totals[prefix] = module_totals.get(prefix, 0) + row.count
    report = AuditReport(
        rows=rows,
        block_totals=block_totals,
        module_totals=module_totals,
        grand_total=sum(row.count for row in rows),
        fusion_length=model.config.fusion_length,
    )
    if not report.within_band:
        logger.warning(
            "audited total %d is %+.1f%% from the %d reference",
            report.grand_total,
            100 * report.relative_deviation,
            report.reference_total,
        )
    return report
