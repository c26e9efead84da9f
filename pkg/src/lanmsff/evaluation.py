"""
Metrics, confusion matrices, text tables and Grad-CAM heatmaps.

Efficiency and pose-robustness metrics:
    ID  = accuracy % / (parameters / 10^6)
    Var = population variance of the per-pose accuracies together with the
          overall accuracy

Text reports print ID with one decimal and Var with two; JSON keeps full
precision.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, ImageOps
from pydantic import BaseModel
from scipy import ndimage
from sklearn.metrics import confusion_matrix

from .datasets import LabelSchema, Sample, to_arrays
from .exceptions import EmptySplitError, SchemaMismatchError, ShapeMismatchError
from .model import LANMSFF, model_parameter_count
from .tensor import Tape, Tensor, backward

logger = logging.getLogger(__name__)

OVERALL = "overall"


def information_density(accuracy_pct: float, param_count: float) -> float:
    """Accuracy percentage per million parameters."""
    if param_count <= 0:
        raise ValueError(f"parameter count must be positive, got {param_count}")
    return accuracy_pct / (param_count / 1_000_000)


def pose_variance(per_pose_accuracies: Union[Sequence[float], Mapping[str, float]], overall_accuracy: float) -> float:
    """Population variance over the per-pose accuracies plus the overall accuracy."""
    values = list(per_pose_accuracies.values() if isinstance(per_pose_accuracies, Mapping) else per_pose_accuracies)
    if not values:
        raise ValueError("pose_variance needs at least one per-pose accuracy")
    return float(np.var(np.array(values + [overall_accuracy], dtype=np.float64)))


# --------------------------------------------------------------------------
# Confusion matrix and report
# --------------------------------------------------------------------------


@dataclass
class ConfusionMatrix:
    """K x K counts, rows = actual class, columns = predicted class."""

    counts: np.ndarray
    class_names: Tuple[str, ...]

    @classmethod
    def from_predictions(cls, labels: np.ndarray, predictions: np.ndarray, class_names: Sequence[str]) -> "ConfusionMatrix":
        counts = confusion_matrix(labels, predictions, labels=np.arange(len(class_names)))
        return cls(counts=counts.astype(np.int64), class_names=tuple(class_names))

    def normalized(self) -> np.ndarray:
        """Row percentages; rows without support are zero."""
        support = self.counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            rows = np.where(support > 0, 100.0 * self.counts / np.maximum(support, 1), 0.0)
        return rows

    def recall(self) -> np.ndarray:
        return np.diag(self.normalized()) / 100.0

    def to_text(self) -> str:
        width = max(8, max(len(c) for c in self.class_names) + 1)
        header = "actual\\pred".ljust(width) + "".join(c[:width - 1].rjust(width) for c in self.class_names)
        lines = [header]
        for name, row in zip(self.class_names, self.normalized()):
            lines.append(name.ljust(width) + "".join(f"{v:.2f}".rjust(width) for v in row))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "counts": self.counts.tolist(),
            "normalized": np.round(self.normalized(), 4).tolist(),
        }


class MetricsReport(BaseModel):
    """
    Accuracy breakdown of one evaluation.

    ``per_pose`` is keyed by pose tag (``-90`` ... ``90``) or subset name
    (``>30``); ``per_pose_class`` holds the per-class accuracies of each of
    those groups and of ``overall``.
    """

    accuracy: float
    num_samples: int
    per_class: Dict[str, float]
    per_pose: Dict[str, float]
    per_pose_class: Dict[str, Dict[str, float]]
    param_count: int
    information_density: float
    pose_variance: Optional[float] = None

    def to_text(self) -> str:
        """Per-pose x per-class accuracy table followed by the summary metrics."""
        classes = list(self.per_class)
        width = max(9, max(len(c) for c in classes) + 1)
        lines = ["pose".ljust(8) + "".join(c[:width - 1].rjust(width) for c in classes) + "whole".rjust(width)]
        groups = list(self.per_pose) + [OVERALL]
        for group in groups:
            row = self.per_pose_class.get(group, {})
            whole = self.accuracy if group == OVERALL else self.per_pose[group]
            cells = "".join(f"{row.get(c, float('nan')):.2f}".rjust(width) for c in classes)
            lines.append(group.ljust(8) + cells + f"{whole:.2f}".rjust(width))
        lines.append("")
        lines.append(f"accuracy {self.accuracy:.2f}% over {self.num_samples} samples")
        lines.append(f"params {self.param_count:,}  ID {self.information_density:.1f}")
        if self.pose_variance is not None:
            lines.append(f"Var {self.pose_variance:.2f}")
        return "\n".join(lines)


def _groups(samples_poses: Sequence[Optional[int]], subsets: Sequence[Tuple[str, ...]]) -> Dict[str, np.ndarray]:
    groups: Dict[str, List[int]] = {}
    for i, pose in enumerate(samples_poses):
        if pose is not None:
            groups.setdefault(str(pose), []).append(i)
    for i, tags in enumerate(subsets):
        for tag in tags:
            groups.setdefault(tag, []).append(i)
    def order(key: str) -> Tuple[int, float, str]:
        try:
            return (0, float(key), key)
        except ValueError:
            return (1, 0.0, key)
    return {key: np.array(groups[key]) for key in sorted(groups, key=order)}


def evaluate_predictions(
    labels: np.ndarray,
    predictions: np.ndarray,
    schema: LabelSchema,
    param_count: int,
    poses: Optional[Sequence[Optional[int]]] = None,
    subsets: Optional[Sequence[Tuple[str, ...]]] = None,
) -> Tuple[MetricsReport, Dict[str, ConfusionMatrix]]:
    """
    Metrics from given labels and predictions.

    Returns the report and one confusion matrix per group (``overall`` plus
    every pose tag or subset present).
    """
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if len(labels) == 0:
        raise EmptySplitError("nothing to evaluate")
    if labels.max() >= len(schema) or predictions.max() >= len(schema):
        raise SchemaMismatchError(f"labels exceed the {len(schema)} classes of schema {schema.name!r}")
    poses = list(poses) if poses is not None else [None] * len(labels)
    subsets = list(subsets) if subsets is not None else [()] * len(labels)

    def per_class(indices: np.ndarray) -> Dict[str, float]:
        out = {}
        for k, name in enumerate(schema.classes):
            mask = labels[indices] == k
            if mask.any():
                out[name] = float(100.0 * np.mean(predictions[indices][mask] == k))
        return out

    everything = np.arange(len(labels))
    accuracy = float(100.0 * np.mean(labels == predictions))
    matrices = {OVERALL: ConfusionMatrix.from_predictions(labels, predictions, schema.classes)}
    per_pose: Dict[str, float] = {}
    per_pose_class = {OVERALL: per_class(everything)}
    for group, indices in _groups(poses, subsets).items():
        per_pose[group] = float(100.0 * np.mean(labels[indices] == predictions[indices]))
        per_pose_class[group] = per_class(indices)
        matrices[group] = ConfusionMatrix.from_predictions(labels[indices], predictions[indices], schema.classes)

    report = MetricsReport(
        accuracy=accuracy,
        num_samples=len(labels),
        per_class=per_pose_class[OVERALL],
        per_pose=per_pose,
        per_pose_class=per_pose_class,
        param_count=param_count,
        information_density=information_density(accuracy, param_count),
        pose_variance=pose_variance(per_pose, accuracy) if per_pose else None,
    )
    return report, matrices


def evaluate(
    model: LANMSFF, samples: Sequence[Sample], schema: LabelSchema, batch_size: int = 64
) -> Tuple[MetricsReport, Dict[str, ConfusionMatrix]]:
    """
    Eval-mode predictions of ``model`` over ``samples`` and their metrics.

    Raises:
        SchemaMismatchError: the schema's class count differs from the model's.
        EmptySplitError: no samples.
    """
    if len(schema) != model.config.num_classes:
        raise SchemaMismatchError(
            f"schema {schema.name!r} has {len(schema)} classes, model has {model.config.num_classes}"
        )
    if not samples:
        raise EmptySplitError("nothing to evaluate")
    images, labels = to_arrays(samples)
    predictions = model.predict(images, batch_size)
    return evaluate_predictions(
        labels,
        predictions,
        schema,
        model_parameter_count(model),
        poses=[s.pose for s in samples],
        subsets=[s.subsets for s in samples],
    )


# --------------------------------------------------------------------------
# Grad-CAM
# --------------------------------------------------------------------------


@dataclass
class Heatmap:
    """
    Normalized class-activation map at input resolution.

    ``zero_gradient`` marks maps computed from an all-zero gradient field
    (returned flat zero).
    """

    values: np.ndarray
    class_index: int
    source_id: str
    layer: str
    zero_gradient: bool = False


def normalize_cam(cam: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a constant positive map becomes all ones, a zero map stays zero."""
    low, high = float(cam.min()), float(cam.max())
    if high <= 0.0:
        return np.zeros_like(cam)
    if high == low:
        return np.ones_like(cam)
    return (cam - low) / (high - low)


def class_activation(features: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """ReLU(sum_k GAP(grad_k) * A_k) for one (K, h, w) feature map."""
    weights = gradients.mean(axis=(1, 2))
    return np.maximum(np.tensordot(weights, features, axes=1), 0.0)


def upsample(cam: np.ndarray, size: int) -> np.ndarray:
    h, w = cam.shape
    return ndimage.zoom(cam, (size / h, size / w), order=1, mode="nearest", grid_mode=True)


def grad_cam(
    model: LANMSFF,
    image: np.ndarray,
    target_class: int,
    layer: str = "block4.prepool",
    source_id: str = "",
) -> Heatmap:
    """
    Grad-CAM of ``target_class`` for one (C, H, W) image.

    ``layer`` names a forward tap: ``block4.prepool`` (after BN, before the
    last pooling) by default, or ``blockN.out`` / ``blockN.prepool``.
    """
    if not 0 <= target_class < model.config.num_classes:
        raise ValueError(f"target class {target_class} outside 0..{model.config.num_classes - 1}")
    size = model.config.input_size
    taps: Dict[str, Tensor] = {}
    with Tape() as tape:
        logits = model(Tensor(image[None], dtype=model.config.dtype), "eval", taps)
        if layer not in taps:
            raise ValueError(f"unknown Grad-CAM layer {layer!r}; available {sorted(taps)}")
        selector = np.zeros(logits.shape)
        selector[0, target_class] = 1.0
        backward((logits * selector).sum(), tape)
    feature = taps[layer]
    gradients = feature.grad if feature.grad is not None else np.zeros_like(feature.data)
    model.zero_grad()

    if not np.any(gradients):
        logger.warning("Grad-CAM for %s class %d: gradient field is all zero", source_id or "sample", target_class)
        return Heatmap(np.zeros((size, size)), target_class, source_id, layer, zero_gradient=True)

    cam = class_activation(feature.data[0], gradients[0])
    values = normalize_cam(upsample(cam, size))
    return Heatmap(np.clip(values, 0.0, 1.0), target_class, source_id, layer)


def save_heatmap(heatmap: Heatmap, directory: Union[str, Path], stem: str, image_format: str = "png") -> Path:
    """
    Write the map as an 8-bit grayscale PNG or PGM plus a JSON sidecar.

    Returns:
        Path of the image file.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    suffix = {"png": ".png", "pgm": ".pgm"}[image_format]
    path = directory / f"{stem}{suffix}"
    pixels = np.round(np.clip(heatmap.values, 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(pixels).save(path, format="PNG" if image_format == "png" else "PPM")
    sidecar = {
        "source_id": heatmap.source_id,
        "class_index": heatmap.class_index,
        "layer": heatmap.layer,
        "zero_gradient": heatmap.zero_gradient,
        "shape": list(heatmap.values.shape),
        "argmax": [int(v) for v in np.unravel_index(int(np.argmax(heatmap.values)), heatmap.values.shape)],
    }
    (directory / f"{stem}.json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    return path


def overlay_heatmap(heatmap: Heatmap, image: np.ndarray, alpha: float = 0.5) -> Image.Image:
    """
    Blend a blue-yellow-red rendering of the map over a (C, H, W) image in [0, 1].

    ``alpha`` is the weight of the heatmap; 0 gives the input back.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if image.ndim != 3 or image.shape[0] not in (1, 3) or image.shape[1:] != heatmap.values.shape:
        raise ShapeMismatchError(
            "overlay", f"image has shape {image.shape}, heatmap covers {heatmap.values.shape}"
        )
    base = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    if base.shape[0] == 1:
        background = Image.fromarray(base[0]).convert("RGB")
    else:
        background = Image.fromarray(np.ascontiguousarray(np.transpose(base, (1, 2, 0))))
    gray = Image.fromarray(np.round(np.clip(heatmap.values, 0.0, 1.0) * 255).astype(np.uint8))
    colored = ImageOps.colorize(gray, black="blue", mid="yellow", white="red")
    return Image.blend(background, colored, alpha)


def save_overlay(
    heatmap: Heatmap, image: np.ndarray, directory: Union[str, Path], stem: str, alpha: float = 0.5
) -> Path:
    """Write ``overlay_heatmap`` as ``<stem>_overlay.png``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{stem}_overlay.png"
    overlay_heatmap(heatmap, image, alpha).save(path, format="PNG")
    return path
