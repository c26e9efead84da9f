"""
Dataset ingestion: FER-2013, FERPlus, KDEF and the pose subsets.

Every parser emits ``Sample`` objects holding a (C, 64, 64) image that was
bilinearly resized and min-max normalized per image to [0, 1]. Output order
is input order.

Label schemas:
    FER-2013 / KDEF (7): angry, disgust, fear, happy, sad, surprise, neutral
    FERPlus (8): neutral, happy, surprise, sad, angry, disgust, fear, contempt

The FER-2013 index order is the one whose per-class totals reproduce the
published distribution (angry 4953, disgust 547, fear 5121, happy 8989,
sad 6077, surprise 4002, neutral 6198).
"""

import logging
import re
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import IO, Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image
from pydantic import BaseModel, ConfigDict, model_validator
from scipy import ndimage

from .exceptions import DatasetError, DatasetFormatError, UnknownIdentifierError

logger = logging.getLogger(__name__)

IMAGE_SIZE = 64
FER_SIDE = 48
FER_PIXELS = FER_SIDE * FER_SIDE

SplitTag = Literal["train", "val", "test"]
Source = Union[str, Path, IO[str]]


class LabelSchema(BaseModel):
    """Ordered class names; the index of a name is its label."""

    model_config = ConfigDict(frozen=True)

    name: str
    classes: Tuple[str, ...]

    @model_validator(mode="after")
    def _unique(self) -> "LabelSchema":
        if len(set(self.classes)) != len(self.classes):
            raise ValueError(f"class names of schema {self.name!r} are not unique")
        return self

    def __len__(self) -> int:
        return len(self.classes)

    def index(self, class_name: str) -> int:
        return self.classes.index(class_name)


FER2013_SCHEMA = LabelSchema(
    name="fer2013", classes=("angry", "disgust", "fear", "happy", "sad", "surprise", "neutral")
)
FERPLUS_SCHEMA = LabelSchema(
    name="ferplus",
    classes=("neutral", "happy", "surprise", "sad", "angry", "disgust", "fear", "contempt"),
)
KDEF_SCHEMA = FER2013_SCHEMA

SCHEMAS = {"fer2013": FER2013_SCHEMA, "ferplus": FERPLUS_SCHEMA, "kdef": KDEF_SCHEMA}


@dataclass(frozen=True)
class Sample:
    """
    One normalized image with its annotations.

    Attributes:
        image: (C, 64, 64) float array with values in [0, 1].
        label: Class index in the dataset's schema.
        pose: Head yaw in degrees (-90, -45, 0, 45, 90) or None when unknown.
        split: train, val or test.
        source_id: Stable identifier (``fer0000042``, KDEF stem, FERPlus image name).
        subsets: Named pose subsets the sample belongs to (e.g. ``>30``).
    """

    image: np.ndarray
    label: int
    pose: Optional[int]
    split: SplitTag
    source_id: str
    subsets: Tuple[str, ...] = field(default=())


@dataclass(frozen=True)
class VoteRecord:
    """FERPlus annotation: 10 tagger votes over 8 emotions plus unknown and not-a-face."""

    image_name: str
    votes: Tuple[int, ...]


# --------------------------------------------------------------------------
# Preprocessing
# --------------------------------------------------------------------------


def normalize_minmax(image: np.ndarray) -> np.ndarray:
    """Scale to [0, 1] per image; a constant image maps to all zeros."""
    image = np.asarray(image, dtype=np.float64)
    low, high = image.min(), image.max()
    if high == low:
        return np.zeros_like(image)
    return (image - low) / (high - low)


def resize(image: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """Bilinear resize of a (C, H, W) array to (C, size, size); values stay within the input range."""
    image = np.asarray(image, dtype=np.float64)
    _, h, w = image.shape
    if (h, w) == (size, size):
        return image.copy()
    out = ndimage.zoom(image, (1, size / h, size / w), order=1, mode="nearest")
    return np.clip(out, image.min(), image.max())


def prepare_image(image: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    return normalize_minmax(resize(image, size))


_USAGE = {"Training": "train", "PublicTest": "val", "PrivateTest": "test"}


def _read_csv(source: Source) -> pd.DataFrame:
    if isinstance(source, (str, Path)) and not Path(source).exists():
        raise DatasetError(f"dataset file {source} does not exist")
    return pd.read_csv(source, dtype=str, keep_default_na=False)


def _require_columns(frame: pd.DataFrame, columns: Iterable[str]) -> None:
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise DatasetFormatError(f"missing columns {missing}; found {list(frame.columns)}")


def _split_tag(usage: str, row: int) -> SplitTag:
    tag = _USAGE.get(usage.strip())
    if tag is None:
        raise DatasetFormatError(f"unknown usage {usage!r}", row=row)
    return tag  # type: ignore[return-value]


# --------------------------------------------------------------------------
# FER-2013
# --------------------------------------------------------------------------


def parse_fer_pixels(text: str, row: int) -> np.ndarray:
    tokens = text.split()
    if len(tokens) != FER_PIXELS:
        raise DatasetFormatError(f"expected {FER_PIXELS} pixels, got {len(tokens)}", row=row)
    try:
        values = np.array([int(token) for token in tokens], dtype=np.int64)
    except ValueError:
        bad = next(t for t in tokens if not t.lstrip("-").isdigit())
        raise DatasetFormatError(f"malformed pixel value {bad!r}", row=row) from None
    if values.min() < 0 or values.max() > 255:
        raise DatasetFormatError("pixel values must lie in 0..255", row=row)
    return values.reshape(FER_SIDE, FER_SIDE)


def parse_fer2013(source: Source, channels: int = 1) -> List[Sample]:
    """
    Parse the FER-2013 CSV (columns emotion, pixels, Usage).

    Row numbers in errors are 1-based file lines; the header is line 1.

    Raises:
        DatasetFormatError: wrong pixel count, label outside 0..6, malformed
            integer or unknown usage, naming the row.
    """
    frame = _read_csv(source)
    _require_columns(frame, ("emotion", "pixels", "Usage"))
    samples: List[Sample] = []
    for index, (emotion, pixels, usage) in enumerate(
        zip(frame["emotion"], frame["pixels"], frame["Usage"])
    ):
        row = index + 2
        try:
            label = int(emotion)
        except ValueError:
            raise DatasetFormatError(f"malformed label {emotion!r}", row=row) from None
        if not 0 <= label < len(FER2013_SCHEMA):
            raise DatasetFormatError(f"label {label} outside 0..{len(FER2013_SCHEMA) - 1}", row=row)
        grid = parse_fer_pixels(pixels, row)
        image = prepare_image(np.repeat(grid[None].astype(np.float64), channels, axis=0))
        samples.append(
            Sample(
                image=image,
                label=label,
                pose=None,
                split=_split_tag(usage, row),
                source_id=f"fer{index:07d}",
            )
        )
    _log_counts("fer2013", samples, FER2013_SCHEMA)
    return samples


def _log_counts(name: str, samples: Sequence[Sample], schema: LabelSchema) -> None:
    splits = pd.Series([s.split for s in samples]).value_counts().to_dict() if samples else {}
    labels = np.bincount([s.label for s in samples], minlength=len(schema)) if samples else []
    per_class = ", ".join(f"{c} {n}" for c, n in zip(schema.classes, labels))
    logger.info("%s: %d samples, splits %s, classes %s", name, len(samples), splits, per_class)


# --------------------------------------------------------------------------
# FERPlus
# --------------------------------------------------------------------------

FERPLUS_VOTE_COLUMNS = (
    "neutral",
    "happiness",
    "surprise",
    "sadness",
    "anger",
    "disgust",
    "fear",
    "contempt",
    "unknown",
    "NF",
)
FERPLUS_REFERENCE_SPLITS = {"train": 25_371, "val": 3_225, "test": 3_160}


def read_ferplus_votes(source: Source, vote_columns: Sequence[str] = FERPLUS_VOTE_COLUMNS) -> List[Tuple[str, str, VoteRecord]]:
    """(usage, image name, votes) per row of a FERPlus vote CSV."""
    frame = _read_csv(source)
    _require_columns(frame, ("Usage", "Image name", *vote_columns))
    rows = []
    columns = zip(frame["Usage"], frame["Image name"], *(frame[c] for c in vote_columns))
    for index, (usage, name, *raw) in enumerate(columns):
        try:
            votes = tuple(int(value) for value in raw)
        except ValueError:
            raise DatasetFormatError("malformed vote count", row=index + 2) from None
        if min(votes) < 0:
            raise DatasetFormatError("vote counts must be non-negative", row=index + 2)
        rows.append((usage, name, VoteRecord(name, votes)))
    return rows


def majority_label(votes: Sequence[int], emotion_count: int = 8) -> Optional[int]:
    """
    Argmax over all vote columns, ties to the lower index; None when the
    winner is unknown or not-a-face.
    """
    winner = int(np.argmax(votes))
    return winner if winner < emotion_count else None


def parse_ferplus(
    votes: Source,
    fer_samples: Sequence[Sample],
    vote_columns: Sequence[str] = FERPLUS_VOTE_COLUMNS,
) -> List[Sample]:
    """
    Relabel FER-2013 images with FERPlus majority votes (8 classes).

    Vote rows align with ``fer_samples`` by order. Samples whose majority is
    unknown or not-a-face, or whose image name is blank, are discarded.

    Raises:
        DatasetFormatError: the vote file and the image list differ in length.
    """
    rows = read_ferplus_votes(votes, vote_columns)
    if len(rows) != len(fer_samples):
        raise DatasetFormatError(
            f"vote file has {len(rows)} rows but {len(fer_samples)} FER-2013 images were given"
        )
    samples: List[Sample] = []
    discarded = 0
    for index, ((usage, name, record), fer) in enumerate(zip(rows, fer_samples)):
        label = majority_label(record.votes, len(FERPLUS_SCHEMA))
        if label is None or not name.strip():
            discarded += 1
            continue
        samples.append(
            replace(fer, label=label, split=_split_tag(usage, index + 2), source_id=name.strip())
        )
    counts = {tag: sum(1 for s in samples if s.split == tag) for tag in FERPLUS_REFERENCE_SPLITS}
    logger.info(
        "ferplus: kept %d, discarded %d; splits %s (reference %s)",
        len(samples), discarded, counts, FERPLUS_REFERENCE_SPLITS,
    )
    return samples


# --------------------------------------------------------------------------
# KDEF
# --------------------------------------------------------------------------

KDEF_EMOTIONS = {
    "AF": "fear",
    "AN": "angry",
    "DI": "disgust",
    "HA": "happy",
    "NE": "neutral",
    "SA": "sad",
    "SU": "surprise",
}
KDEF_ANGLES = {"FL": -90, "HL": -45, "S": 0, "HR": 45, "FR": 90}
_KDEF_NAME = re.compile(r"^(?P<session>[AB])(?P<gender>[FM])(?P<actor>\d{2})(?P<emotion>[A-Z]{2})(?P<angle>[A-Z]{1,2})$")
_IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp"}


@dataclass(frozen=True)
class KdefName:
    session: str
    gender: str
    actor: int
    label: int
    pose: int

    @property
    def actor_id(self) -> str:
        return f"{self.gender}{self.actor:02d}"


def parse_kdef_name(stem: str) -> Optional[KdefName]:
    """Decode a KDEF file stem such as ``AF01ANFL``; None for any unrecognised code."""
    match = _KDEF_NAME.match(stem.upper())
    if match is None:
        return None
    emotion = KDEF_EMOTIONS.get(match["emotion"])
    pose = KDEF_ANGLES.get(match["angle"])
    if emotion is None or pose is None:
        return None
    return KdefName(
        session=match["session"],
        gender=match["gender"],
        actor=int(match["actor"]),
        label=KDEF_SCHEMA.index(emotion),
        pose=pose,
    )


def load_image(path: Path, channels: int = 1) -> np.ndarray:
    """Decode an image file as a (C, H, W) float array; RGB is converted to luminance for C=1."""
    with Image.open(path) as img:
        converted = img.convert("L" if channels == 1 else "RGB")
        array = np.asarray(converted, dtype=np.float64)
    return array[None] if channels == 1 else array.transpose(2, 0, 1)


def parse_kdef(directory: Union[str, Path], channels: int = 1) -> List[Sample]:
    """
    Load every KDEF image below ``directory`` in sorted path order.

    Files whose names do not decode are skipped with a warning.
    """
    root = Path(directory)
    if not root.is_dir():
        raise DatasetError(f"KDEF directory {root} does not exist")
    samples: List[Sample] = []
    skipped = 0
    for path in sorted(p for p in root.rglob("*") if p.suffix.lower() in _IMAGE_SUFFIXES):
        name = parse_kdef_name(path.stem)
        if name is None:
            logger.warning("skipping %s: unrecognised KDEF name", path.name)
            skipped += 1
            continue
        samples.append(
            Sample(
                image=prepare_image(load_image(path, channels)),
                label=name.label,
                pose=name.pose,
                split="train",
                source_id=path.stem.upper(),
            )
        )
    _log_counts("kdef", samples, KDEF_SCHEMA)
    if skipped:
        logger.info("kdef: skipped %d files", skipped)
    return samples


def kdef_actor_groups(samples: Sequence[Sample]) -> List[str]:
    """Actor id per sample, for actor-disjoint folds."""
    groups = []
    for sample in samples:
        name = parse_kdef_name(sample.source_id)
        groups.append(name.actor_id if name is not None else sample.source_id)
    return groups


# --------------------------------------------------------------------------
# Pose subsets
# --------------------------------------------------------------------------


def read_identifiers(source: Source) -> List[str]:
    if isinstance(source, (str, Path)):
        text = Path(source).read_text(encoding="utf-8")
    else:
        text = source.read()
    return [line.strip() for line in text.splitlines() if line.strip()]


def pose_subset(
    samples: Sequence[Sample], index: Source, threshold: int, strict: bool = False
) -> List[Sample]:
    """
    Samples listed in a pose-index file, tagged with subset ``>{threshold}``.

    Unknown identifiers are reported and skipped, or raise with ``strict``.

    Raises:
        UnknownIdentifierError: with ``strict``, when an identifier matches no sample.
    """
    wanted = read_identifiers(index)
    by_id: Dict[str, int] = {s.source_id: i for i, s in enumerate(samples)}
    missing = [ident for ident in wanted if ident not in by_id]
    if missing:
        if strict:
            raise UnknownIdentifierError(f"{len(missing)} identifiers not found, first {missing[0]!r}")
        logger.warning("pose subset >%d: %d identifiers not found (first %r)", threshold, len(missing), missing[0])
    tag = f">{threshold}"
    chosen = sorted({by_id[ident] for ident in wanted if ident in by_id})
    subset = [replace(samples[i], subsets=samples[i].subsets + (tag,)) for i in chosen]
    logger.info("pose subset %s: %d samples", tag, len(subset))
    return subset


def check_subset_containment(inner: Sequence[Sample], outer: Sequence[Sample]) -> None:
    """Raise when a stricter pose subset (e.g. >45) is not contained in a looser one (>30)."""
    extra = {s.source_id for s in inner} - {s.source_id for s in outer}
    if extra:
        raise DatasetError(f"{len(extra)} samples of the stricter subset are missing from the looser one")


def tag_subsets(samples: Sequence[Sample], subsets: Sequence[Sequence[Sample]]) -> List[Sample]:
    """Copy subset tags from ``pose_subset`` results back onto the full sample list."""
    tags: Dict[str, Tuple[str, ...]] = {}
    for subset in subsets:
        for sample in subset:
            tags[sample.source_id] = tuple(dict.fromkeys(tags.get(sample.source_id, ()) + sample.subsets))
    return [replace(s, subsets=tags[s.source_id]) if s.source_id in tags else s for s in samples]


# --------------------------------------------------------------------------
# Arrays and the binary cache
# --------------------------------------------------------------------------


def select_split(samples: Sequence[Sample], split: SplitTag) -> List[Sample]:
    return [s for s in samples if s.split == split]


def to_arrays(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    """(N, C, 64, 64) images and (N,) integer labels."""
    if not samples:
        return np.zeros((0, 1, IMAGE_SIZE, IMAGE_SIZE)), np.zeros(0, dtype=np.int64)
    return np.stack([s.image for s in samples]), np.array([s.label for s in samples], dtype=np.int64)


CACHE_MAGIC = b"LNMSFFS1"
_CACHE_HEADER = struct.Struct("<8sIBH")
_UNKNOWN_POSE = -32768
_SPLIT_CODES = {"train": 0, "val": 1, "test": 2}
_SPLIT_NAMES = {code: name for name, code in _SPLIT_CODES.items()}


def write_cache(samples: Sequence[Sample], path: Union[str, Path]) -> None:
    """
    Binary sample cache: header (magic, count, channels, side), then per
    sample id length u16 + utf-8 id, label u8, pose i16, split u8 and
    C x 64 x 64 little-endian float32 values.
    """
    channels = samples[0].image.shape[0] if samples else 1
    parts = [_CACHE_HEADER.pack(CACHE_MAGIC, len(samples), channels, IMAGE_SIZE)]
    for sample in samples:
        encoded = sample.source_id.encode("utf-8")
        pose = _UNKNOWN_POSE if sample.pose is None else sample.pose
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<BhB", sample.label, pose, _SPLIT_CODES[sample.split]))
        parts.append(np.ascontiguousarray(sample.image, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))
    logger.info("cached %d samples to %s", len(samples), path)


def read_cache(path: Union[str, Path]) -> List[Sample]:
    blob = Path(path).read_bytes()
    if len(blob) < _CACHE_HEADER.size:
        raise DatasetFormatError(f"sample cache {path} is truncated")
    magic, count, channels, side = _CACHE_HEADER.unpack_from(blob)
    if magic != CACHE_MAGIC:
        raise DatasetFormatError(f"{path} is not a sample cache (magic {magic!r})")
    offset = _CACHE_HEADER.size
    pixels = channels * side * side
    samples: List[Sample] = []
    try:
        for _ in range(count):
            (length,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            source_id = blob[offset : offset + length].decode("utf-8")
            offset += length
            label, pose, split = struct.unpack_from("<BhB", blob, offset)
            offset += 4
            image = np.frombuffer(blob, dtype="<f4", count=pixels, offset=offset).reshape(channels, side, side)
            offset += 4 * pixels
            samples.append(
                Sample(
                    image=image.astype(np.float64),
                    label=label,
                    pose=None if pose == _UNKNOWN_POSE else pose,
                    split=_SPLIT_NAMES[split],  # type: ignore[arg-type]
                    source_id=source_id,
                )
            )
    except (struct.error, ValueError, KeyError) as exc:
        raise DatasetFormatError(f"sample cache {path} is corrupt after {len(samples)} samples: {exc}") from exc
    return samples


DatasetKind = Literal["fer2013", "ferplus", "kdef", "cache"]


def load_samples(
    kind: DatasetKind,
    path: Union[str, Path],
    votes: Optional[Union[str, Path]] = None,
    channels: int = 1,
) -> List[Sample]:
    """Dispatch to the parser for ``kind``; FERPlus needs the FER-2013 CSV at ``path`` and ``votes``."""
    if kind == "fer2013":
        return parse_fer2013(path, channels)
    if kind == "ferplus":
        if votes is None:
            raise DatasetError("ferplus needs the FER-2013 CSV and a vote file")
        return parse_ferplus(votes, parse_fer2013(path, channels))
    if kind == "kdef":
        return parse_kdef(path, channels)
    if kind == "cache":
        if not Path(path).exists():
            raise DatasetError(f"sample cache {path} does not exist")
        return read_cache(path)
    raise DatasetError(f"unknown dataset kind {kind!r}")
