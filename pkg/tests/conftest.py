"""
Global pytest configuration and shared fixtures.
"""
import numpy as np
import pandas as pd
import pytest
from PIL import Image
from sqlmodel import Session, SQLModel, create_engine

from ..src.lanmsff.adapters import DatabaseAdapter, MemoryAdapter
from ..src.lanmsff.core import TrainingLog
from ..src.lanmsff.model import LANMSFFConfig, build_model
from ..src.lanmsff.records import EpochRecord

MINI_WIDTHS = (6, 12, 6, 12)


def epoch_row(run_id="run-a", epoch=1, **overrides):
    row = {
        "run_id": run_id,
        "epoch": epoch,
        "train_loss": 1.9 - 0.1 * epoch,
        "train_acc": 0.2 + 0.01 * epoch,
        "val_loss": 1.95 - 0.1 * epoch,
        "val_acc": 0.18 + 0.01 * epoch,
        "lr": 0.001,
    }
    row.update(overrides)
    return row


def fer_pixels(rng):
    return " ".join(str(v) for v in rng.integers(0, 256, size=48 * 48))


@pytest.fixture
def sample_record_data():
    """One epoch of one run."""
    return epoch_row()


@pytest.fixture
def db_session():
    """Temporary database session for tests."""
    engine = create_engine("sqlite:///:memory:")
    SQLModel.metadata.create_all(engine)

    session = Session(engine)
    yield session
    session.close()
    engine.dispose()


@pytest.fixture
def memory_adapter():
    """MemoryAdapter configured for tests."""
    return MemoryAdapter(EpochRecord)


@pytest.fixture
def db_adapter(db_session):
    """DatabaseAdapter configured for tests."""
    return DatabaseAdapter(EpochRecord, db_session)


@pytest.fixture
def training_log():
    return TrainingLog()


@pytest.fixture
def default_config():
    return LANMSFFConfig()


@pytest.fixture
def mini_config():
    """Small enough for finite-difference checks over the whole network."""
    return LANMSFFConfig(block_widths=MINI_WIDTHS, input_size=16, num_classes=3, dropout_rate=0.0)


@pytest.fixture
def mini_model(mini_config):
    return build_model(mini_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def fer_csv(tmp_path):
    """Twelve-row FER-2013 CSV: 6 train, 3 val, 3 test, labels cycling 0..6."""
    rng = np.random.default_rng(7)
    usages = ["Training"] * 6 + ["PublicTest"] * 3 + ["PrivateTest"] * 3
    frame = pd.DataFrame(
        {
            "emotion": [i % 7 for i in range(12)],
            "pixels": [fer_pixels(rng) for _ in range(12)],
            "Usage": usages,
        }
    )
    path = tmp_path / "fer2013.csv"
    frame.to_csv(path, index=False)
    return path


@pytest.fixture
def ferplus_votes(tmp_path):
    """Votes aligned with ``fer_csv``: rows 3 and 7 are unknown / not-a-face."""
    columns = ["neutral", "happiness", "surprise", "sadness", "anger", "disgust", "fear", "contempt", "unknown", "NF"]
    usages = ["Training"] * 6 + ["PublicTest"] * 3 + ["PrivateTest"] * 3
    rows = []
    for i in range(12):
        votes = [0] * 10
        if i == 3:
            votes[8] = 6
        elif i == 7:
            votes[9] = 10
        else:
            votes[i % 8] = 7
            votes[(i + 1) % 8] = 3
        rows.append({"Usage": usages[i], "Image name": f"fer{i:07d}.png", **dict(zip(columns, votes))})
    path = tmp_path / "fer2013new.csv"
    pd.DataFrame(rows).to_csv(path, index=False)
    return path


@pytest.fixture
def kdef_dir(tmp_path):
    """Two actors, every emotion at the frontal and both half-profile angles, plus one stray file."""
    root = tmp_path / "KDEF"
    rng = np.random.default_rng(11)
    for actor in ("AF01", "AM02"):
        folder = root / actor
        folder.mkdir(parents=True)
        for emotion in ("AF", "AN", "DI", "HA", "NE", "SA", "SU"):
            for angle in ("HL", "S", "HR"):
                pixels = rng.integers(0, 256, size=(40, 30, 3), dtype=np.uint8)
                Image.fromarray(pixels).save(folder / f"{actor}{emotion}{angle}.JPG", format="JPEG")
    Image.fromarray(np.zeros((8, 8), dtype=np.uint8)).save(root / "AF01XXS.JPG", format="JPEG")
    return root
