"""
Tests for RecordLog, RecordLogMeta and the TrainingLog exports.
"""
import json

import pandas as pd
import pytest

from .conftest import epoch_row
from ..src.lanmsff.core import RecordLog, TrainingLog
from ..src.lanmsff.exceptions import RecordTypeRequiredError
from ..src.lanmsff.records import EpochRecord


class TestRecordLogMeta:
    """Tests for the RecordLogMeta metaclass."""

    def test_model_extraction_from_generic(self):
        class EpochLog(RecordLog[EpochRecord]):
            pass

        assert EpochLog.model is EpochRecord

    def test_raises_error_without_model(self):
        with pytest.raises(RecordTypeRequiredError):
            class BadLog(RecordLog):
                pass

    def test_training_log_is_bound_to_epoch_records(self):
        assert TrainingLog.model is EpochRecord


class TestStorageSelection:
    def test_memory_storage_default(self):
        assert TrainingLog().storage_type() == "memory"

    def test_database_storage_with_session(self, db_session):
        assert TrainingLog(session=db_session).storage_type() == "database"

    def test_explicit_memory_storage_ignores_session(self, db_session):
        assert TrainingLog(session=db_session, storage="memory").storage_type() == "memory"

    def test_explicit_database_storage_requires_session(self):
        with pytest.raises(ValueError, match="Database backend requires a session"):
            TrainingLog(storage="database")


class TestTrainingLogExports:
    """CSV and JSON exports of one run."""

    @pytest.fixture
    def filled_log(self, training_log):
        for epoch in range(1, 4):
            training_log.append(epoch_row("run-a", epoch))
        training_log.append(epoch_row("run-b", 1, lr=0.0005))
        return training_log

    def test_rows_exclude_storage_keys(self, filled_log):
        rows = filled_log.rows("run-a")

        assert len(rows) == 3
        assert list(rows[0]) == TrainingLog.COLUMNS

    def test_csv_has_fixed_column_order(self, filled_log, tmp_path):
        path = tmp_path / "log.csv"
        text = filled_log.to_csv("run-a", str(path))

        assert text.splitlines()[0] == "epoch,train_loss,train_acc,val_loss,val_acc,lr"
        assert path.read_text(encoding="utf-8") == text
        frame = pd.read_csv(path)
        assert frame["epoch"].tolist() == [1, 2, 3]

    def test_csv_values_round_trip_exactly(self, filled_log, tmp_path):
        path = tmp_path / "log.csv"
        filled_log.to_csv("run-a", str(path))

        frame = pd.read_csv(path, float_precision="round_trip")
        assert frame["val_loss"].tolist() == [r["val_loss"] for r in filled_log.rows("run-a")]

    def test_json_is_array_of_records(self, filled_log, tmp_path):
        path = tmp_path / "log.json"
        filled_log.to_json("run-b", str(path))

        records = json.loads(path.read_text(encoding="utf-8"))
        assert len(records) == 1
        assert records[0]["lr"] == pytest.approx(0.0005)
        assert list(records[0]) == TrainingLog.COLUMNS

    def test_unknown_run_exports_header_only(self, training_log):
        assert training_log.to_csv("nothing").strip() == ",".join(TrainingLog.COLUMNS)


def test_database_log_round_trip(db_session):
    """A log written through one session is readable through a fresh log on the same engine."""
    log = TrainingLog(session=db_session)
    for epoch in range(1, 6):
        log.append(epoch_row("persisted", epoch))

    reopened = TrainingLog(session=db_session.__class__(db_session.bind))
    assert reopened.count() == 5
    assert [r["epoch"] for r in reopened.rows("persisted")] == [1, 2, 3, 4, 5]
