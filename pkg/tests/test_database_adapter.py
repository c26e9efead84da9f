"""
Specific tests for DatabaseAdapter.
"""
import pytest

from .conftest import epoch_row
from .test_adapters import AdapterTestSuite
from ..src.lanmsff.records import EpochRecord


class TestDatabaseAdapter(AdapterTestSuite):
    """Specific tests for DatabaseAdapter."""

    @pytest.fixture
    def adapter(self, db_adapter):
        """Implements the fixture required by AdapterTestSuite."""
        return db_adapter

    def test_session_commit_on_append(self, adapter, sample_record_data):
        """Test that append commits to the database."""
        record = adapter.append(sample_record_data)

        # A fresh session sees the committed row
        new_session = adapter.session.__class__(adapter.session.bind)
        retrieved = new_session.get(EpochRecord, record.id)

        assert retrieved is not None
        assert retrieved.train_loss == pytest.approx(sample_record_data["train_loss"])
        new_session.close()

    def test_refresh_after_append(self, adapter, sample_record_data):
        """Test that refresh brings the id generated by the DB."""
        record = adapter.append(sample_record_data)

        assert isinstance(record.id, int)

    def test_caller_supplied_id_is_ignored(self, adapter):
        first = adapter.append({**epoch_row(), "id": 50})
        second = adapter.append({**epoch_row(epoch=2), "id": 50})

        assert [first.id, second.id] == [1, 2]

    def test_record_survives_rollback(self, adapter, sample_record_data):
        """Committed epochs are kept when the session later rolls back."""
        record = adapter.append(sample_record_data)
        adapter.session.rollback()

        assert adapter.get(record.id) is not None
