"""
Specific tests for MemoryAdapter.
Inherits the base suite and adds implementation-specific tests.
"""
import pytest

from .conftest import epoch_row
from .test_adapters import AdapterTestSuite
from ..src.lanmsff.adapters import MemoryAdapter
from ..src.lanmsff.records import EpochRecord


class TestMemoryAdapter(AdapterTestSuite):
    """Specific tests for MemoryAdapter."""

    @pytest.fixture
    def adapter(self, memory_adapter):
        """Implements the fixture required by AdapterTestSuite."""
        return memory_adapter

    def test_memory_isolation(self):
        """Test that different instances are isolated."""
        adapter1 = MemoryAdapter(EpochRecord)
        adapter2 = MemoryAdapter(EpochRecord)

        adapter1.append(epoch_row())

        assert adapter1.count() == 1
        assert adapter2.count() == 0

    def test_id_auto_increment(self, adapter):
        """Test that IDs auto-increment correctly."""
        first = adapter.append(epoch_row(epoch=1))
        second = adapter.append(epoch_row(epoch=2))

        assert first.id == 1
        assert second.id == 2

    def test_caller_supplied_id_is_ignored(self, adapter):
        """Ids follow insertion order whatever the caller passes."""
        record = adapter.append({**epoch_row(), "id": 100})
        assert record.id == 1

        assert adapter.append(epoch_row(epoch=2)).id == 2

    def test_append_does_not_mutate_input(self, adapter, sample_record_data):
        adapter.append(sample_record_data)
        assert "id" not in sample_record_data
