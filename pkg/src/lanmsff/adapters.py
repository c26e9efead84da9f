"""
Run-log storage adapters.

The adapter pattern keeps the log API the same whatever holds the records:

- LogAdapter: abstract interface
- MemoryAdapter: records kept in a Python list (default, tests, one-off runs)
- DatabaseAdapter: records persisted through a SQLModel session (run databases)

Adapters are append-only: a training log is history, so there is no update
or delete.

Example:
    ```python
    memory_adapter = MemoryAdapter(EpochRecord)
    record = memory_adapter.append({"run_id": "a", "epoch": 1, ...})

    db_adapter = DatabaseAdapter(EpochRecord, session)
    record = db_adapter.append({"run_id": "a", "epoch": 1, ...})
    ```
"""

from abc import ABC, abstractmethod
from typing import List, Optional, TypeVar

from sqlmodel import Session, SQLModel, func, select

# Generic type variable bound to SQLModel for type safety across adapters
T = TypeVar("T", bound=SQLModel)


class LogAdapter(ABC):
    """
    Abstract base class for run-log storage adapters.

    Attributes:
        model: The SQLModel record class this adapter stores
    """

    def __init__(self, model_class: type[T]):
        self.model = model_class

    @abstractmethod
    def append(self, data: dict) -> T:
        """
        Validate ``data`` as a record and store it at the end of the log.

        Raises:
            ValidationError: If the data doesn't match the record schema
        """

    @abstractmethod
    def get(self, id: int) -> Optional[T]:
        """The record with this id, or None."""

    @abstractmethod
    def list(self, skip: int, limit: int) -> List[T]:
        """Records in insertion order, paginated."""

    @abstractmethod
    def for_run(self, run_id: str) -> List[T]:
        """All records of one run, in insertion order."""

    @abstractmethod
    def count(self) -> int:
        """Total number of stored records."""


class MemoryAdapter(LogAdapter):
    """
    In-memory run log.

    Ids are assigned from an internal counter starting at 1. Not persistent
    and not thread-safe; one training thread owns it.

    Example:
        ```python
        adapter = MemoryAdapter(EpochRecord)
        adapter.append({"run_id": "r", "epoch": 1, "train_loss": 1.9, ...})
        adapter.list(0, 10)
        ```
    """

    def __init__(self, model_class: type[T]):
        super().__init__(model_class)
        self._data: List[T] = []
        self._counter: int = 1

    def append(self, data: dict) -> T:
        data = dict(data)
        # Caller-supplied ids are ignored: ids follow insertion order
        data["id"] = self._counter
        item = self.model.model_validate(data)
        self._counter += 1
        self._data.append(item)
        return item

    def get(self, id: int) -> Optional[T]:
        return next((item for item in self._data if item.id == id), None)

    def list(self, skip: int = 0, limit: int = 100) -> List[T]:
        return self._data[skip : skip + limit]

    def for_run(self, run_id: str) -> List[T]:
        return [item for item in self._data if item.run_id == run_id]

    def count(self) -> int:
        return len(self._data)


class DatabaseAdapter(LogAdapter):
    """
    SQLModel-backed run log.

    Every append is committed immediately so a crashed run keeps the epochs
    it finished. The session must be bound to an engine whose metadata
    includes the record table.

    Example:
        ```python
        from sqlmodel import create_engine, Session

        engine = create_engine("sqlite:///runs.db")
        SQLModel.metadata.create_all(engine)
        adapter = DatabaseAdapter(EpochRecord, Session(engine))
        ```
    """

    def __init__(self, model_class: type[T], session: Session):
        super().__init__(model_class)
        self.session = session

    def append(self, data: dict) -> T:
        data = {key: value for key, value in data.items() if key != "id"}
        item = self.model.model_validate(data)
        self.session.add(item)
        self.session.commit()
        self.session.refresh(item)  # database-assigned id
        return item

    def get(self, id: int) -> Optional[T]:
        return self.session.get(self.model, id)

    def list(self, skip: int = 0, limit: int = 100) -> List[T]:
        statement = select(self.model).order_by(self.model.id).offset(skip).limit(limit)
        return list(self.session.exec(statement).all())

    def for_run(self, run_id: str) -> List[T]:
        statement = select(self.model).where(self.model.run_id == run_id).order_by(self.model.id)
        return list(self.session.exec(statement).all())

    def count(self) -> int:
        statement = select(func.count()).select_from(self.model)
        return int(self.session.exec(statement).one())
