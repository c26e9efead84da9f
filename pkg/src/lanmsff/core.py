from typing import Generic, List, Literal, Optional, TypeVar, get_args, get_origin

import pandas as pd
from sqlmodel import Session, SQLModel

from .adapters import DatabaseAdapter, MemoryAdapter
from .exceptions import RecordTypeRequiredError
from .records import EpochRecord

# Generic type variable bound to SQLModel for type safety
T = TypeVar("T", bound=SQLModel)


class RecordLogMeta(type):
    """
    Metaclass for RecordLog that extracts the record type from the generic
    parameter (e.g. ``RecordLog[EpochRecord]``) and assigns it to the
    ``model`` class attribute.

    Raises:
        RecordTypeRequiredError: If no record type is found in the generic parameters
    """

    def __init__(cls, name, bases, dct):  # type: ignore[no-untyped-def]
        super().__init__(name, bases, dct)

        if name == "RecordLog":
            return

        if hasattr(cls, "__orig_bases__"):
            for orig_base in cls.__orig_bases__:
                origin = get_origin(orig_base)
                if hasattr(origin, "__name__") and origin.__name__ == "RecordLog":
                    args = get_args(orig_base)
                    if args:
                        cls.model = args[0]

        if not cls.model:
            raise RecordTypeRequiredError("RecordLog requires a record type to function correctly.")


class RecordLog(Generic[T], metaclass=RecordLogMeta):
    """
    Append-only log of SQLModel records over a pluggable storage backend.

    Type Parameters:
        T: The SQLModel record class this log stores

    Attributes:
        model: The record class extracted from the generic parameter
        adapter: The storage adapter holding the records

    Example:
        ```python
        class EpochLog(RecordLog[EpochRecord]):
            pass

        log = EpochLog()                      # memory
        log = EpochLog(session=db_session)    # database
        ```
    """

    # Set by the metaclass from the generic parameter
    model: type = None  # type: ignore[assignment]

    def __init__(
        self,
        session: Optional[Session] = None,
        storage: Optional[Literal["memory", "database"]] = None,
    ):
        """
        Args:
            session: SQLModel session (required for database storage)
            storage: "memory" or "database"; with neither argument the log
                lives in memory, with only a session it lives in the database

        Raises:
            ValueError: If database storage is selected but no session is provided
        """
        if storage == "memory":
            self.adapter = MemoryAdapter(self.model)
        elif storage == "database":
            if not session:
                raise ValueError("Database backend requires a session")
            self.adapter = DatabaseAdapter(self.model, session)
            self.session = session
        elif session is not None:
            self.adapter = DatabaseAdapter(self.model, session)
            self.session = session
        else:
            self.adapter = MemoryAdapter(self.model)

    def append(self, data: dict) -> T:
        """
        Validate and store one record at the end of the log.

        Example:
            ```python
            log.append({"run_id": "r1", "epoch": 1, "train_loss": 1.93, ...})
            ```
        """
        return self.adapter.append(data)

    def get(self, id: int) -> Optional[T]:
        return self.adapter.get(id)

    def list(self, skip: int = 0, limit: int = 100) -> List[T]:
        """
        Records in insertion order with pagination.

        Example:
            ```python
            first_page = log.list(limit=10)
            second_page = log.list(skip=10, limit=10)
            ```
        """
        return self.adapter.list(skip, limit)

    def for_run(self, run_id: str) -> List[T]:
        return self.adapter.for_run(run_id)

    def count(self) -> int:
        return self.adapter.count()

    def storage_type(self) -> str:
        """
        Current storage backend, "memory" or "database".
        """
        return type(self.adapter).__name__.replace("Adapter", "").lower()


class TrainingLog(RecordLog[EpochRecord]):
    """
    Per-epoch history of training runs.

    Exports keep the column order epoch, train_loss, train_acc, val_loss,
    val_acc, lr.
    """

    COLUMNS = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr"]

    def rows(self, run_id: str) -> List[dict]:
        return [record.row() for record in self.for_run(run_id)]

    def frame(self, run_id: str) -> pd.DataFrame:
        return pd.DataFrame(self.rows(run_id), columns=self.COLUMNS)

    def to_csv(self, run_id: str, path: Optional[str] = None) -> str:
        """CSV text of one run; also written to ``path`` when given."""
        text = self.frame(run_id).to_csv(index=False, float_format="%.17g")
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as handle:
                handle.write(text)
        return text

    def to_json(self, run_id: str, path: Optional[str] = None) -> str:
        """JSON array of one run's records; also written to ``path`` when given."""
        text = self.frame(run_id).to_json(orient="records", double_precision=15, indent=2)
        if path is not None:
            with open(path, "w", encoding="utf-8") as handle:
                handle.write(text)
        return text
