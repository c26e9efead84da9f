"""
SQLModel tables for run records.
"""

from typing import Optional

from sqlmodel import Field, SQLModel


class EpochRecord(SQLModel, table=True):
    """
    One epoch of one training run.

    ``lr`` is the learning rate the epoch was trained with; a decay decided
    at the end of the epoch shows up in the next record.
    """

    id: Optional[int] = Field(default=None, primary_key=True)
    run_id: str = Field(index=True)
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float

    def row(self) -> dict:
        """The exported columns, without storage keys."""
        return self.model_dump(exclude={"id", "run_id"})
