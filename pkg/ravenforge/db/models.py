"""Tables of the local run registry.

- Run: one CLI invocation, with its manifest and output location
- ReportRecord: one evaluation result, linked to the run that produced it
"""

import uuid
from datetime import datetime, timezone
from typing import Optional

from sqlmodel import Field, Relationship, SQLModel


def _now() -> datetime:
    return datetime.now(timezone.utc)


class Run(SQLModel, table=True):
    """A recorded CLI run.

    Attributes:
        id: Unique identifier of the run
        command: Subcommand name, e.g. 'train-vae'
        manifest_hash: SHA-256 of the canonical manifest JSON
        manifest: The manifest JSON itself
        out: Output path given to the command
        created_at: When the run finished
        reports: Evaluation reports produced by this run
    """

    id: str = Field(default_factory=lambda: str(uuid.uuid4()), primary_key=True)
    command: str = Field(index=True)
    manifest_hash: str = Field(index=True)
    manifest: str
    out: str
    created_at: datetime = Field(default_factory=_now)

    reports: list["ReportRecord"] = Relationship(back_populates="run")


class ReportRecord(SQLModel, table=True):
    """A stored evaluation report (one regime and variant).

    Attributes:
        id: Unique identifier of the record
        run_id: The run that produced the report
        regime: Generalization regime value, e.g. 'neutral'
        variant: Embedder variant value, e.g. 'vae_frozen'
        val_accuracy: Validation accuracy, if a validation split was scored
        test_accuracy: Test accuracy
        test_kappa: Chance-corrected test accuracy
        n_val: Number of validation problems
        n_test: Number of test problems
        created_at: When the record was stored
    """

    id: str = Field(default_factory=lambda: str(uuid.uuid4()), primary_key=True)
    run_id: str = Field(foreign_key="run.id", index=True)
    regime: str = Field(index=True)
    variant: str
    val_accuracy: float | None = None
    test_accuracy: float
    test_kappa: float
    n_val: int = 0
    n_test: int
    created_at: datetime = Field(default_factory=_now)

    run: Optional[Run] = Relationship(back_populates="reports")
