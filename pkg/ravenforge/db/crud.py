"""CRUD operations on the run registry.

All functions use the `with_session` decorator, so they open their own
session unless one is passed as `session=`.
"""

import hashlib
import json
from typing import Any

from sqlmodel import Session, col, select

from ravenforge.evaluation.metrics import RegimeReport

from .database import with_session
from .models import ReportRecord, Run


def canonical_json(manifest: dict[str, Any]) -> str:
    return json.dumps(manifest, sort_keys=True, separators=(",", ":"))


def manifest_hash(manifest: dict[str, Any]) -> str:
    """SHA-256 of the manifest's canonical JSON encoding."""
    return hashlib.sha256(canonical_json(manifest).encode("utf-8")).hexdigest()


@with_session
def create_run(session: Session, command: str, manifest: dict[str, Any], out: str) -> Run:
    """Record a finished run.

    Args:
        session: The database session
        command: Subcommand name
        manifest: Resolved configuration and input hashes of the run
        out: Output path of the run

    Returns:
        The created Run
    """
    run = Run(
        command=command,
        manifest_hash=manifest_hash(manifest),
        manifest=canonical_json(manifest),
        out=out,
    )
    session.add(run)
    session.commit()
    session.refresh(run)
    return run


@with_session
def record_report(session: Session, run_id: str, report: RegimeReport) -> ReportRecord:
    """Store an evaluation report under an existing run.

    Args:
        session: The database session
        run_id: Id of the run that produced the report
        report: The evaluation result

    Returns:
        The created ReportRecord

    Raises:
        ValueError: If no run with `run_id` exists
    """
    if session.get(Run, run_id) is None:
        raise ValueError(f"no run with id {run_id}")
    record = ReportRecord(run_id=run_id, **report.model_dump(mode="json"))
    session.add(record)
    session.commit()
    session.refresh(record)
    return record


@with_session
def get_run(session: Session, run_id: str) -> Run | None:
    return session.get(Run, run_id)


@with_session
def find_runs(session: Session, manifest_hash: str) -> list[Run]:
    """All runs whose manifest hashes to `manifest_hash`, oldest first."""
    statement = (
        select(Run).where(Run.manifest_hash == manifest_hash).order_by(col(Run.created_at))
    )
    return list(session.exec(statement).all())


@with_session
def list_reports(session: Session, latest_only: bool = True) -> list[RegimeReport]:
    """Stored reports as `RegimeReport`s, oldest first.

    Args:
        session: The database session
        latest_only: Keep only the newest report per (regime, variant)

    Returns:
        The reports
    """
    records = session.exec(select(ReportRecord).order_by(col(ReportRecord.created_at))).all()
    reports: dict[Any, RegimeReport] = {}
    for i, record in enumerate(records):
        key = (record.regime, record.variant) if latest_only else i
        reports.pop(key, None)
        reports[key] = RegimeReport(
            regime=record.regime,
            variant=record.variant,
            val_accuracy=record.val_accuracy,
            test_accuracy=record.test_accuracy,
            test_kappa=record.test_kappa,
            n_val=record.n_val,
            n_test=record.n_test,
        )
    return list(reports.values())
