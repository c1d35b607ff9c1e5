from sqlmodel import Session

from ravenforge.db.models import ReportRecord, Run


def test_run_model(session: Session):
    """Test creating and retrieving a Run."""
    run = Run(command="gen", manifest_hash="abc", manifest="{}", out="data/neutral")
    session.add(run)
    session.commit()

    session.refresh(run)
    assert len(run.id) == 36
    assert run.command == "gen"
    assert run.created_at is not None
    assert isinstance(run.reports, list)
    assert len(run.reports) == 0


def test_report_record_model(session: Session):
    """Test a ReportRecord and its link back to the Run."""
    run = Run(command="eval", manifest_hash="abc", manifest="{}", out="report.json")
    session.add(run)
    session.commit()

    record = ReportRecord(
        run_id=run.id,
        regime="neutral",
        variant="vae_frozen",
        test_accuracy=0.642,
        test_kappa=0.591,
        n_test=200,
    )
    session.add(record)
    session.commit()

    session.refresh(record)
    session.refresh(run)
    assert record.run.id == run.id
    assert record.val_accuracy is None
    assert record.n_val == 0
    assert [r.id for r in run.reports] == [record.id]
