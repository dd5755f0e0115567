# db/ledger.py
"""Run bookkeeping: one ``runs`` row per CLI command plus its metric values."""
from __future__ import annotations

import logging
from collections.abc import Iterable
from datetime import datetime, timezone

from sqlalchemy.orm import Session

from weakalign_det.core.config import APP_VERSION
from weakalign_det.models import MetricRecord, Run, RunStatus

logger = logging.getLogger(__name__)

# (metric, dx, dy, angle, value)
MetricRow = tuple[str, int, int, int | None, float]


def start_run(
    db: Session,
    command: str,
    config_hash: str | None = None,
    seed: int | None = None,
    output_dir: str | None = None,
) -> Run:
    run = Run(
        command=command,
        config_hash=config_hash,
        seed=seed,
        version=APP_VERSION,
        output_dir=output_dir,
        status=RunStatus.RUNNING.value,
        started_at=datetime.now(timezone.utc),
    )
    db.add(run)
    db.commit()
    db.refresh(run)
    logger.debug("Opened run %d (%s)", run.id, command)
    return run


def record_metrics(db: Session, run: Run, rows: Iterable[MetricRow]) -> int:
    n = 0
    for metric, dx, dy, angle, value in rows:
        db.add(MetricRecord(run_id=run.id, metric=metric, dx=dx, dy=dy, angle=angle, value=value))
        n += 1
    db.commit()
    return n


def finish_run(
    db: Session,
    run: Run,
    final_loss: float | None = None,
    error: str | None = None,
) -> None:
    run.status = (RunStatus.FAILED if error else RunStatus.FINISHED).value
    run.finished_at = datetime.now(timezone.utc)
    if final_loss is not None:
        run.final_loss = final_loss
    if error:
        run.error_message = error[:500]
    db.commit()
    logger.debug("Closed run %d as %s", run.id, run.status)
