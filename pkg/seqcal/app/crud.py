import json
import logging
import math
from typing import List, Optional

from sqlalchemy import select
from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.orm import Session

from . import models
from .exceptions import DatabaseError, NotFoundError

logger = logging.getLogger(__name__)


def record_run(db: Session, cfg, result) -> models.RunRecord:
    """
    Persist the summary and acquisitions of a finished (or aborted) run.

    Args:
        db: SQLAlchemy Session to use for the operation.
        cfg: The RunConfig the run was started with.
        result: The RunResult returned (or attached to a SimulatorFailure).

    Returns:
        The created models.RunRecord.

    Raises:
        DatabaseError: On SQLAlchemy commit/DB failure.
    """
    run = models.RunRecord(
        problem=cfg.problem.name,
        acquisition=cfg.acquisition,
        mode=cfg.mode,
        seed=int(cfg.seed),
        n0=int(cfg.n0),
        n=int(cfg.n),
        batch=int(cfg.batch),
        final_mad=result.final_mad,
        wall_time=float(result.wall_time),
        status="aborted" if result.aborted else "ok",
    )
    for i, rec in enumerate(result.acquisitions, start=1):
        run.acquisitions.append(models.AcquisitionRow(
            eval_index=i,
            stage=int(rec.stage),
            generation=int(rec.generation),
            theta=json.dumps([float(v) for v in rec.theta]),
            eta=json.dumps([float(v) for v in rec.eta]),
            score=None if math.isnan(rec.score) else float(rec.score),
        ))

    db.add(run)
    try:
        db.commit()
        db.refresh(run)
        logger.info("Recorded run id=%s problem=%s acquisition=%s seed=%s",
                    run.id, run.problem, run.acquisition, run.seed)
    except SQLAlchemyError as exc:
        db.rollback()
        logger.exception("Database error while recording run: %s", exc)
        raise DatabaseError("Failed to record run") from exc
    return run


def get_run(db: Session, run_id: int) -> models.RunRecord:
    """
    Return a run by primary key.

    Raises:
        NotFoundError: If no run exists with the given id.
    """
    run = db.get(models.RunRecord, run_id)
    if run is None:
        logger.debug("Run not found by id=%s", run_id)
        raise NotFoundError(f"Run id={run_id} not found")
    return run


def list_runs(db: Session, problem: Optional[str] = None, acquisition: Optional[str] = None,
              limit: int = 100, offset: int = 0) -> List[models.RunRecord]:
    """
    Return a page of runs ordered by id, optionally filtered.

    Args:
        db: SQLAlchemy Session to use.
        problem: Only runs of this problem.
        acquisition: Only runs with this acquisition kind.
        limit: Maximum number of runs to return (clamped to 1..1000).
        offset: Number of rows to skip (must be >= 0).

    Raises:
        ValueError: If limit or offset are not integers.
    """
    try:
        limit = max(1, min(1000, int(limit)))
        offset = max(0, int(offset))
    except (TypeError, ValueError):
        raise ValueError("limit and offset must be integers")

    stmt = select(models.RunRecord)
    if problem is not None:
        stmt = stmt.where(models.RunRecord.problem == problem)
    if acquisition is not None:
        stmt = stmt.where(models.RunRecord.acquisition == acquisition)
    stmt = stmt.order_by(models.RunRecord.id).limit(limit).offset(offset)
    results = db.execute(stmt).scalars().all()
    logger.debug("Listed runs limit=%s offset=%s returned=%s", limit, offset, len(results))
    return results


def delete_run(db: Session, run_id: int) -> None:
    """
    Delete a run and its acquisitions.

    Raises:
        NotFoundError: If no run exists with the given id.
        DatabaseError: On SQLAlchemy commit/DB failure.
    """
    run = get_run(db, run_id)
    try:
        db.delete(run)
        db.commit()
        logger.info("Deleted run id=%s", run_id)
    except SQLAlchemyError as exc:
        db.rollback()
        logger.exception("Database error while deleting run id=%s: %s", run_id, exc)
        raise DatabaseError("Failed to delete run") from exc
