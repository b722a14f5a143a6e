import json
from datetime import datetime, timezone

from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text
from sqlalchemy.orm import declarative_base, relationship

Base = declarative_base()


def _utcnow():
    return datetime.now(timezone.utc)


class RunRecord(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, autoincrement=True)
    problem = Column(String(100), nullable=False, index=True)
    acquisition = Column(String(20), nullable=False, index=True)
    mode = Column(String(20), nullable=False)
    seed = Column(Integer, nullable=False)
    n0 = Column(Integer, nullable=False)
    n = Column(Integer, nullable=False)
    batch = Column(Integer, nullable=False, default=1)
    final_mad = Column(Float, nullable=True)
    wall_time = Column(Float, nullable=False, default=0.0)
    status = Column(String(20), nullable=False, default="ok")
    created_at = Column(DateTime(timezone=True), nullable=False, default=_utcnow)

    acquisitions = relationship(
        "AcquisitionRow",
        back_populates="run",
        cascade="all, delete-orphan",
        order_by="AcquisitionRow.eval_index",
    )

    def to_dict(self) -> dict:
        return {
            "id": int(self.id),
            "problem": self.problem,
            "acquisition": self.acquisition,
            "mode": self.mode,
            "seed": self.seed,
            "n0": self.n0,
            "n": self.n,
            "batch": self.batch,
            "final_mad": self.final_mad,
            "wall_time": self.wall_time,
            "status": self.status,
            "created_at": self.created_at.isoformat() if self.created_at else None,
        }


class AcquisitionRow(Base):
    __tablename__ = "acquisitions"

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(Integer, ForeignKey("runs.id", ondelete="CASCADE"), nullable=False, index=True)
    eval_index = Column(Integer, nullable=False)
    stage = Column(Integer, nullable=False)
    generation = Column(Integer, nullable=False)
    theta = Column(Text, nullable=False)
    eta = Column(Text, nullable=False)
    score = Column(Float, nullable=True)

    run = relationship("RunRecord", back_populates="acquisitions")

    def to_dict(self) -> dict:
        return {
            "eval_index": self.eval_index,
            "stage": self.stage,
            "generation": self.generation,
            "theta": json.loads(self.theta),
            "eta": json.loads(self.eta),
            "score": self.score,
        }
