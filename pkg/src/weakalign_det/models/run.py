# models/run.py
from datetime import datetime
from enum import Enum

from sqlalchemy import Column, DateTime, Float, Integer, String
from sqlalchemy.orm import relationship

from weakalign_det.db.session import Base


class RunStatus(str, Enum):
    RUNNING = "running"
    FINISHED = "finished"
    FAILED = "failed"


class Run(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    command = Column(String(32), nullable=False, index=True)
    config_hash = Column(String(64), nullable=True, index=True)
    seed = Column(Integer, nullable=True)
    version = Column(String(32), nullable=False)
    output_dir = Column(String(500), nullable=True)

    status = Column(String(16), nullable=False, default=RunStatus.RUNNING.value)
    final_loss = Column(Float, nullable=True)
    error_message = Column(String(500), nullable=True)

    started_at = Column(DateTime, default=datetime.utcnow, nullable=False)
    finished_at = Column(DateTime, nullable=True)

    metrics = relationship("MetricRecord", back_populates="run", cascade="all, delete-orphan")
