# models/metric_record.py
from sqlalchemy import Column, Float, ForeignKey, Integer, String
from sqlalchemy.orm import relationship

from weakalign_det.db.session import Base


class MetricRecord(Base):
    __tablename__ = "metric_records"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id", ondelete="CASCADE"), nullable=False, index=True)

    metric = Column(String(16), nullable=False)
    dx = Column(Integer, nullable=False, default=0)
    dy = Column(Integer, nullable=False, default=0)
    angle = Column(Integer, nullable=True)
    value = Column(Float, nullable=False)

    run = relationship("Run", back_populates="metrics")
