# models/__init__.py
from .run import Run, RunStatus
from .metric_record import MetricRecord

__all__ = [
    "Run",
    "RunStatus",
    "MetricRecord",
]
