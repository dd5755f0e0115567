"""Evaluation report document, its JSON schema and the HTML summary."""
from __future__ import annotations

import json
import logging
from collections.abc import Sequence
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from jinja2 import Environment, PackageLoader, select_autoescape
from pydantic import BaseModel, ConfigDict, Field

from weakalign_det.core.config import APP_VERSION
from weakalign_det.core.errors import MetricError
from weakalign_det.data.schemas import Modality, ScenePair
from weakalign_det.detector.inference import DetectionResult
from weakalign_det.evaluation.average_precision import (
    BoxDims,
    ground_truth_2d,
    ground_truth_3d,
    mean_average_precision,
)
from weakalign_det.evaluation.matching import EvalFilter
from weakalign_det.evaluation.miss_rate import modality_mr, mr_by_subset
from weakalign_det.evaluation.robustness import Metric, score_detections, scored

logger = logging.getLogger(__name__)

REPORT_FILE = "eval_report.json"
SCHEMA_FILE = "eval_report.schema.json"
HTML_FILE = "eval_report.html"


class SurfacePoint(BaseModel):
    dx: int
    dy: int
    value: float = Field(ge=0.0, le=1.0)


class DegradationPoint(BaseModel):
    dx: int
    dy: int
    r_d: float


class DirectionalEntry(BaseModel):
    angle: int
    origin: float = Field(ge=0.0, le=1.0)
    mean: float = Field(ge=0.0, le=1.0)
    std: float = Field(ge=0.0)
    b_u1: int | None = None  # None: beyond the scanned range
    b_u2: int | None = None
    max_px: int
    bounds_from: str | None = None  # checkpoint whose bounds define the shifts


class MissRateCurve(BaseModel):
    fppi: list[float]
    miss_rate: list[float]
    samples: list[float]


class EvalReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: int = 1
    version: str = APP_VERSION
    created_at: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))
    checkpoint: str | None = None
    config_hash: str | None = None
    dataset: str | None = None
    n_scenes: int = 0
    metric: str
    headline: float | None = Field(default=None, ge=0.0, le=1.0)
    mr: float | None = Field(default=None, ge=0.0, le=1.0)
    mr_ref: float | None = Field(default=None, ge=0.0, le=1.0)
    mr_sensed: float | None = Field(default=None, ge=0.0, le=1.0)
    map2d: float | None = Field(default=None, ge=0.0, le=1.0)
    map3d: float | None = Field(default=None, ge=0.0, le=1.0)
    per_class_ap: dict[str, float] = Field(default_factory=dict)
    mr_by_subset: dict[str, float | None] = Field(default_factory=dict)
    mr_curve: MissRateCurve | None = None
    shift_surface: list[SurfacePoint] = Field(default_factory=list)
    degradation: list[DegradationPoint] = Field(default_factory=list)
    directional: list[DirectionalEntry] = Field(default_factory=list)
    shift_prediction_mae_px: float | None = Field(default=None, ge=0.0)
    proposal_recall: float | None = Field(default=None, ge=0.0, le=1.0)

    def surface_value(self, dx: int, dy: int) -> float | None:
        for p in self.shift_surface:
            if p.dx == dx and p.dy == dy:
                return p.value
        return None


def write_report(report: EvalReport, out_dir: str | Path, html: bool = True) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / REPORT_FILE
    path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    (out_dir / SCHEMA_FILE).write_text(
        json.dumps(EvalReport.model_json_schema(), indent=2), encoding="utf-8"
    )
    if html:
        (out_dir / HTML_FILE).write_text(render_html(report), encoding="utf-8")
    logger.info("Wrote evaluation report %s", path)
    return path


def read_report(path: str | Path) -> EvalReport:
    return EvalReport.model_validate_json(Path(path).read_text(encoding="utf-8"))


def render_html(report: EvalReport) -> str:
    env = Environment(
        loader=PackageLoader("weakalign_det", "templates"),
        autoescape=select_autoescape(["html", "j2"]),
    )
    template = env.get_template("report.html.j2")
    return template.render(report=report)


def build_report(
    detections: Sequence[Sequence[DetectionResult]],
    scenes: Sequence[ScenePair],
    metric: Metric,
    eval_filter: EvalFilter | None = None,
    **provenance: Any,
) -> EvalReport:
    """Headline ``metric`` plus every companion number the dataset supports."""
    eval_filter = eval_filter or EvalFilter()
    values: dict[str, Any] = {}
    headline = score_detections(detections, scenes, metric, eval_filter)

    if metric in (Metric.MR, Metric.MR_REF, Metric.MR_SENSED):
        dets = [scored(d) for d in detections]
        ref = modality_mr(dets, scenes, Modality.REF, eval_filter)
        values["mr"] = ref.mr
        values["mr_ref"] = ref.mr
        values["mr_curve"] = MissRateCurve(fppi=ref.fppi, miss_rate=ref.miss_rate, samples=ref.samples)
        try:
            sensed = modality_mr(dets, scenes, Modality.SENSED, eval_filter)
            values["mr_sensed"] = sensed.mr
        except MetricError:
            logger.warning("No counted ground truth in the sensed modality")
        values["mr_by_subset"] = mr_by_subset(dets, scenes, Modality.REF, eval_filter)
    else:
        dims = BoxDims.D3 if metric is Metric.MAP3D else BoxDims.D2
        gts = ground_truth_3d(scenes) if dims is BoxDims.D3 else ground_truth_2d(scenes)
        ap = mean_average_precision([scored(d, dims) for d in detections], gts, dims=dims)
        values[metric.value] = ap.map
        values["per_class_ap"] = ap.per_class

    return EvalReport(
        metric=metric.value,
        headline=headline,
        n_scenes=len(scenes),
        **values,
        **provenance,
    )
