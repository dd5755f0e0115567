import pytest
from pydantic import ValidationError

from weakalign_det.detector.inference import DetectionResult
from weakalign_det.evaluation.matching import ALL_OBJECTS
from weakalign_det.evaluation.plots import plot_mr_curve, plot_shift_surface
from weakalign_det.evaluation.report import (
    HTML_FILE,
    REPORT_FILE,
    SCHEMA_FILE,
    EvalReport,
    SurfacePoint,
    build_report,
    read_report,
    write_report,
)
from weakalign_det.evaluation.robustness import Metric


@pytest.fixture
def perfect(scenes):
    return [
        [DetectionResult(box=o.ref_box, class_label=o.class_label, confidence=1.0) for o in s.objects if o.ref_box]
        for s in scenes
    ]


def test_miss_rate_report(scenes, perfect):
    report = build_report(perfect, scenes, Metric.MR, ALL_OBJECTS, dataset="data/")
    assert report.headline == report.mr == report.mr_ref == 0.0
    assert report.mr_curve is not None and len(report.mr_curve.samples) == 9
    assert report.mr_by_subset["all"] == 0.0
    assert report.dataset == "data/"
    assert report.n_scenes == len(scenes)


def test_map_report(scenes, perfect):
    report = build_report(perfect, scenes, Metric.MAP2D)
    assert report.map2d == report.headline == 1.0
    assert report.per_class_ap == {"pedestrian": 1.0}
    assert report.mr is None


def test_write_and_read(scenes, perfect, tmp_path):
    report = build_report(perfect, scenes, Metric.MR, ALL_OBJECTS)
    report.shift_surface = [SurfacePoint(dx=0, dy=0, value=0.0), SurfacePoint(dx=1, dy=0, value=0.2)]
    path = write_report(report, tmp_path)
    assert path == tmp_path / REPORT_FILE
    assert (tmp_path / SCHEMA_FILE).exists()
    assert "Evaluation: mr" in (tmp_path / HTML_FILE).read_text()
    loaded = read_report(path)
    assert loaded == report
    assert loaded.surface_value(1, 0) == 0.2
    assert loaded.surface_value(5, 5) is None


def test_rejects_out_of_range_metric():
    with pytest.raises(ValidationError):
        EvalReport(metric="mr", mr=1.5)


def test_plots(scenes, perfect, tmp_path):
    report = build_report(perfect, scenes, Metric.MR, ALL_OBJECTS)
    report.shift_surface = [
        SurfacePoint(dx=dx, dy=dy, value=0.1 * abs(dx)) for dx in (-1, 0, 1) for dy in (-1, 0, 1)
    ]
    assert plot_shift_surface(report, tmp_path / "surface.png").stat().st_size > 0
    assert plot_mr_curve({"model": report}, tmp_path / "mr.png").exists()


def test_surface_plot_needs_a_surface(tmp_path):
    with pytest.raises(ValueError):
        plot_shift_surface(EvalReport(metric="mr"), tmp_path / "surface.png")
