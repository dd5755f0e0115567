# cli/main.py
"""
weakalign-det command line.

    weakalign-det gen-data --out data/ [--config cfg.yaml] [--set generator.n_scenes=50]
    weakalign-det train    --data data/ --out runs/full [--no-rfa --no-jitter --no-caf --no-asc]
    weakalign-det train    --data data/ --out runs/sigma --jitter-grid
    weakalign-det eval     --checkpoint runs/full/model.pt --data data/ --out runs/full/eval --metric mr
    weakalign-det sweep    --checkpoint runs/full/model.pt --baseline runs/base/model.pt
                           --data data/ --out runs/sweep --grid --directional
    weakalign-det plot     --report runs/sweep/eval_report.json --out figures/

train, eval and sweep take --swap-modalities to use the sensed modality as the reference.

Exit codes: 0 success, 2 invalid input (configuration, data, metric), 1 unexpected failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from pathlib import Path
from typing import Any

from pydantic import TypeAdapter, ValidationError
from sqlalchemy.orm import Session, sessionmaker

from weakalign_det.core.config import APP_VERSION, settings
from weakalign_det.core.errors import ConfigurationError, MetricError, WeakAlignError
from weakalign_det.core.logging import configure_logging
from weakalign_det.core.run_config import (
    RESOLVED_CONFIG_FILE,
    RunConfig,
    load_run_config,
    write_resolved_config,
)
from weakalign_det.data.dataset import load_dataset, save_dataset
from weakalign_det.data.generator import generate_dataset
from weakalign_det.data.schemas import ScenePair
from weakalign_det.data.shifting import swap_modalities
from weakalign_det.db.ledger import MetricRow, finish_run, record_metrics, start_run
from weakalign_det.db.session import SessionLocal, init_ledger, make_engine
from weakalign_det.detector.checkpoint import load_checkpoint
from weakalign_det.detector.inference import DetectionResult, detect_batch
from weakalign_det.detector.model import TwoStreamDetector
from weakalign_det.evaluation.plots import plot_mr_curve, plot_shift_surface
from weakalign_det.evaluation.report import (
    DegradationPoint,
    DirectionalEntry,
    EvalReport,
    SurfacePoint,
    build_report,
    read_report,
    write_report,
)
from weakalign_det.evaluation.robustness import (
    Metric,
    degradation_rate,
    grid_shifts,
    metric_kind,
    proposal_recall,
    shift_prediction_error,
)
from weakalign_det.worker.runner import (
    Bounds,
    ParallelEvaluator,
    directional_bounds,
    run_directional,
    run_sweep,
)
from weakalign_det.worker.trainer import Ablation, train_model

logger = logging.getLogger("weakalign_det.cli")

DETECTIONS_FILE = "detections.json"
SURFACE_PLOT = "shift_surface.png"
MR_CURVE_PLOT = "mr_fppi.png"

_detections_adapter = TypeAdapter(dict[str, list[DetectionResult]])


# --- helpers ---


@contextmanager
def ledger_run(
    factory: sessionmaker, command: str, out_dir: Path, cfg: RunConfig | None = None
) -> Iterator[tuple]:
    """Open a ``runs`` row for ``command`` and close it as finished or failed."""
    db: Session = factory()
    config_hash = cfg.model.config_hash() if cfg is not None else None
    run = start_run(db, command, config_hash, cfg.seed if cfg is not None else None, str(out_dir))
    outcome: dict[str, Any] = {}
    try:
        yield db, run, outcome
    except Exception as e:
        db.rollback()
        finish_run(db, run, error=f"{type(e).__name__}: {e}")
        raise
    else:
        finish_run(db, run, final_loss=outcome.get("final_loss"))
    finally:
        db.close()


def _session_factory(url: str | None) -> sessionmaker:
    if url is None:
        init_ledger()
        return SessionLocal
    engine = make_engine(url)
    init_ledger(engine)
    return sessionmaker(bind=engine, autoflush=False, autocommit=False, future=True)


def _run_config(args: argparse.Namespace, fallback: Path | None = None) -> RunConfig:
    path = args.config
    if path is None and fallback is not None and fallback.exists():
        logger.info("Using %s", fallback)
        path = fallback
    cfg = load_run_config(path, args.overrides)
    if args.workers is not None:
        cfg = cfg.model_copy(update={"workers": args.workers})
    return cfg


def _load_scenes(args: argparse.Namespace) -> list[ScenePair]:
    data_dir: Path = args.data
    if not data_dir.is_dir():
        raise ConfigurationError(f"dataset directory {data_dir} not found")
    scenes = load_dataset(data_dir)
    if not scenes:
        raise ConfigurationError(f"dataset {data_dir} holds no scenes")
    if args.swap_modalities:
        logger.info("Using the sensed modality of %s as the reference", data_dir)
        scenes = [swap_modalities(s) for s in scenes]
    return scenes


def _load_detections(path: Path, scenes: Sequence[ScenePair]) -> list[list[DetectionResult]]:
    if not path.exists():
        raise ConfigurationError(f"detections file {path} not found")
    by_scene = _detections_adapter.validate_json(path.read_bytes())
    return [by_scene.get(s.scene_id, []) for s in scenes]


def _save_detections(
    path: Path, scenes: Sequence[ScenePair], results: Sequence[Sequence[DetectionResult]]
) -> None:
    payload = {s.scene_id: list(r) for s, r in zip(scenes, results, strict=True)}
    path.write_bytes(_detections_adapter.dump_json(payload, indent=2))


def _detect_all(
    model: TwoStreamDetector, scenes: Sequence[ScenePair], threshold: float
) -> list[list[DetectionResult]]:
    results: list[list[DetectionResult]] = []
    for start in range(0, len(scenes), 32):
        results += detect_batch(scenes[start : start + 32], model, threshold)
    return results


# --- commands ---


def cmd_gen_data(args: argparse.Namespace, factory: sessionmaker) -> int:
    cfg = _run_config(args)
    out_dir: Path = args.out
    with ledger_run(factory, "gen-data", out_dir, cfg):
        scenes = generate_dataset(cfg.generator, cfg.seed, cfg.workers)
        summary = save_dataset(scenes, out_dir)
        write_resolved_config(cfg, out_dir)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _with_jitter_sigma(cfg: RunConfig, sigma: float) -> RunConfig:
    jitter = cfg.jitter.model_copy(update={"sigma0": sigma, "sigma1": sigma})
    return cfg.model_copy(update={"jitter": jitter})


def cmd_train(args: argparse.Namespace, factory: sessionmaker) -> int:
    data_dir: Path = args.data
    cfg = _run_config(args, fallback=data_dir / RESOLVED_CONFIG_FILE)
    ablation = Ablation(
        no_rfa=args.no_rfa, no_jitter=args.no_jitter, no_caf=args.no_caf, no_asc=args.no_asc
    )
    out_dir: Path = args.out
    scenes = _load_scenes(args)

    if args.jitter_grid:
        if ablation.no_rfa or ablation.no_jitter:
            raise ConfigurationError("--jitter-grid needs RoI jitter and region alignment enabled")
        runs = [
            (_with_jitter_sigma(cfg, sigma), out_dir / f"sigma_{sigma:g}")
            for sigma in cfg.train.jitter_sigma_grid
        ]
    else:
        runs = [(cfg, out_dir)]

    for run_cfg, run_dir in runs:
        with ledger_run(factory, "train", run_dir, run_cfg) as (_, _, outcome):
            write_resolved_config(run_cfg, run_dir)
            result = train_model(run_cfg, scenes, run_dir, ablation)
            outcome["final_loss"] = result.final_loss
        if args.jitter_grid:
            print(f"sigma {run_cfg.jitter.sigma0:g} final_loss {result.final_loss:.6f}")
        else:
            print(f"final_loss {result.final_loss:.6f}")
    return 0


def _evaluation_model(args: argparse.Namespace) -> TwoStreamDetector | None:
    if args.checkpoint is None:
        return None
    return load_checkpoint(args.checkpoint)


def cmd_eval(args: argparse.Namespace, factory: sessionmaker) -> int:
    cfg = _run_config(args)
    metric = Metric(args.metric or cfg.eval.metric)
    out_dir: Path = args.out
    scenes = _load_scenes(args)
    model = _evaluation_model(args)
    if model is None and args.detections is None:
        raise ConfigurationError("eval needs --checkpoint or --detections")

    with ledger_run(factory, "eval", out_dir, cfg) as (db, run, _):
        write_resolved_config(cfg, out_dir)
        if args.detections is not None:
            results = _load_detections(args.detections, scenes)
        else:
            if metric is Metric.MAP3D and not model.config.use_3d:  # type: ignore[union-attr]
                raise ConfigurationError("map3d needs a model trained with the 3D head")
            results = _detect_all(model, scenes, cfg.eval.score_threshold)  # type: ignore[arg-type]
            _save_detections(out_dir / DETECTIONS_FILE, scenes, results)

        provenance: dict[str, Any] = {"dataset": str(args.data)}
        if model is not None:
            provenance["checkpoint"] = str(args.checkpoint)
            provenance["config_hash"] = model.config.config_hash()
            if model.config.use_rfa:
                provenance["shift_prediction_mae_px"] = shift_prediction_error(model, scenes).mae_px
            try:
                provenance["proposal_recall"] = proposal_recall(model, scenes)
            except MetricError:
                logger.warning("Proposal recall undefined: no ground truth")
        report = build_report(results, scenes, metric, cfg.eval.filter, **provenance)
        write_report(report, out_dir)
        if report.mr_curve is not None:
            plot_mr_curve({"model": report}, out_dir / MR_CURVE_PLOT)
        record_metrics(db, run, [(metric.value, 0, 0, None, report.headline)])  # type: ignore[list-item]

    print(f"{metric.value} {report.headline:.4f}")
    return 0


def _sweep_report(
    evaluator: ParallelEvaluator,
    args: argparse.Namespace,
    cfg: RunConfig,
    checkpoint: Path,
    bounds: Bounds | None = None,
    bounds_from: str | None = None,
) -> tuple[EvalReport, list[MetricRow]]:
    rows: list[MetricRow] = []
    metric = evaluator.metric
    kind = metric_kind(metric)
    origin = evaluator((0, 0))
    report = EvalReport(
        metric=metric.value,
        headline=origin,
        checkpoint=str(checkpoint),
        config_hash=evaluator.model.config.config_hash(),
        dataset=str(args.data),
        n_scenes=len(evaluator.scenes),
    )
    rows.append((metric.value, 0, 0, None, origin))

    if args.grid:
        surface = run_sweep(evaluator, grid_shifts(args.radius or cfg.eval.grid_radius))
        report.shift_surface = [SurfacePoint(dx=dx, dy=dy, value=v) for (dx, dy), v in surface.items()]
        rows += [(metric.value, dx, dy, None, v) for (dx, dy), v in surface.items()]
        if origin > 0:
            report.degradation = [
                DegradationPoint(dx=dx, dy=dy, r_d=degradation_rate(origin, v, kind))
                for (dx, dy), v in surface.items()
            ]
        else:
            logger.warning("Origin %s is 0; degradation rates are undefined", metric.value)

    if args.directional:
        max_px = cfg.eval.max_px
        for entry in run_directional(evaluator, cfg.eval.angles, max_px, bounds):
            report.directional.append(
                DirectionalEntry(
                    angle=entry.angle,
                    origin=entry.origin,
                    mean=entry.mean,
                    std=entry.std,
                    b_u1=entry.bounds[0],
                    b_u2=entry.bounds[1],
                    max_px=max_px,
                    bounds_from=bounds_from,
                )
            )
            rows += [
                (metric.value, dx, dy, entry.angle, v)
                for (dx, dy), v in zip(entry.shifts, entry.values, strict=True)
            ]
    return report, rows


def cmd_sweep(args: argparse.Namespace, factory: sessionmaker) -> int:
    if not (args.grid or args.directional):
        raise ConfigurationError("sweep needs --grid and/or --directional")
    cfg = _run_config(args)
    metric = Metric(args.metric or cfg.eval.metric)
    out_dir: Path = args.out
    scenes = _load_scenes(args)

    runs = {"model": args.checkpoint}
    if args.baseline is not None:
        runs["baseline"] = args.baseline

    reports: dict[str, EvalReport] = {}
    with ledger_run(factory, "sweep", out_dir, cfg) as (db, run, _):
        write_resolved_config(cfg, out_dir)
        evaluators = {
            name: ParallelEvaluator(
                load_checkpoint(checkpoint),
                scenes,
                metric,
                cfg.eval.filter,
                cfg.eval.score_threshold,
                cfg.workers,
            )
            for name, checkpoint in runs.items()
        }

        # every model is scored on the shifts placed by the reference (baseline) bounds
        bounds: Bounds | None = None
        reference = "baseline" if "baseline" in evaluators else "model"
        if args.directional:
            if reference == "model":
                logger.warning("No --baseline given; directional shifts use the model's own bounds")
            bounds = directional_bounds(evaluators[reference], cfg.eval.angles, cfg.eval.max_px)

        for name, evaluator in evaluators.items():
            report, rows = _sweep_report(
                evaluator, args, cfg, runs[name], bounds, str(runs[reference])
            )
            target = out_dir if name == "model" else out_dir / name
            write_report(report, target)
            if report.shift_surface:
                plot_shift_surface(report, target / SURFACE_PLOT)
            record_metrics(db, run, rows)
            reports[name] = report

    for name, report in reports.items():
        for entry in report.directional:
            print(
                f"{name} angle {entry.angle:3d}: "
                f"origin {entry.origin:.4f} mean {entry.mean:.4f} std {entry.std:.4f}"
            )
        print(f"{name} {metric.value} {report.headline:.4f}")
    return 0


def cmd_plot(args: argparse.Namespace, factory: sessionmaker) -> int:
    out_dir: Path = args.out
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = {path.parent.name or str(path): read_report(path) for path in args.report}
    written = []
    for name, report in reports.items():
        if report.shift_surface:
            written.append(plot_shift_surface(report, out_dir / f"{name}_{SURFACE_PLOT}"))
    if any(r.mr_curve is not None for r in reports.values()):
        written.append(plot_mr_curve(reports, out_dir / MR_CURVE_PLOT))
    if not written:
        raise ConfigurationError("none of the reports carries a shift surface or a miss-rate curve")
    for path in written:
        print(path)
    return 0


# --- parser ---


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="run configuration YAML")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a configuration value (repeatable)",
    )
    parser.add_argument(
        "--workers", type=int, default=None, help=f"worker processes (default {settings.workers})"
    )
    parser.add_argument("--out", type=Path, required=True, help="output directory")


def _add_data(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", type=Path, required=True, help="dataset directory")
    parser.add_argument(
        "--swap-modalities",
        action="store_true",
        help="use the sensed modality as the reference (RGB-T only)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weakalign-det", description=__doc__.splitlines()[1].strip())
    parser.add_argument("--version", action="version", version=f"%(prog)s {APP_VERSION}")
    parser.add_argument(
        "--log-level", default=None, help=f"logging level (default {settings.log_level})"
    )
    parser.add_argument("--ledger", default=None, help="experiment ledger database URL")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    _add_common(gen)
    gen.set_defaults(handler=cmd_gen_data)

    train = sub.add_parser("train", help="train the two-stream detector")
    _add_common(train)
    _add_data(train)
    train.add_argument("--no-rfa", action="store_true", help="disable region feature alignment")
    train.add_argument("--no-jitter", action="store_true", help="disable RoI jitter")
    train.add_argument("--no-caf", action="store_true", help="disable confidence-aware fusion")
    train.add_argument(
        "--no-asc", action="store_true", help="disable the adjacent similarity constraint"
    )
    train.add_argument(
        "--jitter-grid",
        action="store_true",
        help="train one model per train.jitter_sigma_grid value into OUT/sigma_<value>",
    )
    train.set_defaults(handler=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint or stored detections")
    _add_common(ev)
    _add_data(ev)
    ev.add_argument("--checkpoint", type=Path, default=None)
    ev.add_argument("--metric", choices=[m.value for m in Metric], default=None)
    ev.add_argument(
        "--detections",
        type=Path,
        default=None,
        help="score a detections JSON instead of running a model",
    )
    ev.set_defaults(handler=cmd_eval)

    sweep = sub.add_parser("sweep", help="shift-robustness protocols")
    _add_common(sweep)
    _add_data(sweep)
    sweep.add_argument("--checkpoint", type=Path, required=True)
    sweep.add_argument("--metric", choices=[m.value for m in Metric], default=None)
    sweep.add_argument("--grid", action="store_true", help="full shift grid of +-radius pixels")
    sweep.add_argument("--radius", type=int, default=None)
    sweep.add_argument("--directional", action="store_true", help="per-direction mean and std protocol")
    sweep.add_argument(
        "--baseline",
        type=Path,
        default=None,
        help="also sweep this checkpoint; its weak-alignment bounds place the directional shifts",
    )
    sweep.set_defaults(handler=cmd_sweep)

    plot = sub.add_parser("plot", help="figures from stored reports")
    plot.add_argument("--report", type=Path, action="append", required=True)
    plot.add_argument("--out", type=Path, required=True)
    plot.set_defaults(handler=cmd_plot)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)

    try:
        factory = _session_factory(args.ledger)
        return args.handler(args, factory)
    except (WeakAlignError, ValidationError) as e:
        print(f"weakalign-det {args.command}: {e}", file=sys.stderr)
        return 2
    except Exception:
        logger.exception("weakalign-det %s failed", args.command)
        return 1


if __name__ == "__main__":
    sys.exit(main())
