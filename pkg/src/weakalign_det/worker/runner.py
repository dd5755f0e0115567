# worker/runner.py
"""
Data-parallel shift-pattern execution.

A :class:`ParallelEvaluator` is a drop-in shift evaluator whose ``prefetch``
spreads the metric computation for many shifts over a process pool; every
worker holds its own copy of the model and the scenes.
"""
from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from concurrent.futures import ProcessPoolExecutor, as_completed

from weakalign_det.core.errors import ConfigurationError, MetricError
from weakalign_det.data.schemas import ScenePair
from weakalign_det.detector.model import TwoStreamDetector
from weakalign_det.evaluation.matching import EvalFilter
from weakalign_det.evaluation.robustness import (
    DIRECTIONS,
    DetectorEvaluator,
    DirectionalStats,
    Metric,
    Shift,
    directional_shifts,
    directional_stats,
    metric_kind,
    weak_aligned_bound,
)

logger = logging.getLogger(__name__)

Bounds = dict[int, tuple[int | None, int | None]]

_worker_evaluator: DetectorEvaluator | None = None


def _init_worker(
    model: TwoStreamDetector,
    scenes: list[ScenePair],
    metric: Metric,
    eval_filter: EvalFilter,
    score_threshold: float,
) -> None:
    global _worker_evaluator
    import torch

    torch.set_num_threads(1)
    _worker_evaluator = DetectorEvaluator(model, scenes, metric, eval_filter, score_threshold)


def _evaluate_shift(shift: Shift) -> float:
    if _worker_evaluator is None:
        raise RuntimeError("worker process was not initialized")
    return _worker_evaluator(shift)


class ParallelEvaluator(DetectorEvaluator):
    def __init__(
        self,
        model: TwoStreamDetector,
        scenes: Sequence[ScenePair],
        metric: Metric = Metric.MR,
        eval_filter: EvalFilter | None = None,
        score_threshold: float = 0.0,
        workers: int = 1,
    ):
        super().__init__(model, scenes, metric, eval_filter, score_threshold)
        self.workers = workers

    def prefetch(self, shifts: Iterable[Shift]) -> None:
        """Compute every shift not yet cached; failures are logged and raised together."""
        pending = sorted({(int(s[0]), int(s[1])) for s in shifts} - set(self._cache))
        if not pending:
            return
        if self.workers <= 1:
            for shift in pending:
                self(shift)
            return

        logger.info("Evaluating %d shift patterns with %d workers...", len(pending), self.workers)
        failed: list[Shift] = []
        with ProcessPoolExecutor(
            max_workers=self.workers,
            initializer=_init_worker,
            initargs=(self.model, self.scenes, self.metric, self.eval_filter, self.score_threshold),
        ) as pool:
            futures = {pool.submit(_evaluate_shift, shift): shift for shift in pending}
            for future in as_completed(futures):
                shift = futures[future]
                try:
                    self._cache[shift] = future.result()
                except Exception:
                    logger.exception("Error while evaluating shift %s", shift)
                    failed.append(shift)

        if failed:
            raise MetricError(f"{len(failed)} shift pattern(s) failed: {sorted(failed)}")


def run_sweep(evaluator: DetectorEvaluator, shifts: Sequence[Shift]) -> dict[Shift, float]:
    if isinstance(evaluator, ParallelEvaluator):
        evaluator.prefetch(shifts)
    return {tuple(s): evaluator(tuple(s)) for s in shifts}  # type: ignore[misc]


def _check_angles(angles: Sequence[int]) -> None:
    unknown = [a for a in angles if a not in DIRECTIONS]
    if unknown:
        raise ConfigurationError(
            f"unknown direction(s) {unknown}, expected some of {sorted(DIRECTIONS)}"
        )


def directional_bounds(evaluator: DetectorEvaluator, angles: Sequence[int], max_px: int) -> Bounds:
    """Weak-alignment bounds of ``evaluator`` for each angle."""
    _check_angles(angles)
    kind = metric_kind(evaluator.metric)
    if isinstance(evaluator, ParallelEvaluator):
        line: list[Shift] = [(0, 0)]
        for angle in angles:
            dx, dy = DIRECTIONS[angle]
            line += [(sign * k * dx, sign * k * dy) for sign in (1, -1) for k in range(1, max_px + 1)]
        evaluator.prefetch(line)
    return {angle: weak_aligned_bound(evaluator, DIRECTIONS[angle], max_px, kind) for angle in angles}


def run_directional(
    evaluator: DetectorEvaluator,
    angles: Sequence[int],
    max_px: int,
    bounds: Bounds | None = None,
) -> list[DirectionalStats]:
    """Directional statistics for each angle.

    ``bounds`` fixes the shift design, normally the bounds of the reference model, so
    that several models are scored on the same shifts. Without it the bounds of
    ``evaluator`` itself are used.
    """
    _check_angles(angles)
    if bounds is None:
        bounds = directional_bounds(evaluator, angles, max_px)
    missing = [a for a in angles if a not in bounds]
    if missing:
        raise ConfigurationError(f"no weak-alignment bounds for angle(s) {missing}")

    stats = []
    for angle in angles:
        if isinstance(evaluator, ParallelEvaluator):
            evaluator.prefetch([(0, 0), *directional_shifts(angle, bounds[angle], max_px)])
        entry = directional_stats(evaluator, angle, bounds[angle], max_px)
        logger.info(
            "angle %d: origin %.4f mean %.4f std %.4f bounds %s",
            angle,
            entry.origin,
            entry.mean,
            entry.std,
            bounds[angle],
        )
        stats.append(entry)
    return stats
