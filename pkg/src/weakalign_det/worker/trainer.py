# worker/trainer.py
"""
Training loop of the two-stream detector.

One step runs the whole pipeline on a minibatch of scenes:

  - RPN on the fused feature map (anchor loss)
  - proposals plus the reference ground truth, labelled and subsampled
  - sensed RoIs jittered, shift targets corrected by the jitter
  - RFA / CAF / head forward, ASC on a 4-neighbour window
  - weighted multi-task loss plus CAF auxiliary and 3D terms
"""
from __future__ import annotations

import json
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor
from torch.utils.data import DataLoader

from weakalign_det.alignment.jitter import JitterConfig, sample_jitter, sample_neighbour_offsets
from weakalign_det.alignment.losses import LossBreakdown, LossConfig, RoIBatchTargets, multi_task_loss
from weakalign_det.alignment.sampling import BACKGROUND, LabelAssignment, assign_labels, sample_minibatch
from weakalign_det.core.config import settings
from weakalign_det.core.errors import ConfigurationError, DepthInitError
from weakalign_det.core.run_config import RunConfig, TrainConfig
from weakalign_det.data.dataset import PairedSceneDataset, SceneTargets, scene_images, scene_targets
from weakalign_det.data.generator import ModalityPair
from weakalign_det.data.schemas import ScenePair
from weakalign_det.detector.checkpoint import save_checkpoint
from weakalign_det.detector.inference import crop_depth
from weakalign_det.detector.model import ModelConfig, TwoStreamDetector
from weakalign_det.detector.rpn import rpn_loss
from weakalign_det.evaluation.robustness import shift_prediction_error
from weakalign_det.geometry.box3d import (
    Box3D,
    encode_3d_targets,
    init_box3d,
    load_class_dims,
    loss_3d,
)
from weakalign_det.geometry.boxes import apply_shift_tensor, tensor_to_boxes

logger = logging.getLogger(__name__)

TRAIN_LOG_FILE = "train_log.jsonl"
CHECKPOINT_FILE = "model.pt"


@dataclass(frozen=True)
class Ablation:
    no_rfa: bool = False
    no_jitter: bool = False
    no_caf: bool = False
    no_asc: bool = False

    @classmethod
    def baseline(cls) -> Ablation:
        return cls(no_rfa=True, no_jitter=True, no_caf=True, no_asc=True)


@dataclass
class TrainResult:
    model: TwoStreamDetector
    final_loss: float
    steps: int
    history: list[dict[str, float]] = field(default_factory=list)


def seed_everything(seed: int, threads: int = 1) -> torch.Generator:
    torch.manual_seed(seed)
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)
    return torch.Generator().manual_seed(seed)


def resolve_model_config(cfg: RunConfig, ablation: Ablation = Ablation()) -> ModelConfig:
    """Model section with the input shape, classes and module switches taken from the run."""
    width, height = cfg.generator.canvas
    return cfg.model.model_copy(
        update={
            "image_size": (height, width),
            "class_names": tuple(cfg.generator.scene.classes),
            "use_3d": cfg.generator.scene.modality_pair is ModalityPair.RGBD,
            "use_rfa": cfg.model.use_rfa and not ablation.no_rfa,
            "use_caf": cfg.model.use_caf and not ablation.no_caf,
        }
    )


def split_scenes(
    scenes: Sequence[ScenePair], val_fraction: float
) -> tuple[list[ScenePair], list[ScenePair]]:
    n_val = int(math.floor(len(scenes) * val_fraction))
    if n_val == 0:
        return list(scenes), []
    return list(scenes[:-n_val]), list(scenes[-n_val:])


def learning_rate(train: TrainConfig, epoch: int) -> float:
    """Two-phase schedule: ``lr`` for the first phase, ``lr * lr_decay_factor`` after."""
    first_phase = max(1, int(round(train.epochs * train.first_phase_fraction)))
    return train.lr if epoch < first_phase else train.lr * train.lr_decay_factor


@dataclass
class _RoIBatch:
    rois: Tensor
    sensed_rois: Tensor
    batch_index: Tensor
    assignment: LabelAssignment
    targets: list[SceneTargets]


class Trainer:
    def __init__(
        self,
        model: TwoStreamDetector,
        train: TrainConfig,
        loss: LossConfig,
        jitter: JitterConfig,
        seed: int = 0,
        use_jitter: bool = True,
        use_asc: bool = True,
        log_path: Path | None = None,
    ):
        self.model = model
        self.train_cfg = train
        self.loss_cfg = loss
        self.jitter_cfg = jitter
        self.seed = seed
        rfa_on = model.config.use_rfa
        self.use_jitter = use_jitter and rfa_on
        self.use_asc = use_asc and rfa_on
        self.log_path = log_path
        self.generator = torch.Generator().manual_seed(seed)
        self.class_dims = load_class_dims() if model.config.use_3d else {}
        self.optimizer = torch.optim.SGD(
            model.parameters(), lr=train.lr, momentum=train.momentum, weight_decay=train.weight_decay
        )

    def _sample_rois(
        self, scene_gt: Sequence[SceneTargets], proposals: list[tuple[Tensor, Tensor]]
    ) -> _RoIBatch:
        cfg = self.train_cfg
        rois, sensed, index, parts, targets = [], [], [], [], []
        for i, (t, (boxes, _)) in enumerate(zip(scene_gt, proposals, strict=True)):
            candidates = torch.cat((boxes, t.ref_boxes))
            assignment = assign_labels(
                candidates,
                t.ref_boxes,
                t.labels,
                t.sensed_boxes,
                t.has_sensed,
                cfg.fg_thresh,
                cfg.bg_thresh,
                reg_weights=self.model.config.box_reg_weights,
            )
            keep = sample_minibatch(
                assignment, cfg.rois_per_image, cfg.positive_fraction, self.generator
            )
            picked = candidates[keep]
            assignment = assignment.select(keep)
            sensed_rois = picked
            if self.use_jitter:
                t_j = sample_jitter(picked.shape[0], self.jitter_cfg, self.generator)
                sensed_rois = apply_shift_tensor(picked, t_j)
                assignment.shift_targets = torch.where(
                    assignment.has_shift[:, None],
                    assignment.shift_targets - t_j,
                    assignment.shift_targets,
                )
            rois.append(picked)
            sensed.append(sensed_rois)
            index.append(torch.full((picked.shape[0],), i, dtype=torch.long))
            parts.append(assignment)
            targets.append(t)
        merged = LabelAssignment(
            labels=torch.cat([a.labels for a in parts]),
            matched=torch.cat([a.matched for a in parts]),
            reg_targets=torch.cat([a.reg_targets for a in parts]),
            shift_targets=torch.cat([a.shift_targets for a in parts]),
            has_shift=torch.cat([a.has_shift for a in parts]),
        )
        return _RoIBatch(torch.cat(rois), torch.cat(sensed), torch.cat(index), merged, targets)

    def _box3d_loss(self, scenes: Sequence[ScenePair], batch: _RoIBatch, pred: Tensor) -> Tensor:
        a = batch.assignment
        # depth is read where the sensed RoI lands once the shift target is applied
        aligned = apply_shift_tensor(batch.sensed_rois, a.shift_targets).detach()
        rows, v_star, skipped = [], [], 0
        for k in torch.where(a.labels > 0)[0].tolist():
            i = int(batch.batch_index[k])
            scene, t = scenes[i], batch.targets[i]
            m = int(a.matched[k])
            if not bool(t.has_box3d[m]) or scene.intrinsics is None:
                continue
            label = self.model.config.class_names[int(a.labels[k]) - 1]
            roi = tensor_to_boxes(batch.rois[k : k + 1].detach())[0]
            sensed_roi = tensor_to_boxes(aligned[k : k + 1])[0]
            try:
                depth = crop_depth(scene, sensed_roi)
                init = init_box3d(roi, depth, scene.intrinsics, self.class_dims, label)
            except DepthInitError:
                skipped += 1
                continue
            gt = Box3D(**dict(zip(Box3D.model_fields, t.box3d[m].tolist())))
            rows.append(k)
            v_star.append(encode_3d_targets(init, gt).as_tuple())
        if skipped:
            logger.debug("Skipped %d 3D targets without valid depth", skipped)
        if not rows:
            return pred.sum() * 0.0
        index = torch.tensor(rows, dtype=torch.long)
        target = torch.tensor(v_star, dtype=pred.dtype)
        return loss_3d(a.labels[index], pred[index], target, self.loss_cfg.smooth_l1_beta) / max(
            1, a.labels.numel()
        )

    def step(self, scenes: Sequence[ScenePair]) -> LossBreakdown:
        model = self.model
        cfg = model.config
        model.train()

        images = [scene_images(s) for s in scenes]
        ref = torch.stack([r for r, _ in images])
        sensed = torch.stack([s for _, s in images])
        f_ref, f_sensed = model.features(ref, sensed)

        logits, deltas = model.rpn(f_ref, f_sensed)
        scene_gt = [scene_targets(s, cfg.class_names) for s in scenes]
        l_rpn = rpn_loss(
            logits,
            deltas,
            model.anchors,
            [t.ref_boxes for t in scene_gt],
            model.rpn.settings,
            self.generator,
        )
        proposals = model.rpn.propose(logits, deltas, model.anchors, cfg.image_size)

        batch = self._sample_rois(scene_gt, proposals)
        a = batch.assignment
        out = model.roi_forward(f_ref, f_sensed, batch.rois, batch.batch_index, batch.sensed_rois)

        asc_pred = None
        if self.use_asc:
            offsets = sample_neighbour_offsets(batch.rois.shape[0], cfg.stride, self.generator)
            shift_xy = torch.cat((offsets, offsets.new_zeros(offsets.shape)), dim=1)
            asc_pred = model.rfa.predict(
                f_ref, f_sensed, batch.rois + shift_xy, batch.sensed_rois + shift_xy, batch.batch_index
            )

        extra: dict[str, Tensor] = {"rpn": l_rpn}
        fusion = out.fusion
        if fusion.aux_ref_logits is not None and fusion.aux_sensed_logits is not None:
            # objects missing from the sensed image are background for its classifier
            unpaired = (a.labels > 0) & ~a.has_shift
            sensed_labels = torch.where(unpaired, torch.full_like(a.labels, BACKGROUND), a.labels)
            extra["aux_ref"] = F.cross_entropy(fusion.aux_ref_logits, a.labels)
            extra["aux_sensed"] = F.cross_entropy(fusion.aux_sensed_logits, sensed_labels)
        if out.head.box3d is not None:
            extra["box3d"] = self._box3d_loss(scenes, batch, out.head.box3d)

        breakdown = multi_task_loss(
            out.head.cls_logits,
            out.head.box_deltas,
            out.alignment.shift if cfg.use_rfa else None,
            asc_pred,
            RoIBatchTargets(
                labels=a.labels,
                reg_targets=a.reg_targets,
                shift_targets=a.shift_targets,
                shift_mask=a.has_shift,
            ),
            self.loss_cfg,
            extra,
        )

        self.optimizer.zero_grad()
        breakdown.total.backward()  # type: ignore[union-attr]
        if self.train_cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(model.parameters(), self.train_cfg.grad_clip)
        self.optimizer.step()
        return breakdown

    def fit(self, scenes: Sequence[ScenePair]) -> TrainResult:
        if not scenes:
            raise ConfigurationError("no training scenes")
        cfg = self.train_cfg
        dataset = PairedSceneDataset(scenes, cfg.flip_prob, np.random.default_rng(self.seed))
        loader = DataLoader(
            dataset,
            batch_size=cfg.batch_size,
            shuffle=True,
            collate_fn=list,
            generator=torch.Generator().manual_seed(self.seed),
        )

        history: list[dict[str, float]] = []
        step = 0
        epoch_losses: list[float] = []
        log_file = self.log_path.open("w", encoding="utf-8") if self.log_path is not None else None
        try:
            for epoch in range(cfg.epochs):
                lr = learning_rate(cfg, epoch)
                for group in self.optimizer.param_groups:
                    group["lr"] = lr
                epoch_losses = []
                for batch in loader:
                    losses = self.step(batch).as_floats()
                    if not math.isfinite(losses["total"]):
                        raise ConfigurationError(
                            f"training diverged at epoch {epoch} step {step}: {losses}"
                        )
                    step += 1
                    epoch_losses.append(losses["total"])
                    record = {"epoch": epoch, "step": step, "lr": lr, **losses}
                    history.append(record)
                    if log_file is not None:
                        log_file.write(json.dumps(record, sort_keys=True) + "\n")
                    if step % cfg.log_every == 0:
                        logger.info(
                            "epoch %d step %d lr %.4g loss %.4f (cls %.4f reg %.4f shift %.4f asc %.4f)",
                            epoch,
                            step,
                            lr,
                            losses["total"],
                            losses["cls"],
                            losses["reg"],
                            losses["shift"],
                            losses["asc"],
                        )
                logger.info("Epoch %d done, mean loss %.4f", epoch, float(np.mean(epoch_losses)))
        finally:
            if log_file is not None:
                log_file.close()

        self.model.mark_trained()
        self.model.eval()
        return TrainResult(self.model, float(np.mean(epoch_losses)), step, history)


def train_model(
    cfg: RunConfig,
    scenes: Sequence[ScenePair],
    out_dir: Path | None = None,
    ablation: Ablation = Ablation(),
) -> TrainResult:
    """Train from scratch on ``scenes``.

    Writes ``model.pt`` and ``train_log.jsonl`` when ``out_dir`` is given.
    """
    seed_everything(cfg.seed, settings.torch_threads)
    model = TwoStreamDetector(resolve_model_config(cfg, ablation))
    train_scenes, val_scenes = split_scenes(scenes, cfg.train.val_fraction)
    logger.info(
        "Training on %d scenes (%d held out), rfa=%s jitter=%s caf=%s asc=%s",
        len(train_scenes),
        len(val_scenes),
        model.config.use_rfa,
        cfg.train.use_jitter and not ablation.no_jitter,
        model.config.use_caf,
        cfg.train.use_asc and not ablation.no_asc,
    )
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(
        model,
        cfg.train,
        cfg.loss,
        cfg.jitter,
        seed=cfg.seed,
        use_jitter=cfg.train.use_jitter and not ablation.no_jitter,
        use_asc=cfg.train.use_asc and not ablation.no_asc,
        log_path=out_dir / TRAIN_LOG_FILE if out_dir is not None else None,
    )
    result = trainer.fit(train_scenes)
    logger.info("Final loss %.6f after %d steps", result.final_loss, result.steps)

    if val_scenes and model.config.use_rfa:
        error = shift_prediction_error(model, val_scenes)
        if error.mae_px is not None:
            logger.info("Held-out shift error %.3f px over %d objects", error.mae_px, error.n_objects)

    if out_dir is not None:
        save_checkpoint(model, out_dir / CHECKPOINT_FILE, result.final_loss)
    return result
