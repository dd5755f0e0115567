import json
import math

import pytest
import torch

from weakalign_det.core.errors import ConfigurationError
from weakalign_det.core.run_config import RunConfig, TrainConfig
from weakalign_det.data.generator import GeneratorConfig, ModalityPair, SceneOptions, generate_dataset
from weakalign_det.detector.model import ModelConfig, TwoStreamDetector
from weakalign_det.evaluation.robustness import DetectorEvaluator, Metric, shift_prediction_error
from weakalign_det.worker.runner import directional_bounds, run_directional
from weakalign_det.worker.trainer import (
    CHECKPOINT_FILE,
    TRAIN_LOG_FILE,
    Ablation,
    Trainer,
    learning_rate,
    resolve_model_config,
    split_scenes,
    train_model,
)


def _run_config(generator_config, **train):
    return RunConfig(
        seed=5,
        generator=generator_config.model_copy(update={"n_scenes": 4}),
        model=ModelConfig(channels=(8, 16, 16), fc_dim=32),
        train=TrainConfig(epochs=2, batch_size=2, rois_per_image=16, val_fraction=0.0, **train),
    )


class TestSchedule:
    def test_two_phases(self):
        train = TrainConfig(epochs=12, lr=0.02)
        assert [learning_rate(train, e) for e in (0, 7)] == [0.02, 0.02]
        assert learning_rate(train, 8) == pytest.approx(0.002)
        assert learning_rate(train, 11) == pytest.approx(0.002)

    def test_single_epoch(self):
        assert learning_rate(TrainConfig(epochs=1), 0) == 0.02


class TestModelResolution:
    def test_shape_and_classes_follow_the_generator(self):
        cfg = RunConfig(
            generator=GeneratorConfig(canvas=(80, 64), scene=SceneOptions(classes=["pedestrian", "cyclist"]))
        )
        model_cfg = resolve_model_config(cfg)
        assert model_cfg.image_size == (64, 80)
        assert model_cfg.class_names == ("pedestrian", "cyclist")
        assert model_cfg.use_rfa and model_cfg.use_caf and not model_cfg.use_3d

    def test_baseline_ablation(self):
        model_cfg = resolve_model_config(RunConfig(), Ablation.baseline())
        assert not model_cfg.use_rfa and not model_cfg.use_caf

    def test_rgbd_enables_the_3d_head(self):
        cfg = RunConfig(generator=GeneratorConfig(scene=SceneOptions(classes=["chair"], modality_pair=ModalityPair.RGBD)))
        assert resolve_model_config(cfg).use_3d


def test_split_holds_out_the_tail(scenes):
    train, val = split_scenes(scenes, 0.34)
    assert len(val) == 2
    assert all(a is b for a, b in zip(val, scenes[-2:]))
    assert split_scenes(scenes, 0.0) == (scenes, [])


class TestTrainerStep:
    def _trainer(self, model, **kwargs):
        return Trainer(model, TrainConfig(rois_per_image=16), RunConfig().loss, RunConfig().jitter, **kwargs)

    def test_full_model_step(self, model, scenes):
        losses = self._trainer(model).step(scenes[:2]).as_floats()
        assert {"cls", "reg", "shift", "asc", "rpn", "aux_ref", "aux_sensed", "total"} <= set(losses)
        assert all(math.isfinite(v) for v in losses.values())

    def test_step_updates_the_shift_head(self, model, scenes):
        before = model.rfa.head.fc2.weight.detach().clone()
        self._trainer(model).step(scenes[:2])
        assert not torch.equal(before, model.rfa.head.fc2.weight)

    def test_ablated_step(self, model_config, scenes):
        model = TwoStreamDetector(model_config.model_copy(update={"use_rfa": False, "use_caf": False}))
        trainer = self._trainer(model)
        assert not trainer.use_jitter and not trainer.use_asc
        losses = trainer.step(scenes[:2]).as_floats()
        assert losses["shift"] == losses["asc"] == 0.0
        assert "aux_ref" not in losses

    def test_rgbd_step_trains_3d_offsets(self):
        generator = GeneratorConfig(
            scene=SceneOptions(classes=["chair", "table"], modality_pair=ModalityPair.RGBD), n_scenes=2
        )
        scenes = generate_dataset(generator, master_seed=1)
        model = TwoStreamDetector(
            ModelConfig(channels=(8, 16, 16), fc_dim=32, class_names=("chair", "table"), use_3d=True)
        )
        losses = self._trainer(model).step(scenes).as_floats()
        assert math.isfinite(losses["box3d"])

    def test_fit_requires_scenes(self, model):
        with pytest.raises(ConfigurationError):
            self._trainer(model).fit([])


class TestTrainModel:
    def test_writes_checkpoint_and_log(self, generator_config, tmp_path):
        cfg = _run_config(generator_config)
        scenes = generate_dataset(cfg.generator, cfg.seed)
        result = train_model(cfg, scenes, tmp_path)
        assert result.model.is_trained
        assert result.steps == 4
        assert (tmp_path / CHECKPOINT_FILE).exists()
        lines = (tmp_path / TRAIN_LOG_FILE).read_text().splitlines()
        assert len(lines) == 4
        assert json.loads(lines[-1])["epoch"] == 1

    def test_is_deterministic(self, generator_config):
        cfg = _run_config(generator_config)
        scenes = generate_dataset(cfg.generator, cfg.seed)
        first = train_model(cfg, scenes).final_loss
        second = train_model(cfg, scenes).final_loss
        assert first == pytest.approx(second, rel=1e-6)

    def test_ablation_switches_modules_off(self, generator_config):
        cfg = _run_config(generator_config)
        scenes = generate_dataset(cfg.generator, cfg.seed)
        result = train_model(cfg, scenes, ablation=Ablation(no_rfa=True, no_caf=True))
        assert not result.model.config.use_rfa
        assert all(record["shift"] == 0.0 for record in result.history)


@pytest.fixture(scope="module")
def desk_run():
    """Full model and the unaligned, unfused baseline trained on the same desk-scale dataset."""
    torch.manual_seed(0)
    generator = GeneratorConfig(n_scenes=120, objects_per_scene=(2, 4))
    cfg = RunConfig(
        seed=3,
        generator=generator,
        train=TrainConfig(epochs=8, batch_size=4, val_fraction=0.25, flip_prob=0.5),
    )
    scenes = generate_dataset(cfg.generator, cfg.seed)
    full = train_model(cfg, scenes).model
    baseline = train_model(cfg, scenes, ablation=Ablation.baseline()).model
    _, val = split_scenes(scenes, cfg.train.val_fraction)
    return cfg, full, baseline, val


@pytest.mark.slow
def test_shift_regressor_learns_the_displacement(desk_run):
    _, full, _, val = desk_run
    untrained = TwoStreamDetector(full.config)
    error = shift_prediction_error(full, val).mae_px
    assert error < 2.0
    assert error < shift_prediction_error(untrained, val).mae_px


@pytest.mark.slow
def test_full_model_is_steadier_under_shift_than_the_baseline(desk_run):
    cfg, full, baseline, val = desk_run
    angles, max_px = [0, 90], 8

    def evaluator(model):
        return DetectorEvaluator(model, val, Metric.MR, cfg.eval.filter, cfg.eval.score_threshold)

    reference = evaluator(baseline)
    bounds = directional_bounds(reference, angles, max_px)
    base_stats = run_directional(reference, angles, max_px, bounds)
    full_stats = run_directional(evaluator(full), angles, max_px, bounds)

    for a, b in zip(full_stats, base_stats, strict=True):
        assert a.shifts == b.shifts
    full_std = sum(s.std for s in full_stats) / len(full_stats)
    base_std = sum(s.std for s in base_stats) / len(base_stats)
    assert full_std < base_std
