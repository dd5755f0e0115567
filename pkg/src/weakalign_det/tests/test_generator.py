import numpy as np
import pytest

from weakalign_det.core.errors import ConfigurationError, GenerationError
from weakalign_det.data.dataset import flip_scene
from weakalign_det.data.generator import (
    BOX_QUANTUM,
    GeneratorConfig,
    ModalityPair,
    SceneOptions,
    generate_dataset,
    generate_scene,
)
from weakalign_det.data.schemas import PairedObject, ShiftFieldConfig
from weakalign_det.data.shifting import shift_image, shift_statistics, swap_modalities
from weakalign_det.tests.conftest import blank_scene, box


def _boxes(scene):
    return [(o.ref_box, o.sensed_box) for o in scene.objects]


class TestGenerateDataset:
    def test_is_deterministic(self, generator_config):
        a = generate_dataset(generator_config, master_seed=11)
        b = generate_dataset(generator_config, master_seed=11)
        assert [s.scene_id for s in a] == [s.scene_id for s in b]
        for x, y in zip(a, b):
            assert np.array_equal(x.ref_image, y.ref_image)
            assert np.array_equal(x.sensed_image, y.sensed_image)
            assert x.objects == y.objects

    def test_worker_count_does_not_change_output(self, generator_config):
        serial = generate_dataset(generator_config, master_seed=5, workers=1)
        parallel = generate_dataset(generator_config, master_seed=5, workers=2)
        for x, y in zip(serial, parallel, strict=True):
            assert np.array_equal(x.sensed_image, y.sensed_image)
            assert x.objects == y.objects

    def test_seed_changes_output(self, generator_config):
        a = generate_dataset(generator_config, master_seed=1)
        b = generate_dataset(generator_config, master_seed=2)
        assert any(not np.array_equal(x.ref_image, y.ref_image) for x, y in zip(a, b))

    def test_unpaired_rate(self):
        config = GeneratorConfig(
            shift=ShiftFieldConfig(unpaired_rate=0.125),
            n_scenes=200,
            objects_per_scene=(2, 4),
        )
        scenes = generate_dataset(config, master_seed=0)
        objects = [o for s in scenes for o in s.objects]
        rate = sum(o.unpaired for o in objects) / len(objects)
        assert abs(rate - 0.125) < 0.05

    def test_boxes_are_quantized(self, scenes):
        for scene in scenes:
            for obj in scene.objects:
                for b in (obj.ref_box, obj.sensed_box):
                    if b is None:
                        continue
                    for value in b.as_tuple():
                        assert value * BOX_QUANTUM == int(value * BOX_QUANTUM)

    def test_offsets_follow_field_without_noise(self):
        config = GeneratorConfig(
            shift=ShiftFieldConfig(base_shift=4.0, noise_sigma=0.0, unpaired_rate=0.0),
            n_scenes=4,
            objects_per_scene=(2, 3),
        )
        for scene in generate_dataset(config, master_seed=9):
            for obj in scene.objects:
                dx, dy = scene.shift_field.evaluate(obj.ref_box.x, obj.ref_box.y)
                assert abs(obj.sensed_box.x - obj.ref_box.x - dx) <= 0.5 / BOX_QUANTUM
                assert abs(obj.sensed_box.y - obj.ref_box.y - dy) <= 0.5 / BOX_QUANTUM

    def test_rgbd_scenes_carry_3d_boxes(self):
        config = GeneratorConfig(
            scene=SceneOptions(classes=["chair", "table"], modality_pair=ModalityPair.RGBD),
            n_scenes=3,
            objects_per_scene=(1, 2),
        )
        for scene in generate_dataset(config, master_seed=4):
            assert scene.is_rgbd
            assert scene.intrinsics is not None
            assert scene.depth_map().max() > 0
            for obj in scene.objects:
                assert (obj.box3d is not None) == (obj.ref_box is not None)


class TestGenerationErrors:
    def test_object_larger_than_canvas(self):
        options = SceneOptions(object_height=(80.0, 90.0))
        with pytest.raises(GenerationError):
            generate_scene(ShiftFieldConfig(), (64, 64), 1, seed=0, options=options)

    def test_negative_object_count(self):
        with pytest.raises(GenerationError):
            generate_scene(ShiftFieldConfig(), (64, 64), -1, seed=0)

    def test_rgbd_class_without_dimensions(self):
        options = SceneOptions(classes=["sofa"], modality_pair=ModalityPair.RGBD)
        with pytest.raises(GenerationError):
            generate_scene(ShiftFieldConfig(), (64, 64), 1, seed=0, options=options)


class TestShiftImage:
    def test_moves_only_the_sensed_side(self, scenes):
        scene = scenes[0]
        moved = shift_image(scene, (3, -2))
        assert np.array_equal(moved.ref_image, scene.ref_image)
        for before, after in zip(scene.objects, moved.objects):
            assert after.ref_box == before.ref_box
            if before.sensed_box is not None:
                assert after.sensed_box == before.sensed_box.translate(3, -2)

    def test_translates_pixels(self):
        scene = blank_scene([PairedObject(pair_id=0, class_label="pedestrian", ref_box=box(20, 20), sensed_box=box(20, 20))])
        image = np.zeros((64, 64), dtype=np.float32)
        image[10, 10] = 1.0
        scene = scene.replace(sensed_image=image)
        moved = shift_image(scene, (2, 3))
        assert moved.sensed_image[13, 12] == 1.0
        assert moved.sensed_image.sum() == 1.0

    def test_zero_delta_is_identity(self, scenes):
        assert shift_image(scenes[0], (0, 0)) is scenes[0]

    def test_inverse_restores_boxes(self, scenes):
        scene = scenes[1]
        back = shift_image(shift_image(scene, (5, 4)), (-5, -4))
        assert _boxes(back) == _boxes(scene)

    def test_marks_truncation(self):
        scene = blank_scene([PairedObject(pair_id=0, class_label="pedestrian", ref_box=box(32, 32), sensed_box=box(58, 32))])
        moved = shift_image(scene, (4, 0))
        assert moved.objects[0].sensed_truncated
        assert not moved.objects[0].ref_truncated

    def test_rejects_fractional_delta(self, scenes):
        with pytest.raises(ValueError):
            shift_image(scenes[0], (0.5, 0))


class TestSwapAndFlip:
    def test_double_swap_is_identity(self, scenes):
        scene = scenes[2]
        twice = swap_modalities(swap_modalities(scene))
        assert twice.objects == scene.objects
        assert np.array_equal(twice.ref_image, scene.ref_image)

    def test_swap_exchanges_boxes(self, scenes):
        scene = scenes[0]
        swapped = swap_modalities(scene)
        for before, after in zip(scene.objects, swapped.objects):
            assert after.ref_box == before.sensed_box
            assert after.sensed_box == before.ref_box

    def test_swap_refuses_depth(self):
        config = GeneratorConfig(
            scene=SceneOptions(classes=["chair"], modality_pair=ModalityPair.RGBD),
            n_scenes=1,
        )
        scene = generate_dataset(config, master_seed=0)[0]
        with pytest.raises(ConfigurationError):
            swap_modalities(scene)

    def test_double_flip_is_identity(self, scenes):
        scene = scenes[3]
        twice = flip_scene(flip_scene(scene))
        assert twice.objects == scene.objects
        assert np.array_equal(twice.sensed_image, scene.sensed_image)

    def test_flip_mirrors_field(self, scenes):
        scene = scenes[0]
        flipped = flip_scene(scene)
        dx, dy = scene.shift_field.evaluate(10.0, 20.0)
        fdx, fdy = flipped.shift_field.evaluate(scene.width - 10.0, 20.0)
        assert fdx == pytest.approx(-dx)
        assert fdy == pytest.approx(dy)


def test_shift_statistics_counts(scenes):
    histogram = shift_statistics(scenes)
    n_objects = sum(len(s.objects) for s in scenes)
    assert sum(histogram.magnitude_counts) == histogram.n_paired
    assert histogram.n_paired + histogram.n_unpaired == n_objects
