import numpy as np
import pytest
import torch

from weakalign_det.data.generator import GeneratorConfig, SceneOptions, generate_dataset
from weakalign_det.data.schemas import PairedObject, ScenePair
from weakalign_det.data.schemas import ShiftFieldConfig
from weakalign_det.detector.model import ModelConfig, TwoStreamDetector
from weakalign_det.geometry.boxes import Box2D


def box(x: float, y: float, w: float = 8.0, h: float = 16.0) -> Box2D:
    return Box2D(x=x, y=y, w=w, h=h)


def blank_scene(objects: list[PairedObject], scene_id: str = "s0", size: int = 64) -> ScenePair:
    image = np.zeros((size, size), dtype=np.float32)
    return ScenePair(
        scene_id=scene_id,
        ref_image=image,
        sensed_image=image.copy(),
        objects=objects,
        extent=(size, size),
    )


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def central_difference(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of scalar ``fn`` with respect to float64 tensor ``x``."""
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + eps
        plus = float(fn(x))
        flat[i] = orig - eps
        minus = float(fn(x))
        flat[i] = orig
        grad.view(-1)[i] = (plus - minus) / (2 * eps)
    return grad


def assert_gradient_matches(fn, x: torch.Tensor) -> None:
    """Autograd gradient of scalar ``fn`` at float64 ``x`` against central differences."""
    leaf = x.detach().clone().requires_grad_(True)
    fn(leaf).backward()
    numeric = central_difference(lambda v: fn(v).detach(), x.detach().clone())
    for a, b in zip(leaf.grad.view(-1).tolist(), numeric.view(-1).tolist(), strict=True):
        assert abs(a - b) < 1e-6 or relative_error(a, b) < 1e-4, (a, b)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    torch.set_num_threads(1)


@pytest.fixture
def generator_config() -> GeneratorConfig:
    return GeneratorConfig(
        shift=ShiftFieldConfig(base_shift=3.0, unpaired_rate=0.125),
        scene=SceneOptions(),
        canvas=(64, 64),
        n_scenes=6,
        objects_per_scene=(1, 3),
    )


@pytest.fixture
def scenes(generator_config: GeneratorConfig) -> list[ScenePair]:
    return generate_dataset(generator_config, master_seed=3)


@pytest.fixture
def model_config() -> ModelConfig:
    return ModelConfig(image_size=(64, 64), channels=(8, 16, 16), fc_dim=32)


@pytest.fixture
def model(model_config: ModelConfig) -> TwoStreamDetector:
    return TwoStreamDetector(model_config)
