import pytest
import torch

from weakalign_det.detector.backbone import FeatureMap
from weakalign_det.detector.inference import pool_region
from weakalign_det.detector.roi_align import outside_feature_extent, roi_align, single_batch_index
from weakalign_det.tests.conftest import box


def test_constant_map_pools_constant():
    features = torch.full((1, 3, 16, 16), 3.0)
    rois = torch.tensor([[32.0, 32.0, 16.0, 16.0], [20.0, 40.0, 9.0, 13.0]])
    pooled = roi_align(features, rois, single_batch_index(2), stride=4)
    assert pooled.shape == (2, 3, 7, 7)
    assert torch.allclose(pooled, torch.full_like(pooled, 3.0))


def test_full_map_roi_reproduces_the_map():
    features = torch.randn(1, 2, 8, 8, dtype=torch.float64)
    rois = torch.tensor([[4.0, 4.0, 8.0, 8.0]], dtype=torch.float64)
    pooled = roi_align(features, rois, single_batch_index(1), stride=1, out_size=(8, 8), sampling_ratio=1)
    assert torch.allclose(pooled[0], features[0])


def test_batch_index_selects_image():
    features = torch.stack((torch.zeros(1, 8, 8), torch.ones(1, 8, 8)))
    rois = torch.tensor([[16.0, 16.0, 8.0, 8.0]] * 2)
    pooled = roi_align(features, rois, torch.tensor([1, 0]), stride=4, out_size=(2, 2))
    assert torch.all(pooled[0] == 1.0)
    assert torch.all(pooled[1] == 0.0)


def test_roi_outside_the_map_is_zero():
    features = torch.ones(1, 4, 16, 16)
    rois = torch.tensor([[-50.0, -50.0, 8.0, 8.0], [200.0, 10.0, 8.0, 8.0]])
    pooled = roi_align(features, rois, single_batch_index(2), stride=4)
    assert torch.all(pooled == 0.0)
    assert outside_feature_extent(rois, (16, 16), 4).tolist() == [True, True]


def test_no_rois():
    pooled = roi_align(torch.ones(1, 4, 16, 16), torch.zeros(0, 4), single_batch_index(0), stride=4)
    assert pooled.shape == (0, 4, 7, 7)


def test_rejects_unbatched_features():
    with pytest.raises(ValueError):
        roi_align(torch.ones(4, 16, 16), torch.zeros(1, 4), single_batch_index(1), stride=4)


def test_pool_region_reports_outside():
    f = FeatureMap(torch.ones(4, 16, 16), stride=4)
    pooled, outside = pool_region(f, box(-40, -40))
    assert outside
    assert torch.all(pooled == 0.0)
    pooled, outside = pool_region(f, box(32, 32))
    assert not outside
    assert pooled.shape == (4, 7, 7)


def test_gradients_match_finite_differences():
    features = torch.randn(1, 2, 8, 8, dtype=torch.float64, requires_grad=True)
    rois = torch.tensor([[7.3, 6.1, 5.7, 4.9], [9.2, 8.7, 6.3, 7.1]], dtype=torch.float64, requires_grad=True)
    index = single_batch_index(2)
    assert torch.autograd.gradcheck(
        lambda f, r: roi_align(f, r, index, 2, (3, 3), 2),
        (features, rois),
        eps=1e-6,
        atol=1e-5,
    )
