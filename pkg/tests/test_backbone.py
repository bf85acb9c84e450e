import pytest
import torch

from qpm.backbone import (BackboneConfig, ToyBackbone, build_backbone, extract_feature_map,
                          partition_parts, stripe_bounds)
from qpm.errors import ConfigError


def test_resnet50_backbone_stride_arithmetic():
    # ResNet-50 downsamples by 32; dropping the last stride leaves 16
    cfg = BackboneConfig(variant="resnet50", output_channels=2048, spatial_stride=16, input_size=(384, 128), K=6)
    assert cfg.feature_size == (24, 8)
    net = build_backbone(cfg).eval()
    with torch.no_grad():
        fm = extract_feature_map(net, torch.randn(1, 3, 384, 128), cfg)
    assert fm.shape == (1, 2048, 24, 8)


def test_toy_backbone_shape():
    cfg = BackboneConfig(variant="toy", output_channels=64, spatial_stride=8, input_size=(64, 32), K=4)
    net = ToyBackbone(cfg).eval()
    fm = extract_feature_map(net, torch.randn(3, 64, 32), cfg)
    assert fm.shape == (64, 8, 4)


def test_deterministic_forward():
    cfg = BackboneConfig(output_channels=32, input_size=(64, 32), K=4)
    net = ToyBackbone(cfg).eval()
    x = torch.randn(2, 3, 64, 32)
    with torch.no_grad():
        assert torch.equal(net(x), net(x.clone()))


def test_dimension_mismatch_raises():
    cfg = BackboneConfig(output_channels=32, input_size=(64, 32), K=4)
    with pytest.raises(ConfigError):
        extract_feature_map(ToyBackbone(cfg), torch.randn(1, 3, 32, 32), cfg)


@pytest.mark.parametrize("size,stride,K", [((64, 32), 8, 6), ((60, 32), 8, 1), ((64, 32), 3, 4)])
def test_bad_config(size, stride, K):
    with pytest.raises(ConfigError):
        BackboneConfig(input_size=size, spatial_stride=stride, K=K)


def test_output_shape_independent_of_content():
    cfg = BackboneConfig(output_channels=16, input_size=(64, 32), K=4)
    net = ToyBackbone(cfg).eval()
    with torch.no_grad():
        shapes = {tuple(net(x).shape) for x in (torch.zeros(1, 3, 64, 32), 100 * torch.randn(1, 3, 64, 32))}
    assert shapes == {(1, 16, 8, 4)}


def test_partition_default_geometry():
    stripes = partition_parts(torch.randn(2048, 24, 8), 6)
    assert len(stripes) == 6 and all(s.shape == (2048, 4, 8) for s in stripes)


def test_partition_single_stripe_is_identity():
    fm = torch.randn(5, 8, 4)
    (only,) = partition_parts(fm, 1)
    assert torch.equal(only, fm)


def test_partition_rows_and_reconstruction():
    fm = torch.arange(3 * 8 * 4, dtype=torch.float32).reshape(3, 8, 4)
    stripes = partition_parts(fm, 4)
    assert stripe_bounds(8, 4) == [(0, 2), (2, 4), (4, 6), (6, 8)]
    for (lo, hi), s in zip(stripe_bounds(8, 4), stripes):
        assert torch.equal(s, fm[:, lo:hi])
    assert torch.equal(torch.cat(stripes, dim=1), fm)
    # disjoint: every row index appears exactly once
    rows = [r for lo, hi in stripe_bounds(8, 4) for r in range(lo, hi)]
    assert sorted(rows) == list(range(8))


def test_partition_not_divisible():
    with pytest.raises(ConfigError):
        partition_parts(torch.randn(4, 10, 4), 4)
