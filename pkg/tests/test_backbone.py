import numpy as np
import pytest
import torch

from mvtrack.backbone import GroundFusion, ViewBackbone, ViewFPN, extract_view_features, fuse_ground
from mvtrack.errors import ShapeMismatch
from mvtrack.geometry import GroundGrid, VoxelGrid, collapse_height, lift_to_voxels
from helpers import scene_camera
from oracles import loop_conv2d


@pytest.fixture
def nets():
    torch.manual_seed(0)
    return ViewBackbone().double(), ViewFPN(dim=16).double()


def test_shape_contract(nets):
    pack = extract_view_features(torch.rand(32, 64, 3, dtype=torch.float64), *nets)
    assert [tuple(t.shape[:2]) for t in pack.per_scale] == [(8, 16), (4, 8), (2, 4)]
    assert pack.fused.shape == (8, 16, 16) and pack.view_heatmap.shape == (8, 16)
    assert ((pack.view_heatmap > 0) & (pack.view_heatmap < 1)).all()


def test_batched_pack_slices_per_view(nets):
    imgs = torch.rand(2, 32, 64, 3, dtype=torch.float64)
    pack = extract_view_features(imgs, *nets)
    single = extract_view_features(imgs[1], *nets)
    assert torch.allclose(pack.view(1).fused, single.fused, atol=1e-12)


def test_zero_image_zero_bias(nets):
    backbone, fpn = nets
    with torch.no_grad():
        for m in (backbone, fpn):
            for name, p in m.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
    pack = extract_view_features(torch.zeros(32, 64, 3, dtype=torch.float64), backbone, fpn)
    assert all(torch.count_nonzero(t) == 0 for t in pack.per_scale)
    assert torch.count_nonzero(pack.fused) == 0
    assert torch.equal(pack.view_heatmap, torch.full((8, 16), 0.5, dtype=torch.float64))


def test_size_errors(nets):
    with pytest.raises(ShapeMismatch):
        extract_view_features(torch.zeros(30, 64, 3), *nets)
    with pytest.raises(ShapeMismatch):
        extract_view_features(torch.zeros(32, 64, 1), *nets)


def test_gradient_reaches_every_backbone_parameter(nets):
    backbone, fpn = nets
    extract_view_features(torch.rand(32, 64, 3, dtype=torch.float64), backbone, fpn).fused.sum().backward()
    for name, p in backbone.named_parameters():
        assert p.grad is not None and torch.count_nonzero(p.grad) > 0, name
    for name, p in fpn.lateral.named_parameters():
        assert torch.count_nonzero(p.grad) > 0, name


def test_translation_covariance_interior(nets):
    # a shift by the coarsest stride moves every level by whole cells
    shift = 16
    big = torch.rand(256 + shift, 256, 3, dtype=torch.float64)
    a = extract_view_features(big[:256], *nets).fused
    b = extract_view_features(big[shift:], *nets).fused
    cells = shift // 4
    margin = 16
    interior_a = a[margin + cells : -margin, margin:-margin]
    interior_b = b[margin : -margin - cells, margin:-margin]
    assert torch.allclose(interior_a, interior_b, atol=1e-5)


def test_fuse_ground_shapes_and_linearity():
    torch.manual_seed(1)
    fusion = GroundFusion(6, 8, 3).double()
    with torch.no_grad():
        for conv in fusion.convs:
            conv.bias.zero_()
    zeros = [torch.zeros(4 // 2**i or 1, 6 // 2**i or 1, 6, dtype=torch.float64) for i in range(3)]
    out = fuse_ground(zeros, fusion)
    assert all(torch.count_nonzero(t) == 0 for t in out.per_scale)
    ones = [torch.zeros(1, 1, 6, dtype=torch.float64)] * 3
    assert all(t.shape[-1] == 8 for t in fuse_ground(ones, fusion).per_scale)
    with pytest.raises(ShapeMismatch):
        fuse_ground(zeros[:2], fusion)


def test_fuse_ground_matches_loop(rng):
    torch.manual_seed(2)
    fusion = GroundFusion(4, 3, 2).double()
    x = [torch.from_numpy(rng.normal(size=(5, 7, 4))), torch.from_numpy(rng.normal(size=(3, 4, 4)))]
    out = fuse_ground(x, fusion)
    for conv, xi, yi in zip(fusion.convs, x, out.per_scale):
        assert np.allclose(yi.detach().numpy(), loop_conv2d(xi, conv.weight.detach(), conv.bias.detach()), atol=1e-6)
    assert out.shapes == [(5, 7), (3, 4)]


def test_images_receive_gradient_through_lift_and_fusion(nets):
    backbone, fpn = nets
    calibs = [scene_camera((0.0, 0.0, 3.0)), scene_camera((12.0, 8.0, 3.0))]
    imgs = torch.rand(2, 32, 64, 3, dtype=torch.float64, requires_grad=True)
    pack = extract_view_features(imgs, backbone, fpn)
    grid = GroundGrid.from_extent(12.0, 8.0, 0.8)
    vox = lift_to_voxels(pack.fused, calibs, VoxelGrid(grid, (0.0, 1.0)), 4.0)
    fusion = GroundFusion(32, 8, 1).double()
    ground = fuse_ground([collapse_height(vox)], fusion)
    ground.per_scale[0].square().sum().backward()
    assert imgs.grad.abs().sum() > 0
