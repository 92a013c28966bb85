import numpy as np
import pytest
import torch

from reftrack.sampling import build_grid
from reftrack.temporal import TrajectoryFuser, grid_displacements, pool_references


def moving_grids(vel=(2.0, 0.0), p=4, h=3, w=3, size=(20.0, 12.0), start=(5.0, 7.0)):
    boxes = torch.tensor(
        [
            [start[0] + vel[0] * t, start[1] + vel[1] * t, size[0], size[1]]
            for t in range(p)
        ]
    )
    return build_grid(boxes, h=h, w=w)  # [p, h, w, 2]


class TestGridDisplacements:
    def test_constant_velocity(self):
        g = moving_grids(vel=(2.0, 0.0))
        d = grid_displacements(g)
        assert d.shape == (3, 3, 6)
        for k in range(3):
            assert torch.allclose(d[..., 2 * k], torch.full((3, 3), 2.0))
            assert torch.allclose(d[..., 2 * k + 1], torch.zeros(3, 3))

    def test_static_zero(self):
        g = moving_grids(vel=(0.0, 0.0))
        assert torch.allclose(grid_displacements(g), torch.zeros(3, 3, 6))

    def test_growing_box_antisymmetric(self):
        # independent recomputation: grids for the two box scales, subtracted
        h = w = 3
        small = torch.tensor([45.0, 45.0, 10.0, 10.0])  # center (50, 50)
        large = torch.tensor([40.0, 40.0, 20.0, 20.0])  # same center
        g = torch.stack([build_grid(small, h, w), build_grid(large, h, w)])
        d = grid_displacements(g)  # [h, w, 2]
        expected = build_grid(large, h, w) - build_grid(small, h, w)
        assert torch.allclose(d, expected.reshape(h, w, 2))
        # antisymmetry about the grid center point
        flipped = torch.flip(d, dims=(0, 1))
        assert torch.allclose(d, -flipped, atol=1e-6)
        assert torch.allclose(d[1, 1], torch.zeros(2), atol=1e-6)

    def test_single_frame_zero_channels(self):
        g = moving_grids(p=1)
        assert grid_displacements(g).shape == (3, 3, 0)

    def test_reversal_negates_and_reverses(self):
        g = moving_grids(vel=(1.5, -0.75), p=4)
        d_fwd = grid_displacements(g)
        d_rev = grid_displacements(torch.flip(g, dims=(0,)))
        p_minus_1 = 3
        for k in range(p_minus_1):
            fwd = d_fwd[..., 2 * k : 2 * k + 2]
            rev = d_rev[..., 2 * (p_minus_1 - 1 - k) : 2 * (p_minus_1 - k)]
            assert torch.allclose(fwd, -rev, atol=1e-6)

    def test_batched(self):
        g = torch.stack([moving_grids(), moving_grids(vel=(0.0, 1.0))])
        d = grid_displacements(g)
        assert d.shape == (2, 3, 3, 6)


class TestTrajectoryFuser:
    def test_fused_channel_count(self):
        # p=4, C=64 -> 4*64 + 3*2 = 262 input channels
        fuser = TrajectoryFuser(channels=64, n_frames=4)
        assert fuser.mlp.net[0].in_features == 262

    def test_channel_identity_property(self):
        for p, c in [(2, 8), (3, 16), (5, 32)]:
            fuser = TrajectoryFuser(channels=c, n_frames=p)
            assert fuser.mlp.net[0].in_features == p * c + (p - 1) * 2

    def test_deterministic(self):
        torch.manual_seed(0)
        fuser = TrajectoryFuser(channels=8, n_frames=2)
        feats = torch.randn(1, 2, 3, 3, 8)
        disp = torch.zeros(1, 3, 3, 2)
        extent = torch.tensor([10.0])
        a = fuser(feats, disp, extent)
        b = fuser(feats, disp, extent)
        assert torch.equal(a, b)
        assert a.shape == (1, 3, 3, 8)

    def test_gradient_reaches_every_frame(self):
        torch.manual_seed(1)
        p = 4
        fuser = TrajectoryFuser(channels=8, n_frames=p)
        feats = torch.randn(2, p, 3, 3, 8, requires_grad=True)
        disp = torch.randn(2, 3, 3, (p - 1) * 2)
        extent = torch.tensor([10.0, 20.0])
        fuser(feats, disp, extent).sum().backward()
        for t in range(p):
            assert feats.grad[:, t].abs().sum() > 0, f"no gradient into frame {t}"

    def test_displacement_scaling(self):
        torch.manual_seed(0)
        fuser = TrajectoryFuser(channels=8, n_frames=2, scale_displacements=True)
        feats = torch.zeros(1, 2, 2, 2, 8)
        disp = torch.full((1, 2, 2, 2), 30.0)
        small = fuser(feats, disp, torch.tensor([300.0]))
        large = fuser(feats, disp, torch.tensor([30.0]))
        assert not torch.allclose(small, large)

    def test_wrong_channels_rejected(self):
        fuser = TrajectoryFuser(channels=8, n_frames=3)
        with pytest.raises(ValueError):
            fuser(torch.zeros(1, 3, 2, 2, 8), torch.zeros(1, 2, 2, 2), torch.ones(1))


class TestPoolReferences:
    def test_mean_of_equal_frames(self):
        r = torch.randn(1, 2, 3, 4).expand(5, 2, 3, 4)
        out = pool_references(r, time_dim=0)
        assert torch.allclose(out, r[0])

    def test_opposite_frames_cancel(self):
        v = torch.randn(2, 3, 4)
        r = torch.stack([v, -v])
        assert torch.allclose(pool_references(r), torch.zeros_like(v))

    def test_shape_reduction(self):
        r = torch.randn(4, 36, 10, 64)
        assert pool_references(r).shape == (36, 10, 64)

    def test_time_permutation_invariant(self):
        torch.manual_seed(0)
        r = torch.randn(6, 3, 2, 8)
        perm = torch.randperm(6)
        a = pool_references(r)
        b = pool_references(r[perm])
        assert torch.allclose(a, b, atol=1e-6)
