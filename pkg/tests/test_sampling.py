import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from reftrack.encoders import LinguisticFeatures
from reftrack.sampling import (
    AugmentConfig,
    ReferencePointDecoder,
    augment_grids,
    bilinear_sample,
    build_grid,
    normalize_grid,
    sample_references,
)


class TestBuildGrid:
    def test_eq_values(self):
        g = build_grid(torch.tensor([4.0, 2.0, 6.0, 4.0]), h=2, w=3)
        assert g.shape == (2, 3, 2)
        assert torch.equal(g[..., 0], torch.tensor([[4.0, 7.0, 10.0]] * 2))
        assert torch.equal(g[..., 1], torch.tensor([[2.0] * 3, [6.0] * 3]))

    def test_two_by_two_is_corners(self):
        g = build_grid(torch.tensor([0.0, 0.0, 10.0, 20.0]), h=2, w=2)
        corners = {(0.0, 0.0), (10.0, 0.0), (0.0, 20.0), (10.0, 20.0)}
        got = {tuple(map(float, g[y, x])) for y in range(2) for x in range(2)}
        assert got == corners

    @given(
        x0=st.floats(-50, 650), y0=st.floats(-50, 200),
        w=st.floats(0.5, 400), h=st.floats(0.5, 150),
        gw=st.integers(2, 16), gh=st.integers(2, 16),
    )
    @settings(max_examples=200, deadline=None)
    def test_corners_equal_box_corners(self, x0, y0, w, h, gw, gh):
        g = build_grid(torch.tensor([x0, y0, w, h], dtype=torch.float64), h=gh, w=gw)
        assert g[0, 0, 0] == pytest.approx(x0, abs=0)
        assert g[0, 0, 1] == pytest.approx(y0, abs=0)
        assert float(g[-1, -1, 0]) == pytest.approx(x0 + w, rel=0, abs=1e-12)
        assert float(g[-1, -1, 1]) == pytest.approx(y0 + h, rel=0, abs=1e-12)

    def test_batched_shapes(self):
        boxes = torch.rand(5, 4, 4) * 100 + 1
        g = build_grid(boxes, h=3, w=6)
        assert g.shape == (5, 4, 3, 6, 2)

    def test_too_small_grid_rejected(self):
        with pytest.raises(ValueError):
            build_grid(torch.tensor([0.0, 0.0, 1.0, 1.0]), h=1, w=3)

    def test_gradient_flows_to_box(self):
        box = torch.tensor([5.0, 5.0, 20.0, 10.0], requires_grad=True)
        g = build_grid(box, h=4, w=4)
        g.sum().backward()
        assert box.grad is not None and box.grad.abs().sum() > 0


class TestNormalizeGrid:
    def test_center_maps_to_zero(self):
        g = torch.tensor([[[672 / 2 - 0.5, 224 / 2 - 0.5]]])
        n = normalize_grid(g, (224, 672))
        assert torch.allclose(n, torch.zeros_like(n), atol=1e-7)

    def test_edges(self):
        g = torch.tensor([[[-0.5, -0.5]], [[671.5, 223.5]]])
        n = normalize_grid(g, (224, 672))
        assert torch.allclose(n[0, 0], torch.tensor([-1.0, -1.0]))
        assert torch.allclose(n[1, 0], torch.tensor([1.0, 1.0]))

    def test_out_of_image_clamped(self):
        g = torch.tensor([[[-100.0, 500.0]]])
        n = normalize_grid(g, (224, 672))
        assert n[0, 0, 0] == -1.0 and n[0, 0, 1] == 1.0


def pixel_to_norm(px, py, w, h):
    return torch.stack(
        [2 * (px + 0.5) / w - 1, 2 * (py + 0.5) / h - 1], dim=-1
    )


class TestBilinearSample:
    def test_constant_map(self):
        fmap = torch.full((1, 6, 9, 3), 4.25)
        grid = torch.rand(1, 5, 7, 2) * 2 - 1
        out = bilinear_sample(fmap, grid)
        assert out.shape == (1, 5, 7, 3)
        assert torch.allclose(out, torch.full_like(out, 4.25))

    def test_affine_field_exact(self):
        # f(x, y) = 2x + 3y sampled at pixel units (1.5, 2.5) must give 10.5
        h, w = 8, 10
        ys, xs = torch.meshgrid(
            torch.arange(h, dtype=torch.float64),
            torch.arange(w, dtype=torch.float64),
            indexing="ij",
        )
        fmap = (2 * xs + 3 * ys).reshape(1, h, w, 1)
        grid = pixel_to_norm(
            torch.tensor([1.5], dtype=torch.float64),
            torch.tensor([2.5], dtype=torch.float64),
            w,
            h,
        ).reshape(1, 1, 2)
        out = bilinear_sample(fmap, grid)
        assert float(out) == pytest.approx(10.5, abs=1e-12)

    @given(
        px=st.floats(0.0, 8.9), py=st.floats(0.0, 6.9),
        a=st.floats(-3, 3), b=st.floats(-3, 3), c=st.floats(-5, 5),
    )
    @settings(max_examples=150, deadline=None)
    def test_affine_exactness_property(self, px, py, a, b, c):
        h, w = 8, 10
        ys, xs = torch.meshgrid(
            torch.arange(h, dtype=torch.float64),
            torch.arange(w, dtype=torch.float64),
            indexing="ij",
        )
        fmap = (a * xs + b * ys + c).reshape(1, h, w, 1)
        grid = pixel_to_norm(
            torch.tensor([px], dtype=torch.float64),
            torch.tensor([py], dtype=torch.float64),
            w, h,
        ).reshape(1, 1, 2)
        out = float(bilinear_sample(fmap, grid))
        assert out == pytest.approx(a * px + b * py + c, abs=1e-9)

    def test_border_replication(self):
        fmap = torch.arange(12, dtype=torch.float32).reshape(1, 3, 4, 1)
        far_left = torch.tensor([[[-1.0, 0.0]]])
        beyond = torch.tensor([[[-5.0, 0.0]]])
        a = bilinear_sample(fmap, far_left)
        b = bilinear_sample(fmap, beyond)
        assert torch.allclose(a, b)

    def test_gradient_vs_finite_differences(self):
        # central differences with step 1e-3 in normalized units
        torch.manual_seed(0)
        h, w = 7, 9
        fmap = torch.randn(1, h, w, 2, dtype=torch.float64)
        pts = torch.tensor(
            [[[0.13, -0.42], [0.55, 0.31], [-0.71, 0.08]]], dtype=torch.float64
        )
        pts.requires_grad_(True)
        out = bilinear_sample(fmap, pts)
        grad = torch.autograd.grad(out.sum(), pts)[0]
        eps = 1e-3
        for i in range(pts.shape[1]):
            for d in range(2):
                delta = torch.zeros_like(pts)
                delta[0, i, d] = eps
                hi = bilinear_sample(fmap, (pts + delta).detach()).sum()
                lo = bilinear_sample(fmap, (pts - delta).detach()).sum()
                fd = float((hi - lo) / (2 * eps))
                an = float(grad[0, i, d])
                assert abs(an - fd) <= 1e-4 * max(1.0, abs(fd)), (i, d, an, fd)

    def test_gradient_reaches_feature_map(self):
        fmap = torch.randn(1, 5, 5, 3, requires_grad=True)
        grid = torch.rand(1, 4, 2) * 1.6 - 0.8
        bilinear_sample(fmap, grid).sum().backward()
        assert fmap.grad is not None and fmap.grad.abs().sum() > 0


class TestAugment:
    def grids(self, bsz=3, p=4, h=2, w=2, seed=0):
        torch.manual_seed(seed)
        boxes = torch.rand(bsz, p, 4) * 50 + torch.tensor([0.0, 0.0, 10.0, 10.0])
        return build_grid(boxes, h=h, w=w)

    def test_zero_config_is_identity(self):
        g = self.grids()
        present = torch.ones(3, 4, dtype=torch.bool)
        cfg = AugmentConfig(drop_prob=0, noise_sigma=0, swap_prob=0)
        out, pres = augment_grids(g, present, cfg, torch.Generator().manual_seed(0))
        assert torch.equal(out, g)
        assert torch.equal(pres, present)

    def test_disabled_is_identity(self):
        g = self.grids()
        present = torch.ones(3, 4, dtype=torch.bool)
        cfg = AugmentConfig(drop_prob=0.9, noise_sigma=0.5, swap_prob=0.9, enabled=False)
        out, _ = augment_grids(g, present, cfg, torch.Generator().manual_seed(0))
        assert torch.equal(out, g)

    def test_drop_all_uses_frame_zero(self):
        g = self.grids(bsz=2)
        present = torch.ones(2, 4, dtype=torch.bool)
        cfg = AugmentConfig(drop_prob=1.0, noise_sigma=0, swap_prob=0)
        out, pres = augment_grids(g, present, cfg, torch.Generator().manual_seed(1))
        for t in range(4):
            assert torch.equal(out[:, t], g[:, 0])
        assert pres[:, 0].all()
        assert not pres[:, 1:].any()

    def test_noise_std_matches_box_fraction(self):
        # box 100x100, sigma 0.05 -> per-coordinate std 5 px, Monte Carlo over
        # 10^4 draws must land within 10%
        n = 10_000
        boxes = torch.tensor([[0.0, 0.0, 100.0, 100.0]]).expand(n, 1, 4)
        g = build_grid(boxes, h=2, w=2)
        present = torch.ones(n, 1, dtype=torch.bool)
        cfg = AugmentConfig(drop_prob=0, noise_sigma=0.05, swap_prob=0)
        out, _ = augment_grids(g, present, cfg, torch.Generator().manual_seed(7))
        noise = (out - g).reshape(-1)
        std = float(noise.std())
        assert abs(std - 5.0) <= 0.5

    def test_swap_exchanges_suffix(self):
        g = self.grids(bsz=2, p=4)
        present = torch.ones(2, 4, dtype=torch.bool)
        cfg = AugmentConfig(drop_prob=0, noise_sigma=0, swap_prob=1.0)
        out, _ = augment_grids(g, present, cfg, torch.Generator().manual_seed(3))
        assert not torch.equal(out, g)
        # every frame's grid still comes from one of the two originals
        for b in range(2):
            for t in range(4):
                assert torch.equal(out[b, t], g[0, t]) or torch.equal(out[b, t], g[1, t])

    def test_swap_skipped_for_batch_of_one(self):
        g = self.grids(bsz=1)
        present = torch.ones(1, 4, dtype=torch.bool)
        cfg = AugmentConfig(drop_prob=0, noise_sigma=0, swap_prob=1.0)
        out, _ = augment_grids(g, present, cfg, torch.Generator().manual_seed(3))
        assert torch.equal(out, g)

    def test_deterministic_under_seed(self):
        g = self.grids()
        present = torch.ones(3, 4, dtype=torch.bool)
        cfg = AugmentConfig(drop_prob=0.3, noise_sigma=0.1, swap_prob=0.5)
        a, pa = augment_grids(g, present, cfg, torch.Generator().manual_seed(5))
        b, pb = augment_grids(g, present, cfg, torch.Generator().manual_seed(5))
        assert torch.equal(a, b) and torch.equal(pa, pb)

    def test_multi_level_shares_frame_decisions(self):
        boxes = torch.rand(4, 4, 4) * 50 + torch.tensor([0.0, 0.0, 10.0, 10.0])
        levels = [build_grid(boxes, h=4, w=4), build_grid(boxes, h=2, w=2)]
        present = torch.ones(4, 4, dtype=torch.bool)
        cfg = AugmentConfig(drop_prob=0.5, noise_sigma=0, swap_prob=0)
        out, pres = augment_grids(levels, present, cfg, torch.Generator().manual_seed(9))
        # a dropped frame must be dropped at every level: grids equal the
        # nearest kept frame's grid in both levels simultaneously
        for b in range(4):
            for t in range(4):
                if not pres[b, t]:
                    same0 = [torch.equal(out[0][b, t], out[0][b, k]) for k in range(4) if pres[b, k]]
                    same1 = [torch.equal(out[1][b, t], out[1][b, k]) for k in range(4) if pres[b, k]]
                    assert any(same0) and any(same1)


class TestReferenceDecoder:
    def features(self, n_slots=2, length=5, channels=16, seed=0, pad_from=3):
        torch.manual_seed(seed)
        values = torch.randn(n_slots, length, channels)
        pad = torch.zeros(n_slots, length, dtype=torch.bool)
        pad[:, pad_from:] = True
        values = values.masked_fill(pad.unsqueeze(-1), 0.0)
        return LinguisticFeatures(values=values, pad_mask=pad)

    def test_shapes_and_range(self):
        torch.manual_seed(0)
        dec = ReferencePointDecoder(channels=16, n_points=10)
        refs = dec(self.features(), n_frames=4)
        assert refs.points.shape == (4, 2, 10, 2)
        assert (refs.points > -1).all() and (refs.points < 1).all()

    def test_time_slices_identical(self):
        torch.manual_seed(0)
        dec = ReferencePointDecoder(channels=16, n_points=4)
        refs = dec(self.features(), n_frames=3)
        for t in range(1, 3):
            assert torch.equal(refs.points[t], refs.points[0])

    def test_zeroed_head_gives_bias_point(self):
        torch.manual_seed(0)
        dec = ReferencePointDecoder(channels=16, n_points=5)
        with torch.no_grad():
            dec.head.weight.zero_()
            dec.head.bias.copy_(torch.tensor([0.4, -1.2]))
        refs = dec(self.features(seed=3), n_frames=2)
        expected = 2 * torch.sigmoid(torch.tensor([0.4, -1.2])) - 1
        assert torch.allclose(refs.points[0, 0, 0], expected, atol=1e-6)
        assert torch.allclose(refs.points, expected.expand_as(refs.points), atol=1e-6)

    def test_identical_expressions_identical_points(self):
        torch.manual_seed(0)
        dec = ReferencePointDecoder(channels=16, n_points=4)
        f = self.features(n_slots=1)
        doubled = LinguisticFeatures(
            values=torch.cat([f.values, f.values]),
            pad_mask=torch.cat([f.pad_mask, f.pad_mask]),
        )
        refs = dec(doubled, n_frames=2)
        assert torch.equal(refs.points[0, 0], refs.points[0, 1])

    def test_all_pad_expression_no_nan(self):
        torch.manual_seed(0)
        dec = ReferencePointDecoder(channels=16, n_points=4)
        f = self.features(pad_from=0)
        refs = dec(f, n_frames=2)
        assert torch.isfinite(refs.points).all()


class TestSampleReferences:
    def test_constant_map(self):
        torch.manual_seed(0)
        fmap = torch.full((2, 6, 9, 4), 1.5)
        dec = ReferencePointDecoder(channels=8, n_points=3)
        pts = torch.zeros(2, 5, 3, 2)
        from reftrack.sampling import ReferencePoints

        refs = ReferencePoints(points=pts)
        out = sample_references(fmap, refs)
        assert out.shape == (2, 5, 3, 4)
        assert torch.allclose(out, torch.full_like(out, 1.5))

    def test_gradient_through_points(self):
        torch.manual_seed(1)
        from reftrack.sampling import ReferencePoints

        fmap = torch.randn(2, 6, 9, 4, dtype=torch.float64)
        pts = (torch.rand(2, 3, 2, 2, dtype=torch.float64) * 1.4 - 0.7).requires_grad_(True)
        out = sample_references(fmap, ReferencePoints(points=pts))
        grad = torch.autograd.grad(out.sum(), pts)[0]
        eps = 1e-4
        flat = pts.detach().clone()
        idx = (1, 2, 1, 0)
        delta = torch.zeros_like(flat)
        delta[idx] = eps
        hi = sample_references(fmap, ReferencePoints(points=flat + delta)).sum()
        lo = sample_references(fmap, ReferencePoints(points=flat - delta)).sum()
        fd = float((hi - lo) / (2 * eps))
        assert abs(float(grad[idx]) - fd) <= 1e-4 * max(1.0, abs(fd))
