import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chatsplat.errors import ArgError
from chatsplat.projection import project_splats, sort_by_depth
from chatsplat.rasterizer import (RenderSettings, render_payload, render_reference,
                                  render_tiled)
from chatsplat.scene import Camera, Gaussian3D
from chatsplat.synth import random_scene

ALL = ("color", "feat_v", "feat_o", "identity")


def axis_camera(width=64, height=64, fx=100.0):
    return Camera(fx=fx, fy=fx, cx=width / 2 + 0.5, cy=height / 2 + 0.5,
                  width=width, height=height, rotation=np.eye(3),
                  translation=np.zeros(3), near=0.01, far=100.0)


def centered_gaussians(opacities, feat, d_g=4):
    """Gaussians stacked on the optical axis, projecting exactly onto the
    pixel center at (cx, cy); G(center) = 1 so alpha = opacity there."""
    n = len(opacities)
    g = Gaussian3D.zeros(n, d_g, 2)
    for i, o in enumerate(opacities):
        g.positions[i] = (0, 0, 1.0 + 0.1 * i)
        g.opacities[i] = o
        g.feat_view[i] = feat[i]
    g.scales[:] = 0.02
    return g


class TestHandCases:
    def test_single_saturated_gaussian_clamps_to_099(self):
        cam = axis_camera()
        g = centered_gaussians([1.0], [[1.0, 2.0, -3.0, 0.5]])
        out = render_reference(g, cam, ("feat_v",))
        iy, ix = int(cam.cy), int(cam.cx)
        assert out.alpha_acc[iy, ix] == pytest.approx(0.99, abs=1e-12)
        assert np.allclose(out.feat_v[iy, ix], 0.99 * np.array([1, 2, -3, 0.5]),
                           atol=1e-7)
        w = out.contrib.pixel(iy, ix)
        assert len(w) == 1 and w[0][1] == pytest.approx(0.99, abs=1e-12)

    def test_two_coincident_half_splats_weights(self):
        # front alpha 0.5, back alpha 0.5 -> weights (0.5, 0.25)
        cam = axis_camera()
        g = centered_gaussians([0.5, 0.5], [[1, 0, 0, 0], [0, 1, 0, 0]])
        g.positions[1] = (0, 0, 1.0)  # same depth: stable tie by index
        out = render_reference(g, cam, ("feat_v",))
        iy, ix = int(cam.cy), int(cam.cx)
        contribs = out.contrib.pixel(iy, ix)
        assert [c[0] for c in contribs] == [0, 1]
        assert contribs[0][1] == pytest.approx(0.5, abs=1e-9)
        assert contribs[1][1] == pytest.approx(0.25, abs=1e-9)
        assert np.allclose(out.feat_v[iy, ix], [0.5, 0.25, 0, 0], atol=1e-9)

    def test_opaque_front_occludes_back(self):
        cam = axis_camera()
        g = centered_gaussians([1.0, 0.9], [[1, 0, 0, 0], [0, 1, 0, 0]])
        out = render_reference(g, cam, ("feat_v",))
        iy, ix = int(cam.cy), int(cam.cx)
        contribs = dict(out.contrib.pixel(iy, ix))
        assert contribs[0] == pytest.approx(0.99, abs=1e-12)
        assert contribs[1] <= 0.01 + 1e-12  # back weight via T = 0.01

    def test_empty_scene_zero_maps(self):
        g = Gaussian3D.zeros(0, 4, 2)
        cam = axis_camera()
        for fn in (render_tiled, render_reference):
            out = fn(g, cam, ALL)
            assert not out.alpha_acc.any()
            assert not out.color.any() and not out.identity.any()

    def test_empty_channels_rejected(self):
        with pytest.raises(ArgError):
            render_tiled(Gaussian3D.zeros(1, 4, 2), axis_camera(), ())


class TestOracleEquivalence:
    @pytest.mark.parametrize("seed", range(6))
    def test_tiled_matches_reference(self, seed):
        g, cam = random_scene(300, seed=seed)
        a = render_tiled(g, cam, ALL, record_contrib=True)
        b = render_reference(g, cam, ALL)
        for ch in ("color", "feat_v", "feat_o", "identity"):
            assert np.max(np.abs(getattr(a, ch) - getattr(b, ch))) <= 1e-5
        assert np.max(np.abs(a.alpha_acc - b.alpha_acc)) <= 1e-5
        assert np.array_equal(a.contrib.count, b.contrib.count)

    def test_odd_image_size_tiles_clipped(self):
        g, cam = random_scene(150, seed=40, width=70, height=50)
        a = render_tiled(g, cam, ("color",))
        b = render_reference(g, cam, ("color",))
        assert np.max(np.abs(a.color - b.color)) <= 1e-5


class TestCompositingLaws:
    def test_weight_law_recomputed_independently(self):
        g, cam = random_scene(120, seed=2)
        out = render_reference(g, cam, ("feat_v",))
        batch = sort_by_depth(project_splats(g, cam))
        rng = np.random.default_rng(0)
        for _ in range(30):
            iy = int(rng.integers(0, cam.height))
            ix = int(rng.integers(0, cam.width))
            # independent per-pixel replay of the compositing law
            px, py = ix + 0.5, iy + 0.5
            T, expected = 1.0, []
            for k in range(batch.count):
                dx, dy = px - batch.mean2d[k, 0], py - batch.mean2d[k, 1]
                r = batch.radius[k]
                if abs(dx) > r or abs(dy) > r:
                    continue
                ixx, ixy, iyy = batch.conic[k]
                power = -0.5 * (ixx * dx * dx + iyy * dy * dy) - ixy * dx * dy
                alpha = min(g.opacities[batch.gaussian_index[k]] * np.exp(power), 0.99)
                if alpha < 1 / 255:
                    continue
                if T * (1 - alpha) < 1e-4:
                    break
                expected.append((int(batch.gaussian_index[k]), alpha * T))
                T *= 1 - alpha
            got = out.contrib.pixel(iy, ix)
            assert [i for i, _ in got] == [i for i, _ in expected]
            for (gi, gw), (ei, ew) in zip(got, expected):
                assert gw == pytest.approx(ew, rel=1e-9)
            assert out.alpha_acc[iy, ix] == pytest.approx(sum(w for _, w in expected),
                                                          rel=1e-9, abs=1e-12)
            assert out.alpha_acc[iy, ix] <= 1.0 + 1e-5

    def test_feature_linearity_in_payload(self):
        g, cam = random_scene(200, seed=5)
        rng = np.random.default_rng(1)
        A = rng.standard_normal((g.count, 6))
        B = rng.standard_normal((g.count, 6))
        a, b = 0.7, -1.3
        ra = render_payload(g, cam, A).payload
        rb = render_payload(g, cam, B).payload
        rab = render_payload(g, cam, a * A + b * B).payload
        expected = a * ra + b * rb
        denom = np.maximum(np.abs(expected), 1e-9)
        assert np.max(np.abs(rab - expected) / denom) <= 1e-6

    def test_channel_independence(self):
        g, cam = random_scene(200, seed=6)
        full = render_tiled(g, cam, ALL)
        only = render_tiled(g, cam, ("feat_v",))
        assert np.max(np.abs(full.feat_v - only.feat_v)) <= 1e-7

    def test_composited_features_bounded_by_alpha(self):
        lo, hi = -2.0, 3.0
        g, cam = random_scene(200, seed=9)
        rng = np.random.default_rng(3)
        g.feat_view[...] = rng.uniform(lo, hi, g.feat_view.shape).astype(np.float32)
        out = render_tiled(g, cam, ("feat_v",))
        alpha = out.alpha_acc[:, :, None]
        assert np.all(out.feat_v >= alpha * lo - 1e-9)
        assert np.all(out.feat_v <= alpha * hi + 1e-9)

    def test_occlusion_monotonicity(self):
        cam = axis_camera()
        rng = np.random.default_rng(7)
        for _ in range(10):
            o_front = rng.uniform(0.1, 0.9)
            g = centered_gaussians([o_front, 0.8], [[1, 0, 0, 0], [0, 1, 0, 0]])
            out1 = render_reference(g, cam, ("feat_v",))
            g.opacities[0] = min(o_front + 0.05, 1.0)
            out2 = render_reference(g, cam, ("feat_v",))
            iy, ix = int(cam.cy), int(cam.cx)
            w1 = dict(out1.contrib.pixel(iy, ix)).get(1, 0.0)
            w2 = dict(out2.contrib.pixel(iy, ix)).get(1, 0.0)
            assert w2 <= w1 + 1e-12

    def test_contrib_cap_and_overflow_counting(self):
        cam = axis_camera()
        g = centered_gaussians([0.3] * 6, [[1, 0, 0, 0]] * 6)
        settings = RenderSettings(contrib_cap=2)
        out = render_reference(g, cam, ("feat_v",), settings)
        iy, ix = int(cam.cy), int(cam.cx)
        assert out.contrib.count[iy, ix] == 2
        assert out.contrib.overflow[iy, ix] == 4

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_alpha_acc_always_in_unit_interval(self, seed):
        g, cam = random_scene(60, seed=seed, width=32, height=32)
        out = render_tiled(g, cam, ("color",))
        assert np.all(out.alpha_acc >= 0.0)
        assert np.all(out.alpha_acc <= 1.0 + 1e-9)
