import numpy as np
import pytest

from chatsplat.backward import (cross_entropy_and_grad, grad_render_features,
                                l1_loss_and_grad, object_l1_loss_and_grads)
from chatsplat.encoder import (EncoderConfig, EncoderParams, ScaleShift, TokenGrid,
                               encode, encode_backward, scale_shift,
                               scale_shift_backward)
from chatsplat.errors import ShapeError, StateError
from chatsplat.rasterizer import render_tiled
from chatsplat.synth import random_scene

from test_encoder import identity_lift_params


def fd_check(loss_fn, param, analytic, indices, h=1e-3, tol=1e-3, floor=1e-6):
    """Central finite differences at sampled flat indices of a float32 param.

    Uses the actually realized float32 step so quantization does not pollute
    the quotient; elements with |analytic| <= floor are skipped per contract.
    """
    flat = param.reshape(-1)
    an = np.asarray(analytic, np.float64).reshape(-1)
    checked = 0
    for idx in indices:
        if abs(an[idx]) <= floor:
            continue
        orig = flat[idx].copy()
        flat[idx] = np.float32(orig + h)
        hi_val = np.float64(flat[idx])
        hi = loss_fn()
        flat[idx] = np.float32(orig - h)
        lo_val = np.float64(flat[idx])
        lo = loss_fn()
        flat[idx] = orig
        fd = (hi - lo) / (hi_val - lo_val)
        rel = abs(an[idx] - fd) / max(abs(an[idx]), abs(fd))
        assert rel <= tol, f"index {idx}: analytic {an[idx]:.6g} vs fd {fd:.6g}"
        checked += 1
    assert checked >= len(indices) // 2, "too many gradient entries were masked"


class TestGradRenderFeatures:
    def test_single_contribution_hand_value(self):
        from test_rasterizer import axis_camera, centered_gaussians

        cam = axis_camera()
        g = centered_gaussians([1.0], [[1, 0, 0, 0]])
        out = render_tiled(g, cam, ("feat_v",), record_contrib=True)
        iy, ix = int(cam.cy), int(cam.cx)
        upstream = np.zeros((cam.height, cam.width, 4))
        upstream[iy, ix, 0] = 1.0
        d = grad_render_features(out.contrib, upstream, g.count)
        assert d[0, 0] == pytest.approx(0.99, abs=1e-12)
        assert d[0, 1:].sum() == 0

    def test_noncontributing_gaussian_gets_zero(self):
        g, cam = random_scene(50, seed=1)
        g.positions[0] = (100, 100, 0.5)  # far off screen
        out = render_tiled(g, cam, ("feat_v",), record_contrib=True)
        upstream = np.ones((cam.height, cam.width, g.d_g))
        d = grad_render_features(out.contrib, upstream, g.count)
        assert not d[0].any()

    def test_matches_finite_differences(self, rng):
        g, cam = random_scene(60, seed=4, width=32, height=32)
        upstream = rng.standard_normal((32, 32, g.d_g))

        def loss():
            out = render_tiled(g, cam, ("feat_v",))
            return float(np.sum(out.feat_v * upstream))

        out = render_tiled(g, cam, ("feat_v",), record_contrib=True)
        analytic = grad_render_features(out.contrib, upstream, g.count)
        idx = rng.choice(g.feat_view.size, size=25, replace=False)
        fd_check(loss, g.feat_view, analytic, idx)

    def test_transpose_law(self, rng):
        # <A f, u> == <f, A^T u> for the linear feature-rendering map A
        g, cam = random_scene(80, seed=6, width=32, height=32)
        u = rng.standard_normal((32, 32, g.d_g))
        out = render_tiled(g, cam, ("feat_v",), record_contrib=True)
        lhs = float(np.sum(out.feat_v * u))
        at_u = grad_render_features(out.contrib, u, g.count)
        rhs = float(np.sum(g.feat_view.astype(np.float64) * at_u))
        assert lhs == pytest.approx(rhs, rel=1e-6)

    def test_missing_contrib_raises_state_error(self):
        with pytest.raises(StateError):
            grad_render_features(None, np.zeros((4, 4, 2)), 10)


class TestEncoderBackward:
    def test_scale_shift_grads_at_zero_tokens(self, rng):
        grid = TokenGrid(tokens=np.zeros((6, 4)), grid=(2, 3), level="view")
        ss = ScaleShift.identity(6, 4)
        upstream = rng.standard_normal((6, 4))
        _, d_a, d_b = scale_shift_backward(upstream, grid, ss)
        assert not d_a.any()
        assert np.array_equal(d_b, upstream)

    def test_identity_network_redistributes_upstream_to_patches(self, rng):
        params = identity_lift_params(3, 14)
        feat = rng.standard_normal((28, 28, 3))
        grid, cache = encode(feat, params, want_cache=True)
        upstream = rng.standard_normal(grid.tokens.shape)
        d_feat, _ = encode_backward(upstream, params, cache)
        # averaging tokenizer: every pixel of patch t receives upstream[t]/P^2
        p2 = 14 * 14
        for t, (pr, pc) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
            block = d_feat[pr * 14:(pr + 1) * 14, pc * 14:(pc + 1) * 14]
            assert np.allclose(block, upstream[t] / p2, atol=1e-12)

    def test_encoder_grads_match_finite_differences(self, rng):
        cfg = EncoderConfig(d_g=3, d_mid=6, d_tok=4, patch=14, activation="tanh")
        params = EncoderParams.init(cfg, seed=3)
        feat = rng.standard_normal((28, 28, 3)).astype(np.float32)
        target = rng.standard_normal((4, 4))
        ss = ScaleShift(a=rng.uniform(0.5, 1.5, (4, 4)).astype(np.float32),
                        b=rng.standard_normal((4, 4)).astype(np.float32))

        def loss():
            grid, _ = encode(feat.astype(np.float64), params)
            aligned = scale_shift(grid, ss)
            return l1_loss_and_grad(aligned.tokens, target)[0]

        grid, cache = encode(feat.astype(np.float64), params, want_cache=True)
        aligned = scale_shift(grid, ss)
        _, d_aligned = l1_loss_and_grad(aligned.tokens, target)
        d_tok, d_a, d_b = scale_shift_backward(d_aligned, grid, ss)
        d_feat, grads = encode_backward(d_tok, params, cache)

        for name, param in [("enc.lift1.w", params.lift1_w),
                            ("enc.lift1.b", params.lift1_b),
                            ("enc.lift2.w", params.lift2_w),
                            ("enc.lift2.b", params.lift2_b),
                            ("enc.tok.w", params.tok_w),
                            ("enc.tok.b", params.tok_b)]:
            idx = rng.choice(param.size, size=min(12, param.size), replace=False)
            fd_check(loss, param, grads[name], idx)
        for param, analytic in [(ss.a, d_a), (ss.b, d_b), (feat, d_feat)]:
            idx = rng.choice(param.size, size=12, replace=False)
            fd_check(loss, param, analytic, idx)

    def test_backward_without_cache_raises(self):
        params = EncoderParams.init(EncoderConfig(d_g=2, d_mid=4, d_tok=3), seed=0)
        with pytest.raises(StateError):
            encode_backward(np.zeros((4, 3)), params, None)


class TestLossGrads:
    def test_zero_at_exact_match(self, rng):
        x = rng.standard_normal((5, 4))
        loss, grad = l1_loss_and_grad(x, x.copy())
        assert loss == 0.0 and not grad.any()

    def test_unit_offset_mean_normalization(self, rng):
        t = rng.standard_normal((5, 4))
        loss, grad = l1_loss_and_grad(t + 1.0, t)
        assert loss == pytest.approx(1.0)
        assert np.allclose(grad, 1.0 / t.size)

    def test_sum_normalization_mode(self, rng):
        t = rng.standard_normal((5, 4))
        loss, grad = l1_loss_and_grad(t + 1.0, t, normalization="sum")
        assert loss == pytest.approx(t.size)
        assert np.allclose(grad, 1.0)

    def test_random_pair_finite_differences(self, rng):
        pred = rng.standard_normal((6, 5)).astype(np.float32)
        target = rng.standard_normal((6, 5))
        _, grad = l1_loss_and_grad(pred.astype(np.float64), target)
        idx = rng.choice(pred.size, size=15, replace=False)
        fd_check(lambda: l1_loss_and_grad(pred.astype(np.float64), target)[0],
                 pred, grad, idx, h=1e-4)

    def test_object_mean_over_present_objects(self, rng):
        targets = {0: rng.standard_normal((3, 2)), 2: rng.standard_normal((3, 2))}
        preds = {m: t + 1.0 for m, t in targets.items()}
        loss, grads = object_l1_loss_and_grads(preds, targets)
        assert loss == pytest.approx(1.0)  # mean of two unit-offset terms
        assert set(grads) == {0, 2}
        assert np.allclose(grads[0], 1.0 / (2 * 6))

    def test_object_loss_empty_is_zero(self):
        loss, grads = object_l1_loss_and_grads({}, {})
        assert loss == 0.0 and grads == {}

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            l1_loss_and_grad(np.zeros((2, 2)), np.zeros((3, 2)))

    def test_cross_entropy_finite_differences(self, rng):
        logits = rng.standard_normal((30, 4)).astype(np.float32)
        classes = rng.integers(0, 4, 30)
        _, grad = cross_entropy_and_grad(logits.astype(np.float64), classes)
        idx = rng.choice(logits.size, size=20, replace=False)
        fd_check(lambda: cross_entropy_and_grad(logits.astype(np.float64), classes)[0],
                 logits, grad, idx, h=1e-4)
