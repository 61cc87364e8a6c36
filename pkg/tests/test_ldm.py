import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import ldmsynth.ldm as ldm_mod
from ldmsynth import autodiff as ad
from ldmsynth.autodiff import ContractError, Tensor
from ldmsynth.fit import psnr
from ldmsynth.geometry import Camera, Frustum
from ldmsynth.gradcheck import run_checks
from ldmsynth.ldm import (DecodeHeads, Ldm, activate_density, activate_depth, check_invariants,
                          depth_anchors, depth_from_logits, disparity_bands, over_composite, render_depth,
                          render_target, render_to_input_view, upsample_activate)
from ldmsynth.scenes import RigSpec, make_scene, oracle_render, render_rig


def test_depth_anchors():
    np.testing.assert_array_equal(depth_anchors(1), [0.5])
    np.testing.assert_array_equal(depth_anchors(4), [0.125, 0.375, 0.625, 0.875])
    a = depth_anchors(7)
    np.testing.assert_allclose(np.diff(a), 1 / 7)
    with pytest.raises(ContractError):
        depth_anchors(0)


def _frustum(near=1.0, far=3.0, n=4):
    return Frustum(Camera.from_params(n, n, n / 2, n / 2, n, n), near, far)


def test_depth_activation_closed_form():
    V = Tensor(np.zeros((1, 1, 1, 3)))
    d = activate_depth(V, Tensor(np.ones((3, 1))), _frustum())
    np.testing.assert_allclose(d.data, 1.5, rtol=1e-12)


def test_saturated_depth_hits_band_edges():
    L = 3
    fr = _frustum(1.0, 9.0)
    lo, hi = disparity_bands(L, fr)
    up = depth_from_logits(Tensor(np.full((L, 1, 1), 40.0)), fr).data[:, 0, 0]
    down = depth_from_logits(Tensor(np.full((L, 1, 1), -40.0)), fr).data[:, 0, 0]
    np.testing.assert_allclose(1 / up, hi, rtol=1e-12)
    np.testing.assert_allclose(1 / down, lo, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(0, 100_000), st.floats(0.1, 50.0))
def test_depth_stays_in_band_and_ordered(L, seed, scale):
    rng = np.random.default_rng(seed)
    fr = _frustum(0.5, 20.0)
    d = depth_from_logits(Tensor(rng.standard_normal((L, 3, 3)) * scale), fr).data
    lo, hi = disparity_bands(L, fr)
    disp = 1 / d
    assert np.all(disp >= lo[:, None, None] * (1 - 1e-12)) and np.all(disp <= hi[:, None, None] * (1 + 1e-12))
    # layer 0 is the farthest; saturated neighbours may meet on a shared band edge
    assert np.all(np.diff(d, axis=0) <= 1e-12 * d[1:])


def test_density_activation():
    V = Tensor(np.zeros((2, 2, 2, 3)))
    np.testing.assert_array_equal(activate_density(V, Tensor(np.ones((3, 1)))).data, 0.5)
    big = activate_density(Tensor(np.full((1, 1, 1, 1), 1e3)), Tensor(np.ones((1, 1)))).data
    assert big.item() == 1.0
    x = np.linspace(-3, 3, 7).reshape(7, 1, 1, 1)
    s = activate_density(Tensor(x), Tensor(np.ones((1, 1)))).data.ravel()
    assert np.all(np.diff(s) > 0)


def test_over_composite_examples():
    vals = Tensor(np.array([[[[0.2, 0.4]]]]))
    np.testing.assert_allclose(over_composite(vals, Tensor(np.ones((1, 1, 1)))).data, [[[0.2, 0.4]]])
    np.testing.assert_array_equal(over_composite(vals, Tensor(np.zeros((1, 1, 1)))).data, 0)
    a, b = 0.9, 0.3
    two = over_composite(Tensor(np.array([a, b]).reshape(2, 1, 1, 1)), Tensor(np.array([1.0, 0.25]).reshape(2, 1, 1)))
    np.testing.assert_allclose(two.data.item(), 0.25 * b + 0.75 * a)


def test_over_composite_closed_form():
    rng = np.random.default_rng(0)
    v = rng.uniform(size=(5, 3, 3, 2))
    s = rng.uniform(size=(5, 3, 3))
    ref = np.zeros((3, 3, 2))
    for l in range(5):
        trans = np.prod(1 - s[l + 1:], axis=0)
        ref += v[l] * (s[l] * trans)[..., None]
    np.testing.assert_allclose(over_composite(Tensor(v), Tensor(s)).data, ref, rtol=1e-12)


def test_sign_flip_in_composite_backward_is_detected(monkeypatch):
    clean = {r.name: r.passed for r in run_checks("ldm")}
    assert clean["over_composite"]
    original = ldm_mod._over_backward

    def flipped(g, vals, sigma, partial):
        gv, gs = original(g, vals, sigma, partial)
        return gv, -gs

    monkeypatch.setattr(ldm_mod, "_over_backward", flipped)
    broken = {r.name: r.passed for r in run_checks("ldm")}
    assert not broken["over_composite"]


# rendering

def _identity_setup(rng, n=8):
    cam = Camera.from_params(n, n, n / 2, n / 2, n, n)
    fr = Frustum(cam, 1.0, 4.0)
    d = depth_from_logits(Tensor(np.zeros((1, n, n))), fr)
    return cam, fr, d


def test_single_view_identity_render():
    rng = np.random.default_rng(1)
    cam, fr, d = _identity_setup(rng)
    img = rng.uniform(size=(8, 8, 3))
    ldm = Ldm(d, Tensor(np.ones((1, 8, 8))), Tensor(np.ones((1, 8, 8, 1))), fr)
    np.testing.assert_allclose(render_target(ldm, Tensor(img[None]), [cam]).data, img, atol=1e-12)


def test_constant_inputs_render_constant():
    rng = np.random.default_rng(2)
    cams = RigSpec(3, 0.1, 16, 16).cameras()
    fr = Frustum(cams[1], 1.0, 5.0)
    d = depth_from_logits(Tensor(rng.standard_normal((2, 16, 16))), fr)
    blend = ad.softmax(Tensor(rng.standard_normal((2, 16, 16, 3))))
    dens = np.ones((2, 16, 16))
    ldm = Ldm(d, Tensor(dens), blend, fr)
    imgs = np.broadcast_to(np.array([0.2, 0.5, 0.7]), (3, 16, 16, 3)).copy()
    np.testing.assert_allclose(render_target(ldm, Tensor(imgs), cams).data, imgs[0], atol=1e-12)


def test_camera_count_mismatch():
    rng = np.random.default_rng(3)
    cam, fr, d = _identity_setup(rng)
    ldm = Ldm(d, Tensor(np.ones((1, 8, 8))), Tensor(np.ones((1, 8, 8, 1))), fr)
    with pytest.raises(ContractError):
        render_target(ldm, Tensor(np.zeros((2, 8, 8, 3))), [cam, cam])


def test_render_stays_in_input_range():
    rng = np.random.default_rng(4)
    cams = RigSpec(3, 0.05, 16, 16).cameras()
    fr = Frustum(cams[1], 2.0, 5.0)
    ldm = Ldm(depth_from_logits(Tensor(rng.standard_normal((3, 16, 16))), fr),
              Tensor(np.concatenate([np.ones((1, 16, 16)), rng.uniform(size=(2, 16, 16))])),
              ad.softmax(Tensor(rng.standard_normal((3, 16, 16, 3)))), fr)
    imgs = rng.uniform(0.2, 0.8, size=(3, 16, 16, 3))
    out = render_target(ldm, Tensor(imgs), cams).data
    assert out.min() >= imgs.min(axis=(0, 1, 2)).min() - 1e-12
    assert np.all(out <= imgs.max(axis=(0, 1, 2)) + 1e-12)


def test_ground_truth_two_plane_ldm_matches_oracle():
    rig = RigSpec(4, 0.2)
    cams = rig.cameras()
    fr = Frustum(cams[1], 1.0, 8.0)
    scene = make_scene(0, 2, fr)
    images = render_rig(scene, rig).images
    truth, depth = oracle_render(scene, fr.camera)
    near_plane, far_plane = scene.planes
    H, W = depth.shape
    d = np.stack([np.full((H, W), far_plane.depth), np.full((H, W), near_plane.depth)])
    sigma = np.stack([np.ones((H, W)), (np.abs(depth - near_plane.depth) < 1e-9).astype(float)])
    # the nearest rig view to the target is the target camera itself
    blend = np.zeros((2, H, W, 4))
    blend[..., 1] = 1
    ldm = Ldm(Tensor(d), Tensor(sigma), Tensor(blend), fr)
    assert psnr(render_target(ldm, Tensor(images), cams).data, truth) > 40
    np.testing.assert_allclose(render_depth(ldm).data, depth, rtol=1e-9)


def test_zero_weight_on_valid_views_blends_to_zero():
    rig = RigSpec(2, 0.5, 8, 8)
    cams = rig.cameras()
    fr = Frustum(cams[0], 1.0, 4.0)
    d = depth_from_logits(Tensor(np.zeros((1, 8, 8))), fr)
    blend = np.zeros((1, 8, 8, 2))
    blend[..., 1] = 1  # all weight on a view that misses part of the layer
    ldm = Ldm(d, Tensor(np.ones((1, 8, 8))), Tensor(blend), fr)
    out = render_target(ldm, Tensor(np.ones((2, 8, 8, 3))), cams).data
    assert np.isfinite(out).all() and out.min() == 0 and out.max() == 1


# intermediate render

def _heads(rng, C, scale=1.0):
    return DecodeHeads(Tensor(rng.standard_normal((C, 1)) * scale), Tensor(rng.standard_normal((C, 1))),
                       Tensor(rng.standard_normal((C, C))))


def test_transparent_volume_renders_black():
    rng = np.random.default_rng(5)
    V = Tensor(np.abs(rng.standard_normal((2, 4, 4, 3))) + 1)
    heads = DecodeHeads(Tensor(np.full((3, 1), -50.0)), Tensor(np.zeros((3, 1))), Tensor(np.eye(3)))
    cam = Camera.from_params(4, 4, 2, 2, 4, 4)
    out = render_to_input_view(V, heads, cam, Frustum(cam, 1, 4)).data
    assert np.abs(out).max() < 1e-20


def test_self_view_render_matches_layer_composite():
    rng = np.random.default_rng(6)
    C, n = 3, 8
    cam = Camera.from_params(n, n, n / 2, n / 2, n, n)
    fr = Frustum(cam, 1.0, 4.0)
    V = Tensor(rng.standard_normal((2, n, n, C)))
    heads = _heads(rng, C)
    heads.depth = Tensor(np.zeros((C, 1)))  # flat layers
    out = render_to_input_view(V, heads, cam, fr).data
    a = ad.sigmoid(ad.matmul(V, heads.appearance))
    sigma = activate_density(V, heads.density)
    ref = over_composite(a, sigma).data
    assert psnr(out[..., :C], ref) > 40
    alpha = over_composite(Tensor(np.ones((2, n, n, 1))), sigma).data[..., 0]
    np.testing.assert_allclose(out[..., C], alpha, atol=1e-6)


# upsample then activate

def test_upsample_identity_scale():
    rng = np.random.default_rng(7)
    C = 4
    V = Tensor(rng.standard_normal((2, 5, 6, C)))
    heads = _heads(rng, C)
    logits = Tensor(rng.standard_normal((2, 5, 6, 3)))
    fr = Frustum(Camera.from_params(6, 6, 3, 2.5, 6, 5), 1, 8)
    ldm = upsample_activate(V, heads, logits, 1.0, fr)
    np.testing.assert_allclose(ldm.depth.data, activate_depth(V, heads.depth, fr).data, rtol=1e-12)
    np.testing.assert_allclose(ldm.density.data, activate_density(V, heads.density).data, rtol=1e-12)
    np.testing.assert_allclose(ldm.blend.data, ad.softmax(logits).data, rtol=1e-12)
    with pytest.raises(ContractError):
        upsample_activate(V, heads, logits, 0.5, fr)


def test_upsample_constant_maps():
    C = 2
    V = Tensor(np.full((1, 4, 4, C), 0.3))
    heads = DecodeHeads(Tensor(np.ones((C, 1))), Tensor(np.ones((C, 1))), Tensor(np.eye(C)))
    fr = Frustum(Camera.from_params(10, 10, 5, 5, 10, 10), 1, 8)
    ldm = upsample_activate(V, heads, Tensor(np.zeros((1, 4, 4, 2))), 2.5, fr)
    assert ldm.depth.shape == (1, 10, 10)
    for x in (ldm.depth.data, ldm.density.data, ldm.blend.data):
        assert np.ptp(x) < 1e-12


def test_upsample_then_activate_keeps_plateaus():
    # a step edge in the density logits: +-8 on either side
    C = 1
    V = np.full((1, 4, 4, C), -8.0)
    V[:, :, 2:] = 8.0
    heads = DecodeHeads(Tensor(np.ones((C, 1))), Tensor(np.zeros((C, 1))), Tensor(np.eye(C)))
    fr = Frustum(Camera.from_params(16, 16, 8, 8, 16, 16), 1, 8)
    ldm = upsample_activate(Tensor(V), heads, Tensor(np.zeros((1, 4, 4, 1))), 4.0, fr)
    act_first = ad.resize_bilinear(ad.sigmoid(Tensor(V[..., 0:1])), 16, 16).data[..., 0]
    up_first = ldm.density.data
    assert np.abs(up_first - act_first).max() > 1e-3
    s_hi, s_lo = 1 / (1 + np.exp(-8.0)), 1 / (1 + np.exp(8.0))
    np.testing.assert_allclose(up_first[0, :, -1], s_hi, rtol=1e-12)
    np.testing.assert_allclose(up_first[0, :, 0], s_lo, rtol=1e-12)


def test_check_invariants_reports_problems():
    fr = _frustum(1, 3, 2)
    good = Ldm(depth_from_logits(Tensor(np.zeros((2, 2, 2))), fr), Tensor(np.full((2, 2, 2), 0.5)),
               Tensor(np.full((2, 2, 2, 2), 0.5)), fr)
    assert check_invariants(good) == []
    bad = Ldm(Tensor(np.full((2, 2, 2), 1.1)), Tensor(np.full((2, 2, 2), 1.5)), Tensor(np.full((2, 2, 2, 2), 0.4)), fr)
    assert len(check_invariants(bad)) == 3
