import numpy as np
import pytest

from ldmsynth import autodiff as ad
from ldmsynth.autodiff import ContractError, ParamStore, Tensor
from ldmsynth.config import ConfigError, nano_config
from ldmsynth.geometry import Camera, Frustum, gather_backproject, layer_world_points
from ldmsynth.ldm import check_invariants, flat_depths
from ldmsynth.network import (build_params, decode_blend_logits, encode_inputs, fit_cost_model, forward,
                              initial_update, layer_collapse, render_output, update_block, update_cnn)
from ldmsynth.scenes import RigSpec


@pytest.fixture(scope="module")
def nano():
    cfg = nano_config()
    store = build_params(cfg, seed=0, dtype=np.float64)
    rig = RigSpec(5, 0.1)
    cams = rig.cameras()
    keep = [0, 1, 3, 4]
    target = Frustum(cams[2], cfg.near, cfg.far)
    rng = np.random.default_rng(0)
    images = rng.uniform(size=(4, 64, 64, 3))
    return cfg, store, [cams[m] for m in keep], target, images


def test_zero_images_give_zero_features(nano):
    cfg, store, cams, target, _ = nano
    pyr = encode_inputs(Tensor(np.zeros((4, 64, 64, 3))), cams, target, cfg, store)
    for f in pyr.features:
        assert not np.any(f.data)
    assert [f.shape[1:3] for f in pyr.features] == [(32, 32), (16, 16), (8, 8)]


def test_view_permutation_permutes_pyramid(nano):
    cfg, store, cams, target, images = nano
    perm = [2, 0, 3, 1]
    a = encode_inputs(Tensor(images), cams, target, cfg, store)
    b = encode_inputs(Tensor(images[perm]), [cams[m] for m in perm], target, cfg, store)
    for fa, fb, ra, rb in zip(a.features, b.features, a.rays, b.rays):
        np.testing.assert_allclose(fb.data, fa.data[perm], rtol=1e-12)
        np.testing.assert_allclose(rb.data, ra.data[perm], rtol=1e-12)


def test_encoder_rejects_camera_count(nano):
    cfg, store, cams, target, images = nano
    with pytest.raises(ContractError):
        encode_inputs(Tensor(images), cams[:3], target, cfg, store)


def test_initial_update_is_plane_sweep(nano):
    cfg, store, cams, target, images = nano
    pyr = encode_inputs(Tensor(images), cams, target, cfg, store)
    step = cfg.steps[0]
    deltas, depth = initial_update((8, 8, 8, 8), pyr, step, target, cfg, store)
    np.testing.assert_allclose(depth.data, flat_depths(8, 8, 8, target, np.float64).data)
    # every layer is a constant-depth plane
    assert np.all(np.ptp(depth.data, axis=(1, 2)) < 1e-12)
    # reproduce the sweep with an explicit gather of the update features at those planes
    k = step.pyramid_level
    x = ad.concat([pyr.features[k], pyr.rays[k]], axis=-1)
    feats = update_cnn(x, store, f"{step.name}/update", 8, cfg.update_blocks)
    pts = layer_world_points(target, depth)
    for m in range(4):
        ref = gather_backproject(feats[m], pyr.cams[k][m], pts)[0].data
        np.testing.assert_allclose(deltas.data[m], ref, rtol=1e-12)


def test_update_block_shapes_and_zero_output_path(nano):
    cfg, store, cams, target, images = nano
    pyr = encode_inputs(Tensor(images), cams, target, cfg, store)
    V = Tensor(np.random.default_rng(1).standard_normal((8, 8, 8, 8)))
    V2, deltas, depth = update_block(V, pyr, cfg.steps[1], 2, target, cfg, store)
    assert deltas.shape == (4, 8, 8, 8, 8)
    V2, deltas, _ = update_block(V, pyr, cfg.steps[2], 2, target, cfg, store)
    assert V2.shape == (8, 16, 16, 8) and deltas.shape == (4, 8, 16, 16, 8)
    zeroed = ParamStore(seed=0, dtype=np.float64)
    zeroed.load(store.state())
    zeroed["update1/update/conv_out/w"].data[...] = 0
    zeroed["update1/update/conv_out/b"].data[...] = 0
    _, deltas, _ = update_block(V, pyr, cfg.steps[2], 2, target, cfg, zeroed)
    assert not np.any(deltas.data)


def test_layer_collapse():
    rng = np.random.default_rng(2)
    store = ParamStore(seed=0, dtype=np.float64)
    V = rng.standard_normal((4, 2, 2, 3))
    layer_collapse(Tensor(V), store, "lc")
    for k in ("lc/fc2/w", "lc/fc2/b"):
        store[k].data[...] = 0
    out = layer_collapse(Tensor(V), store, "lc").data
    np.testing.assert_allclose(out, 0.5 * (V[0::2] + V[1::2]), rtol=1e-12)
    dup = np.repeat(V[:2], 2, axis=0)
    np.testing.assert_allclose(layer_collapse(Tensor(dup), store, "lc").data, V[:2], rtol=1e-12)
    with pytest.raises(ContractError):
        layer_collapse(Tensor(V[:3]), store, "lc")


def test_blend_logits():
    rng = np.random.default_rng(3)
    C = 8
    store = ParamStore(seed=0, dtype=np.float64)
    V = Tensor(rng.standard_normal((2, 3, 3, C)))
    same = np.broadcast_to(rng.standard_normal((1, 2, 3, 3, C)), (4, 2, 3, 3, C)).copy()
    logits = decode_blend_logits(V, Tensor(same), store).data
    beta = ad.softmax(Tensor(logits)).data
    np.testing.assert_allclose(beta, 0.25, rtol=1e-12)
    np.testing.assert_allclose(ad.softmax(Tensor(logits + 3.0)).data, beta, rtol=1e-12)
    # view 0 aligned with the query direction, the rest orthogonal to it
    q = ad.matmul(ad.rms_norm(V, store["blend/norm"]), store["blend/w"]).data
    unit = q / np.linalg.norm(q, axis=-1, keepdims=True)
    deltas = np.zeros((3, 2, 3, 3, C))
    deltas[0] = 10 * np.sqrt(C) * unit
    for m in (1, 2):
        r = rng.standard_normal((2, 3, 3, C))
        deltas[m] = r - (r * unit).sum(-1, keepdims=True) * unit
    beta = ad.softmax(decode_blend_logits(V, Tensor(deltas), store)).data
    assert beta[..., 0].min() > 0.9


def test_forward_invariants_and_determinism(nano):
    cfg, store, cams, target, images = nano
    ldm, aux = forward(Tensor(images), cams, target, cfg, store)
    assert ldm.depth.shape == (4, 64, 64) and ldm.blend.shape == (4, 64, 64, 4)
    assert check_invariants(ldm) == []
    again, _ = forward(Tensor(images), cams, target, cfg, store)
    assert again.depth.data.tobytes() == ldm.depth.data.tobytes()
    assert again.blend.data.tobytes() == ldm.blend.data.tobytes()


def test_forward_view_permutation(nano):
    cfg, store, cams, target, images = nano
    perm = [3, 1, 0, 2]
    ldm, aux = forward(Tensor(images), cams, target, cfg, store)
    a = render_output(ldm, aux, Tensor(images), cams).data
    pcams = [cams[m] for m in perm]
    ldm_p, aux_p = forward(Tensor(images[perm]), pcams, target, cfg, store)
    np.testing.assert_allclose(ldm_p.blend.data, ldm.blend.data[..., perm], atol=1e-10)
    b = render_output(ldm_p, aux_p, Tensor(images[perm]), pcams).data
    assert np.abs(a - b).max() < 1e-5


def test_forward_validates_before_compute(nano):
    cfg, store, cams, target, images = nano
    with pytest.raises(ConfigError):
        forward(Tensor(images[:3]), cams[:3], target, cfg, store)
    small = Frustum(target.camera.scaled(32, 32), cfg.near, cfg.far)
    with pytest.raises(ConfigError):
        forward(Tensor(images), cams, small, cfg, store)


@pytest.mark.parametrize("flag", ["zero_keys", "zero_ray_encoding", "zero_rendered_image", "rgb_output"])
def test_ablations_run_and_change_output(nano, flag):
    cfg, store, cams, target, images = nano
    ldm, aux = forward(Tensor(images), cams, target, cfg, store)
    base = render_output(ldm, aux, Tensor(images), cams).data
    abl = nano_config()
    setattr(abl.ablations, flag, True)
    ldm2, aux2 = forward(Tensor(images), cams, target, abl, store)
    out = render_output(ldm2, aux2, Tensor(images), cams).data
    assert check_invariants(ldm2) == []
    assert out.shape == base.shape and np.abs(out - base).max() > 1e-6


def test_cost_model_is_exactly_affine():
    cost = fit_cost_model(nano_config())
    assert cost.residuals == (0, 0, 0)
    assert cost.T_V > 0 and cost.T_image > 0
    for m, total in zip(cost.views, cost.totals):
        assert total == cost.T_V + m * cost.T_image


def test_build_params_is_seeded():
    a = build_params(nano_config(), seed=4)
    b = build_params(nano_config(), seed=4)
    c = build_params(nano_config(), seed=5)
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
    assert any(a[k].data.tobytes() != c[k].data.tobytes() for k in a)
