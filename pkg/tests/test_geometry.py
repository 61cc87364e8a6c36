import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldmsynth import autodiff as ad
from ldmsynth.autodiff import ContractError, Tensor
from ldmsynth.geometry import (Camera, Frustum, bilinear_sample, bilinear_splat, gather_backproject, layer_world_points,
                               ray_directional_encoding, ray_ndc_delta, splat_project)
from ldmsynth.gradcheck import check_gradients


def random_camera(rng, w=12, h=10, jitter=0.05):
    a = rng.uniform(-jitter, jitter, size=3)
    Rx = np.array([[1, 0, 0], [0, np.cos(a[0]), -np.sin(a[0])], [0, np.sin(a[0]), np.cos(a[0])]])
    Ry = np.array([[np.cos(a[1]), 0, np.sin(a[1])], [0, 1, 0], [-np.sin(a[1]), 0, np.cos(a[1])]])
    Rz = np.array([[np.cos(a[2]), -np.sin(a[2]), 0], [np.sin(a[2]), np.cos(a[2]), 0], [0, 0, 1]])
    T = np.eye(4)
    T[:3, :3] = Rz @ Ry @ Rx
    T[:3, 3] = rng.uniform(-0.2, 0.2, size=3)
    f = rng.uniform(0.8, 1.2) * w
    return Camera.from_params(f, f * rng.uniform(0.9, 1.1), w / 2 + rng.uniform(-1, 1),
                              h / 2 + rng.uniform(-1, 1), w, h, T)


def test_camera_rejects_bad_rotation_and_focal():
    T = np.eye(4)
    T[0, 0] = 2
    with pytest.raises(ContractError):
        Camera.from_params(1, 1, 0, 0, 4, 4, T)
    with pytest.raises(ContractError):
        Camera.from_params(-1, 1, 0, 0, 4, 4)


def test_frustum_requires_ordered_planes():
    cam = Camera.from_params(1, 1, 0, 0, 4, 4)
    with pytest.raises(ContractError):
        Frustum(cam, 2.0, 1.0)
    with pytest.raises(ContractError):
        Frustum(cam, 0.0, 1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000))
def test_unproject_project_round_trip(seed):
    rng = np.random.default_rng(seed)
    cam = random_camera(rng)
    uv = rng.uniform(0, 10, size=(20, 2))
    pts = cam.unproject_np(uv, rng.uniform(1, 5, size=20))
    assert np.abs(cam.project_np(pts) - uv).max() < 1e-4


def test_layer_points_principal_axis_and_pinhole():
    # 1x1 texel grid: the single texel center is the principal point
    cam = Camera.from_params(5, 5, 0.5, 0.5, 1, 1)
    fr = Frustum(cam, 0.5, 10)
    p = layer_world_points(fr, Tensor(np.array([[[3.0]]]))).data
    np.testing.assert_allclose(p[0, 0, 0], [0, 0, 3], atol=1e-12)
    cam = Camera.from_params(1, 1, 0, 0, 4, 3)
    p = layer_world_points(Frustum(cam, 0.5, 2), Tensor(np.ones((1, 3, 4)))).data
    v, u = 2, 3
    np.testing.assert_allclose(p[0, v, u], [u + 0.5, v + 0.5, 1.0])


def test_layer_points_reject_depth_outside_frustum():
    cam = Camera.from_params(4, 4, 2, 2, 4, 4)
    with pytest.raises(ContractError):
        layer_world_points(Frustum(cam, 1, 2), Tensor(np.full((1, 4, 4), 3.0)))


def test_layer_points_project_back_to_texels():
    rng = np.random.default_rng(0)
    cam = random_camera(rng, 9, 7)
    fr = Frustum(cam, 1.0, 6.0)
    depth = rng.uniform(1, 6, size=(2, 7, 9))
    p = layer_world_points(fr, Tensor(depth)).data
    uv = cam.project_np(p)
    jj, ii = np.meshgrid(np.arange(9) + 0.5, np.arange(7) + 0.5)
    assert np.abs(uv[..., 0] - jj).max() < 1e-4 and np.abs(uv[..., 1] - ii).max() < 1e-4


def test_gather_constant_image():
    rng = np.random.default_rng(1)
    cam = random_camera(rng, 8, 8)
    tgt = Frustum(random_camera(rng, 6, 6), 1.0, 4.0)
    pts = layer_world_points(tgt, Tensor(rng.uniform(1, 4, size=(3, 6, 6))))
    vals, mask = gather_backproject(Tensor(np.full((8, 8, 2), 0.3)), cam, pts)
    assert mask.sum() > 0
    np.testing.assert_allclose(vals.data[mask > 0], 0.3)
    assert np.all(vals.data[mask == 0] == 0)


def test_gather_self_projection_is_resize():
    rng = np.random.default_rng(2)
    img = rng.uniform(size=(8, 8, 3))
    cam = Camera.from_params(8, 8, 4, 4, 8, 8)
    fr = Frustum(cam.scaled(4, 4), 1, 5)
    pts = layer_world_points(fr, Tensor(np.full((1, 4, 4), 2.0)))
    vals, mask = gather_backproject(Tensor(img), cam, pts)
    assert mask.all()
    np.testing.assert_allclose(vals.data[0], ad.resize_bilinear(Tensor(img), 4, 4).data, atol=1e-12)


def test_gather_depth_gradient_matches_fd():
    rng = np.random.default_rng(3)
    img = Tensor(rng.uniform(size=(9, 9, 2)))
    cam = random_camera(rng, 9, 9)
    fr = Frustum(random_camera(rng, 5, 5), 1.0, 4.0)
    depth = Tensor(rng.uniform(1.5, 3.5, size=(2, 5, 5)))
    fn = lambda: ad.tsum(gather_backproject(img, cam, layer_world_points(fr, depth))[0])
    _, ok, worst = check_gradients(fn, {"depth": depth})
    assert ok, worst


def test_splat_integer_landing():
    vals = Tensor(np.array([[[[2.0]]]]))
    u, v = Tensor(np.array([[[1.5]]])), Tensor(np.array([[[2.5]]]))
    out = bilinear_splat(vals, u, v, 4, 4).data[0, ..., 0]
    assert out[2, 1] == 2.0
    assert out.sum() == 2.0


def test_splat_constant_field_normalises_to_constant():
    cam = Camera.from_params(8, 8, 4, 4, 8, 8)
    fr = Frustum(cam.scaled(16, 16), 1, 5)
    pts = layer_world_points(fr, Tensor(np.full((1, 16, 16), 2.0)))
    out = splat_project(Tensor(np.full((1, 16, 16, 3), 0.6)), cam, pts).data
    np.testing.assert_allclose(out, 0.6, rtol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_splat_gather_adjoint(seed):
    rng = np.random.default_rng(seed)
    cam = random_camera(rng, 10, 8)
    fr = Frustum(random_camera(rng, 7, 6), 1.0, 5.0)
    pts = layer_world_points(fr, Tensor(rng.uniform(1, 5, size=(3, 6, 7))))
    v = rng.standard_normal((3, 6, 7, 2))
    u = rng.standard_normal((8, 10, 2))
    lhs = (splat_project(Tensor(v), cam, pts, normalize=False).data.sum(axis=0) * u).sum()
    g, _ = gather_backproject(Tensor(u), cam, pts)
    rhs = (v * g.data).sum()
    assert abs(lhs - rhs) <= 1e-5 * max(abs(lhs), abs(rhs))


def test_masked_samples_get_zero_gradient():
    cam = Camera.from_params(4, 4, 2, 2, 4, 4)
    img = Tensor(np.ones((4, 4, 1)), True)
    # points behind the camera
    pts = Tensor(np.array([[[[0.0, 0.0, -1.0]]]]), True)
    vals, mask = gather_backproject(img, cam, pts)
    assert mask.sum() == 0
    ad.backward(ad.tsum(vals))
    assert not np.any(img.grad) and not np.any(pts.grad)


def test_bilinear_sample_clamps_at_edges():
    img = Tensor(np.arange(4.0).reshape(2, 2, 1))
    out = bilinear_sample(img, Tensor(np.array([0.0, 2.0])), Tensor(np.array([0.0, 2.0]))).data[:, 0]
    np.testing.assert_array_equal(out, [0.0, 3.0])


# ray encoding

def test_aligned_ray_encodes_to_zero():
    cam = Camera.from_params(16, 16, 8, 8, 16, 16)
    fr = Frustum(cam, 1.0, 10.0)
    enc = ray_directional_encoding(cam, fr, (4, 4))
    assert enc.shape == (4, 4, 32)
    np.testing.assert_allclose(enc[..., :16], 0, atol=1e-12)
    np.testing.assert_allclose(enc[..., 16:], 1, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 100_000))
def test_tanh_bounds(seed):
    rng = np.random.default_rng(seed)
    fr = Frustum(random_camera(rng), 0.5, 20.0)
    # near-frustum rays stay strictly inside; wild ones may round to exactly +-1 in float
    assert np.all(np.abs(ray_ndc_delta(random_camera(rng), fr, (3, 5))) < 1)
    e = ray_ndc_delta(random_camera(rng, jitter=1.5), fr, (3, 5))
    assert np.isfinite(e).all() and np.all(np.abs(e) <= 1)


def test_mirrored_cameras_give_opposite_encodings():
    tgt = Camera.look_from((0, 0, 0), 16, 16, 16, 16)
    fr = Frustum(tgt, 1.0, 10.0)
    left = Camera.look_from((-0.3, 0, 0), 16, 16, 16, 16)
    right = Camera.look_from((0.3, 0, 0), 16, 16, 16, 16)
    el = ray_ndc_delta(left, fr, (4, 4))
    er = ray_ndc_delta(right, fr, (4, 4))
    np.testing.assert_allclose(el[..., 0], -er[..., 0], atol=1e-12)
    assert np.abs(el[..., 0]).min() > 0.01


def test_encoding_ignores_input_resolution():
    tgt = Camera.look_from((0, 0, 0), 16, 16, 16, 16)
    fr = Frustum(tgt, 1.0, 10.0)
    cam = Camera.look_from((0.2, 0.1, 0), 16, 16, 16, 16)
    np.testing.assert_allclose(ray_ndc_delta(cam, fr, (4, 4)), ray_ndc_delta(cam.scaled(64, 64), fr, (4, 4)),
                               atol=1e-12)


def test_parallel_rays_saturate_instead_of_failing():
    tgt = Camera.look_from((0, 0, 0), 16, 16, 16, 16)
    T = np.eye(4)
    T[:3, :3] = np.array([[0, 0, -1], [0, 1, 0], [1, 0, 0]])  # looking along world x
    side = Camera.from_params(16, 16, 8, 8, 16, 16, T)
    e = ray_ndc_delta(side, Frustum(tgt, 1.0, 10.0), (4, 4))
    assert np.isfinite(e).all() and np.all(np.abs(e) <= 1)
