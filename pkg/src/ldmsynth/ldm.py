"""Layered depth maps: decoding from a feature volume, over-compositing and rendering.

Layer index 0 is the farthest layer (smallest disparity anchor); compositing
runs from index 0 up to the nearest layer L-1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .geometry import Camera, Frustum, gather_backproject, layer_world_points, splat_project


@dataclass
class Ldm:
    depth: Tensor  # [L, H, W]
    density: Tensor  # [L, H, W]
    blend: Tensor  # [L, H, W, M]
    frustum: Frustum

    @property
    def num_layers(self) -> int:
        return self.depth.shape[0]

    @property
    def num_views(self) -> int:
        return self.blend.shape[-1]


@dataclass
class FeatureVolume:
    V: Tensor  # [L, H, W, C]
    step: int
    frustum: Frustum


@dataclass
class DecodeHeads:
    density: Tensor  # [C, 1]
    depth: Tensor  # [C, 1]
    appearance: Tensor  # [C, Ca]


def depth_anchors(L: int) -> np.ndarray:
    if L < 1:
        raise ContractError("need at least one layer")
    return (np.arange(1, L + 1) - 0.5) / L


def disparity_bands(L: int, frustum: Frustum) -> tuple[np.ndarray, np.ndarray]:
    """Inclusive [low, high] disparity of each layer's band."""
    span = 1.0 / frustum.near - 1.0 / frustum.far
    a = depth_anchors(L)
    return (a - 0.5 / L) * span + 1.0 / frustum.far, (a + 0.5 / L) * span + 1.0 / frustum.far


def depth_from_logits(logits: Tensor, frustum: Frustum) -> Tensor:
    """Map per-layer pre-activations [L, H, W] to z-depths inside each layer's disparity band."""
    L = logits.shape[0]
    anchors = depth_anchors(L).astype(logits.dtype).reshape((L,) + (1,) * (logits.ndim - 1))
    span = 1.0 / frustum.near - 1.0 / frustum.far
    rel = ad.add(anchors, ad.mul(ad.tanh(logits), 0.5 / L))
    disparity = ad.add(ad.mul(rel, span), 1.0 / frustum.far)
    return ad.div(1.0, disparity)


def flat_depths(L: int, H: int, W: int, frustum: Frustum, dtype=np.float32) -> Tensor:
    return depth_from_logits(Tensor(np.zeros((L, H, W), dtype=dtype)), frustum)


def _project_head(V: Tensor, w: Tensor) -> Tensor:
    out = ad.matmul(V, w)
    return out[..., 0] if w.shape[1] == 1 else out


def activate_depth(V: Tensor, W_d: Tensor, frustum: Frustum) -> Tensor:
    return depth_from_logits(_project_head(V, W_d), frustum)


def activate_density(V: Tensor, W_sigma: Tensor) -> Tensor:
    return ad.sigmoid(_project_head(V, W_sigma))


# ----------------------------------------------------------------------------
# compositing


def _over_forward(vals: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    L = vals.shape[0]
    partial = np.zeros((L + 1,) + vals.shape[1:], dtype=vals.dtype)
    for i in range(L):
        s = sigma[i][..., None]
        partial[i + 1] = vals[i] * s + (1.0 - s) * partial[i]
    return partial


def _over_backward(g, vals, sigma, partial):
    L = vals.shape[0]
    gv = np.empty_like(vals)
    gs = np.empty_like(sigma)
    for i in range(L - 1, -1, -1):
        s = sigma[i][..., None]
        gv[i] = g * s
        gs[i] = (g * (vals[i] - partial[i])).sum(axis=-1)
        g = g * (1.0 - s)
    return gv, gs


def over_composite(values: Tensor, sigma: Tensor) -> Tensor:
    """Back-to-front over operator: values [L, H, W, C], sigma [L, H, W] -> [H, W, C]."""
    if values.shape[:-1] != sigma.shape:
        raise ad.DimensionError(f"values {values.shape} and sigma {sigma.shape} disagree")
    partial = _over_forward(values.data, sigma.data)

    def bw(g):
        # looked up at call time so tests can substitute a faulty backward
        return _over_backward(g, values.data, sigma.data, partial)

    return ad.make(partial[-1].copy(), (values, sigma), bw, "over_composite",
                   cost=3 * values.data.size)


def composite_alpha(sigma: Tensor) -> Tensor:
    ones = Tensor(np.ones(sigma.shape + (1,), dtype=sigma.dtype))
    return over_composite(ones, sigma)


# ----------------------------------------------------------------------------
# rendering


def backproject_inputs(ldm: Ldm, inputs: Tensor, cams: list[Camera]) -> tuple[Tensor, np.ndarray]:
    """Samples of every input at every texel [L, H, W, M, C] and their validity [L, H, W, M]."""
    M = inputs.shape[0]
    if len(cams) != M or ldm.num_views != M:
        raise ContractError(f"{len(cams)} cameras, {M} images, LDM built for {ldm.num_views} views")
    points = layer_world_points(ldm.frustum, ldm.depth)
    samples, masks = [], []
    for m in range(M):
        vals, mask = gather_backproject(inputs[m], cams[m], points)
        samples.append(vals)
        masks.append(mask)
    return ad.stack(samples, axis=-2), np.stack(masks, axis=-1)


def blend_samples(blend: Tensor, samples: Tensor, mask: np.ndarray, exclude=None) -> Tensor:
    """Blend per-view samples with weights renormalised over valid (and not excluded) views."""
    if exclude is not None:
        mask = mask.copy()
        mask[..., exclude] = 0
    wts = ad.mul(blend, mask)
    total = ad.tsum(wts, axis=-1, keepdims=True)
    # texels seen by no view (or with no blend weight on the views that see them) blend to 0
    total = ad.add(total, (total.data == 0).astype(wts.dtype))
    wts = ad.div(wts, total)
    return ad.einsum("lhwm,lhwmc->lhwc", wts, samples)


def blend_backprojected(ldm: Ldm, inputs: Tensor, cams: list[Camera], exclude=None) -> Tensor:
    """Per-layer colors: blend weights renormalised over views whose sample is valid."""
    samples, mask = backproject_inputs(ldm, inputs, cams)
    return blend_samples(ldm.blend, samples, mask, exclude)


def render_target(ldm: Ldm, inputs: Tensor, cams: list[Camera], exclude=None) -> Tensor:
    """Render the LDM at its own target camera -> [H, W, 3]; ``exclude`` drops one view (held out)."""
    rgb = blend_backprojected(ldm, inputs, cams, exclude)
    return over_composite(rgb, ldm.density)


def render_depth(ldm: Ldm) -> Tensor:
    """Over-composite of the layer depths with the same densities -> [H, W]."""
    return over_composite(ad.reshape(ldm.depth, ldm.depth.shape + (1,)), ldm.density)[..., 0]


def render_novel(ldm: Ldm, inputs: Tensor, cams: list[Camera], cam: Camera, exclude=None) -> Tensor:
    """Render the LDM into an arbitrary camera by splatting blended layer colors and density."""
    return splat_composite(ldm, blend_backprojected(ldm, inputs, cams, exclude), cam)


def splat_composite(ldm: Ldm, rgb: Tensor, cam: Camera) -> Tensor:
    """Splat per-layer colors [L, H, W, C] and densities into cam, then composite."""
    points = layer_world_points(ldm.frustum, ldm.depth)
    rgb_v = splat_project(rgb, cam, points)
    sig_v = splat_project(ad.reshape(ldm.density, ldm.density.shape + (1,)), cam, points)
    return over_composite(rgb_v, sig_v[..., 0])


def render_novel_depth(ldm: Ldm, cam: Camera) -> Tensor:
    """Depth seen from cam: splat the layer z-depths in cam's frame and composite with density."""
    points = layer_world_points(ldm.frustum, ldm.depth)
    z_cam = ad.add(ad.matmul(points, cam.rotation[2:3].T.astype(points.dtype)),
                   float(cam.translation[2]))  # [L, H, W, 1]
    payload = ad.concat([z_cam, ad.reshape(ldm.density, ldm.density.shape + (1,))], axis=-1)
    splat = splat_project(payload, cam, points)
    return over_composite(splat[..., :1], splat[..., 1])[..., 0]


def render_to_input_view(V: Tensor, heads: DecodeHeads, cam: Camera, frustum: Frustum,
                         check: bool = True) -> Tensor:
    """Decode appearance/density/depth in layer space, splat into cam and composite.

    Returns [Hi, Wi, Ca + 1]: composited appearance features plus composited alpha.
    """
    a = ad.sigmoid(ad.matmul(V, heads.appearance))
    sigma = activate_density(V, heads.density)
    depth = activate_depth(V, heads.depth, frustum)
    points = layer_world_points(frustum, depth, check=check)
    payload = ad.concat([a, ad.reshape(sigma, sigma.shape + (1,))], axis=-1)
    splat = splat_project(payload, cam, points)
    a_img = splat[..., :-1]
    s_img = splat[..., -1]
    rgb = over_composite(a_img, s_img)
    alpha = composite_alpha(s_img)
    return ad.concat([rgb, alpha], axis=-1)


def upsample_activate(V: Tensor, heads: DecodeHeads, blend_logits: Tensor, s: float,
                      frustum: Frustum) -> Ldm:
    """Upsample pre-activations by ``s`` then activate (banded depth, sigmoid density, softmax blend over views)."""
    if s < 1:
        raise ContractError("upsample factor must be >= 1")
    L, H, W, _ = V.shape
    Ho, Wo = int(round(H * s)), int(round(W * s))
    pre = ad.concat([ad.matmul(V, heads.depth), ad.matmul(V, heads.density), blend_logits], axis=-1)
    pre = ad.resize_bilinear(pre, Ho, Wo)
    depth = depth_from_logits(pre[..., 0], frustum)
    density = ad.sigmoid(pre[..., 1])
    blend = ad.softmax(pre[..., 2:], axis=-1)
    return Ldm(depth, density, blend, frustum)


def check_invariants(ldm: Ldm, tol_sum: float = 1e-5) -> list[str]:
    """Return a list of violated LDM invariants (empty when all hold)."""
    problems = []
    lo, hi = disparity_bands(ldm.num_layers, ldm.frustum)
    disp = 1.0 / ldm.depth.data.astype(np.float64)
    rtol = 1e-12 if ldm.depth.dtype == np.float64 else 1e-6
    lo = lo[:, None, None] * (1 - rtol)
    hi = hi[:, None, None] * (1 + rtol)
    if np.any(disp < lo) or np.any(disp > hi):
        problems.append("depth outside its disparity band")
    s = ldm.density.data
    if s.min() < 0 or s.max() > 1:
        problems.append("density outside [0, 1]")
    b = ldm.blend.data
    if b.min() < 0 or np.abs(b.sum(axis=-1) - 1).max() > tol_sum:
        problems.append("blend weights not on the simplex")
    return problems
