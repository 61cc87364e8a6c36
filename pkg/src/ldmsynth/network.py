"""Input encoder, learned initialization, update blocks, layer collapse and the
multi-step update-and-fuse forward pass producing an LDM."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .attention import fusion_block
from .autodiff import ContractError, ParamStore, Tensor
from .config import ConfigError, ModelConfig, StepConfig, propagate_shapes
from .geometry import (Camera, Frustum, gather_backproject, layer_world_points,
                       ray_directional_encoding)
from .ldm import (DecodeHeads, Ldm, activate_depth, flat_depths, over_composite,
                  render_target, render_to_input_view, upsample_activate)

ENC_DIM_PER_OCTAVE = 4  # sin and cos of a 2-D vector


@dataclass
class PyramidSet:
    features: list[Tensor]  # per level: [M, h_k, w_k, C]
    rays: list[Tensor]  # per level: [M, h_k, w_k, C]
    cams: list[list[Camera]]  # per level, per view: camera scaled to the level size

    @property
    def views(self) -> int:
        return self.features[0].shape[0]


def _conv(x: Tensor, store: ParamStore, name: str, cin: int, cout: int) -> Tensor:
    k = store.get(f"{name}/w", (3, 3, cin, cout), fan_in=9 * cin)
    b = store.get(f"{name}/b", (cout,), init="constant")
    return ad.conv2d_3x3(x, k, b)


def res_block(x: Tensor, store: ParamStore, name: str) -> Tensor:
    C = x.shape[-1]
    y = _conv(ad.gelu(_conv(x, store, f"{name}/conv1", C, C)), store, f"{name}/conv2", C, C)
    return ad.add(x, y)


def heads_from(store: ParamStore, C: int) -> DecodeHeads:
    return DecodeHeads(
        store.get("heads/density", (C, 1), fan_in=C),
        store.get("heads/depth", (C, 1), fan_in=C),
        store.get("heads/appearance", (C, C), fan_in=C),
    )


# ----------------------------------------------------------------------------
# encoder


def encode_inputs(images: Tensor, cams: list[Camera], frustum: Frustum, cfg: ModelConfig,
                  store: ParamStore) -> PyramidSet:
    """Shared-weight per-view feature pyramid plus projected ray encodings per level."""
    M, H, W, _ = images.shape
    C = cfg.channels
    if len(cams) != M:
        raise ContractError(f"{len(cams)} cameras for {M} images")
    x = _conv(images, store, "encoder/stem", 3, C)
    feats = []
    for k in range(cfg.pyramid_levels):
        for b in range(cfg.encoder_blocks):
            x = res_block(x, store, f"encoder/level{k}/block{b}")
        x = ad.mean_pool_down2(x)
        feats.append(x)

    grid = cfg.level_size(cfg.steps[0].pyramid_level)
    enc_dim = ENC_DIM_PER_OCTAVE * cfg.ray_octaves
    raw = np.stack([ray_directional_encoding(c, frustum, grid, dtype=store.dtype) for c in cams])
    ad._count("ray_encoding", raw.size)
    if cfg.ablations.zero_ray_encoding:
        raw = np.zeros_like(raw)
    raw_t = Tensor(raw)
    rays, level_cams = [], []
    for k in range(cfg.pyramid_levels):
        hk, wk = cfg.level_size(k)
        proj = store.get(f"rayproj/level{k}", (enc_dim, C), fan_in=enc_dim)
        rays.append(ad.matmul(ad.resize_bilinear(raw_t, hk, wk), proj))
        level_cams.append([c.scaled(wk, hk) for c in cams])
    return PyramidSet(feats, rays, level_cams)


# ----------------------------------------------------------------------------
# update path


def update_cnn(x: Tensor, store: ParamStore, prefix: str, C: int, blocks: int) -> Tensor:
    y = _conv(x, store, f"{prefix}/conv_in", x.shape[-1], C)
    for b in range(blocks):
        y = res_block(y, store, f"{prefix}/res{b}")
    return _conv(y, store, f"{prefix}/conv_out", C, C)


def _backproject_all(img_feats: Tensor, cams: list[Camera], points: Tensor) -> Tensor:
    per_view = [gather_backproject(img_feats[m], cams[m], points)[0] for m in range(len(cams))]
    return ad.stack(per_view, axis=0)


def initial_update(V_shape, pyr: PyramidSet, step: StepConfig, frustum: Frustum, cfg: ModelConfig,
                   store: ParamStore) -> tuple[Tensor, Tensor]:
    """Update features for the initialize step: no rendered image, flat layers at the anchors."""
    L, h, w, C = V_shape
    k = step.pyramid_level
    x = ad.concat([pyr.features[k], pyr.rays[k]], axis=-1)
    out = update_cnn(x, store, f"{step.name}/update", C, cfg.update_blocks)
    depth = flat_depths(L, h, w, frustum, dtype=store.dtype)
    deltas = _backproject_all(out, pyr.cams[k], layer_world_points(frustum, depth))
    return deltas, depth


def update_block(V: Tensor, pyr: PyramidSet, step: StepConfig, prev_level: int, frustum: Frustum,
                 cfg: ModelConfig, store: ParamStore) -> tuple[Tensor, Tensor, Tensor]:
    """Render V into every view, refine with a small CNN and back-project.

    Returns (V at the step's volume size, deltas [M, L, H, W, C], depth used).
    """
    C = cfg.channels
    k = step.pyramid_level
    hk, wk = cfg.level_size(k)
    M = pyr.views
    heads = heads_from(store, C)
    if cfg.ablations.zero_rendered_image:
        rend = Tensor(np.zeros((M, hk, wk, C + 1), dtype=store.dtype))
    else:
        rend = ad.stack([render_to_input_view(V, heads, pyr.cams[prev_level][m], frustum)
                         for m in range(M)], axis=0)
        rend = ad.resize_bilinear(rend, hk, wk)
    x = ad.concat([rend, pyr.features[k], pyr.rays[k]], axis=-1)
    out = update_cnn(x, store, f"{step.name}/update", C, cfg.update_blocks)
    V = ad.resize_bilinear(V, *step.volume)
    depth = activate_depth(V, heads.depth, frustum)
    deltas = _backproject_all(out, pyr.cams[k], layer_world_points(frustum, depth))
    return V, deltas, depth


def layer_collapse(V: Tensor, store: ParamStore, prefix: str) -> Tensor:
    """Halve the layer count: mean of adjacent layers plus a per-texel MLP of their concatenation."""
    L, H, W, C = V.shape
    if L % 2:
        raise ContractError(f"layer collapse needs an even layer count, got {L}")
    a = V[0::2]
    b = V[1::2]
    mean = ad.mul(ad.add(a, b), 0.5)
    cat = ad.concat([a, b], axis=-1)
    w1 = store.get(f"{prefix}/fc1/w", (2 * C, C), fan_in=2 * C)
    b1 = store.get(f"{prefix}/fc1/b", (C,), init="constant")
    w2 = store.get(f"{prefix}/fc2/w", (C, C), fan_in=C)
    b2 = store.get(f"{prefix}/fc2/b", (C,), init="constant")
    hidden = ad.gelu(ad.add(ad.matmul(cat, w1), b1))
    return ad.add(mean, ad.add(ad.matmul(hidden, w2), b2))


def decode_blend_logits(V: Tensor, deltas: Tensor, store: ParamStore) -> Tensor:
    """Single-head attention scores between the normalised volume and each view's update -> [L, H, W, M]."""
    C = V.shape[-1]
    gain = store.get("blend/norm", (C,), init="constant", value=1.0)
    wb = store.get("blend/w", (C, C), fan_in=C)
    q = ad.matmul(ad.rms_norm(V, gain), wb)
    return ad.mul(ad.einsum("lhwc,mlhwc->lhwm", q, deltas), 1.0 / np.sqrt(C))


# ----------------------------------------------------------------------------
# forward


def _validate(images: Tensor, cams: list[Camera], target: Frustum, cfg: ModelConfig) -> None:
    propagate_shapes(cfg)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ConfigError(f"images must be [M, H, W, 3], got {images.shape}")
    M, H, W, _ = images.shape
    if M != cfg.views:
        raise ConfigError(f"config expects {cfg.views} views, got {M}")
    if (H, W) != tuple(cfg.image_size):
        raise ConfigError(f"config image_size {cfg.image_size} != images {(H, W)}")
    if len(cams) != M:
        raise ConfigError(f"{len(cams)} cameras for {M} views")
    tc = target.camera
    if (tc.height, tc.width) != tuple(cfg.output_size):
        raise ConfigError(f"target camera {(tc.height, tc.width)} != output_size {cfg.output_size}")


def forward(images: Tensor, cams: list[Camera], target: Frustum, cfg: ModelConfig,
            store: ParamStore) -> tuple[Ldm, dict]:
    _validate(images, cams, target, cfg)
    C = cfg.channels
    abl = cfg.ablations
    pyr = encode_inputs(images, cams, target, cfg, store)
    heads = heads_from(store, C)

    init = cfg.steps[0]
    L0 = init.out_layers
    h0, w0 = init.volume
    c0 = store.get("init/c0", (C,), fan_in=C)
    V = ad.broadcast_to(ad.reshape(c0, (1, 1, 1, C)), (L0, h0, w0, C))
    deltas, _ = initial_update(V.shape, pyr, init, target, cfg, store)
    for g, (h, n) in enumerate(init.fusion_groups()):
        V = fusion_block(V, deltas, store, f"{init.name}/fusion{g}", h, n, abl.zero_keys)

    prev_level = init.pyramid_level
    for step in cfg.steps[1:]:
        for j in range(step.collapses()):
            V = layer_collapse(V, store, f"{step.name}/collapse{j}")
        V, deltas, _ = update_block(V, pyr, step, prev_level, target, cfg, store)
        for g, (h, n) in enumerate(step.fusion_groups()):
            V = fusion_block(V, deltas, store, f"{step.name}/fusion{g}", h, n, abl.zero_keys)
        prev_level = step.pyramid_level

    logits = decode_blend_logits(V, deltas, store)
    ldm = upsample_activate(V, heads, logits, cfg.upsample, target)
    aux = {"blend_logits": logits, "deltas": deltas, "volume": V}
    if abl.rgb_output:
        Ho, Wo = ldm.depth.shape[1:]
        a = ad.resize_bilinear(ad.matmul(V, heads.appearance)[..., :3], Ho, Wo)
        aux["rgb"] = ad.sigmoid(a)
    return ldm, aux


def render_output(ldm: Ldm, aux: dict, images: Tensor, cams: list[Camera]) -> Tensor:
    """Target image: image-based blend, or direct appearance colors for the RGB-output ablation."""
    if "rgb" in aux:
        return over_composite(aux["rgb"], ldm.density)
    return render_target(ldm, images, cams)


def build_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ParamStore:
    """Create every parameter the forward pass touches by running it once on blank inputs."""
    store = ParamStore(seed=seed, dtype=dtype)
    H, W = cfg.image_size
    Ho, Wo = cfg.output_size
    cams = [Camera.look_from((0.1 * m, 0.0, 0.0), W, W, W, H) for m in range(cfg.views)]
    target = Frustum(Camera.look_from((0.0, 0.0, 0.0), Wo, Wo, Wo, Ho), cfg.near, cfg.far)
    images = Tensor(np.zeros((cfg.views, H, W, 3), dtype=dtype))
    forward(images, cams, target, cfg, store)
    return store


def count_forward_ops(cfg: ModelConfig, views: int, seed: int = 0) -> dict[str, int]:
    """Op costs of one forward pass with ``views`` inputs; costs depend only on shapes."""
    cfg = cfg.with_views(views)
    store = build_params(cfg, seed=seed, dtype=np.float32)
    H, W = cfg.image_size
    Ho, Wo = cfg.output_size
    cams = [Camera.look_from((0.1 * m, 0.0, 0.0), W, W, W, H) for m in range(views)]
    target = Frustum(Camera.look_from((0.0, 0.0, 0.0), Wo, Wo, Wo, Ho), cfg.near, cfg.far)
    images = Tensor(np.zeros((views, H, W, 3), dtype=np.float32))
    with ad.count_ops() as counts:
        ldm, aux = forward(images, cams, target, cfg, store)
        render_output(ldm, aux, images, cams)
    return dict(counts)


@dataclass
class CostModel:
    views: tuple[int, ...]
    totals: tuple[int, ...]
    T_V: Fraction
    T_image: Fraction
    residuals: tuple[Fraction, ...]
    by_kind: dict[str, tuple[int, ...]]


def fit_cost_model(cfg: ModelConfig, views=(2, 4, 8)) -> CostModel:
    """Fit total = T_V + M * T_image exactly from the first two view counts; report residuals for all."""
    per = [count_forward_ops(cfg, m) for m in views]
    totals = [sum(c.values()) for c in per]
    m0, m1 = views[0], views[1]
    slope = Fraction(totals[1] - totals[0], m1 - m0)
    T_V = totals[0] - m0 * slope
    residuals = tuple(t - (T_V + m * slope) for m, t in zip(views, totals))
    kinds = sorted(set().union(*per))
    by_kind = {k: tuple(c.get(k, 0) for c in per) for k in kinds}
    return CostModel(tuple(views), tuple(totals), T_V, slope, residuals, by_kind)
