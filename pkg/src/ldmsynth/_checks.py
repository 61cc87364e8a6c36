"""Finite-difference problems for every differentiable op, registered by module.

Each builder returns (fn, inputs, options): ``fn`` maps the float64 leaf tensors
in ``inputs`` to a scalar, a fixed random weighting of the op's output so no
gradient entry cancels by symmetry.
"""
from __future__ import annotations

import zlib

import numpy as np

from . import autodiff as ad
from .attention import (fold_params, fusion_block, one_to_many_attention,
                        random_std_params, standard_cross_attention)
from .autodiff import ParamStore, Tensor
from .config import nano_config
from .geometry import (Camera, Frustum, bilinear_sample, bilinear_splat, gather_backproject,
                       layer_world_points, splat_project)
from .gradcheck import register
from .ldm import (DecodeHeads, Ldm, activate_density, depth_from_logits, over_composite,
                  render_novel, render_target, render_to_input_view, upsample_activate)
from .network import build_params, decode_blend_logits, forward, layer_collapse, render_output, update_cnn


def _rng(tag: str) -> np.random.Generator:
    return np.random.default_rng([7, zlib.crc32(tag.encode())])


def _leaf(rng, *shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _weighted(out_fn, rng):
    """Scalar sum(out * R) for a fixed random R drawn on first call."""
    cache = {}

    def fn():
        out = out_fn()
        if "R" not in cache:
            cache["R"] = rng.standard_normal(out.shape)
        return ad.tsum(ad.mul(out, cache["R"]))
    return fn


def _scene(texels=6, image=10, views=3):
    """Small target frustum and input cameras that all see the layer volume."""
    tcam = Camera.look_from((0.0, 0.0, 0.0), texels, texels, texels, texels)
    frustum = Frustum(tcam, 1.0, 8.0)
    cams = [Camera.look_from((0.07 * (m - 1), 0.03 * m, 0.0), image * 0.8, image * 0.8, image, image)
            for m in range(views)]
    return frustum, cams


# ----------------------------------------------------------------------------
# core ops


@register("autodiff", "matmul")
def _():
    r = _rng("matmul")
    a, b = _leaf(r, 2, 3, 4), _leaf(r, 4, 5)
    return _weighted(lambda: ad.matmul(a, b), r), {"a": a, "b": b}, {}


@register("autodiff", "einsum")
def _():
    r = _rng("einsum")
    a, b = _leaf(r, 3, 2, 4), _leaf(r, 3, 5, 4)
    return _weighted(lambda: ad.einsum("bhd,bnd->bhn", a, b), r), {"a": a, "b": b}, {}


@register("autodiff", "elementwise")
def _():
    r = _rng("elementwise")
    a, b = _leaf(r, 3, 4), _leaf(r, 4, lo=0.5, hi=2.0)
    return _weighted(lambda: ad.div(ad.sub(ad.mul(a, b), ad.neg(a)), ad.add(b, 1.0)), r), {"a": a, "b": b}, {}


@register("autodiff", "activations")
def _():
    r = _rng("activations")
    x = _leaf(r, 3, 5, lo=-2, hi=2)
    p = _leaf(r, 3, 5, lo=0.5, hi=2)

    def out():
        parts = [ad.sigmoid(x), ad.tanh(x), ad.gelu(x), ad.softmax(x, axis=-1), ad.exp(x), ad.log(p),
                 ad.tabs(x), ad.clamp_min(x, 0.1)]
        return ad.stack(parts, axis=0)
    return _weighted(out, r), {"x": x, "p": p}, {}


@register("autodiff", "reductions_and_shapes")
def _():
    r = _rng("shapes")
    x = _leaf(r, 2, 3, 4)
    y = _leaf(r, 2, 3, 4)

    def out():
        t = ad.transpose(ad.concat([x, y], axis=-1), (2, 0, 1))
        s = ad.stack([ad.tsum(x, axis=1), ad.mean(y, axis=1)], axis=0)
        g = x[:, 1:, ::2]
        return ad.concat([ad.reshape(t, (-1,)), ad.reshape(s, (-1,)), ad.reshape(g, (-1,)),
                          ad.reshape(ad.broadcast_to(ad.tsum(y, axis=0, keepdims=True), (2, 3, 4)), (-1,))])
    return _weighted(out, r), {"x": x, "y": y}, {}


@register("autodiff", "conv2d_3x3")
def _():
    r = _rng("conv")
    x, k, b = _leaf(r, 2, 5, 6, 3), _leaf(r, 3, 3, 3, 4), _leaf(r, 4)
    return _weighted(lambda: ad.conv2d_3x3(x, k, b), r), {"x": x, "k": k, "b": b}, {}


@register("autodiff", "rms_norm")
def _():
    r = _rng("rms")
    x, g = _leaf(r, 4, 6), _leaf(r, 6, lo=0.5, hi=1.5)
    return _weighted(lambda: ad.rms_norm(x, g), r), {"x": x, "gain": g}, {}


@register("autodiff", "resample")
def _():
    r = _rng("resample")
    x = _leaf(r, 2, 4, 6, 3)

    def out():
        up = ad.resize_bilinear(x, 8, 12)
        down = ad.mean_pool_down2(x)
        odd = ad.resize_bilinear(x, 3, 5)
        return ad.concat([ad.reshape(up, (-1,)), ad.reshape(down, (-1,)), ad.reshape(odd, (-1,))])
    return _weighted(out, r), {"x": x}, {}


# ----------------------------------------------------------------------------
# geometry


@register("geometry", "project")
def _():
    r = _rng("project")
    cam = Camera.look_from((0.1, -0.05, 0.0), 9.0, 8.0, 10, 10)
    p = Tensor(np.concatenate([r.uniform(-1, 1, (5, 2)), r.uniform(2, 4, (5, 1))], axis=1), True)

    def out():
        u, v, z = cam.project(p)
        return ad.stack([u, v, z], axis=-1)
    return _weighted(out, r), {"points": p}, {}


@register("geometry", "gather")
def _():
    r = _rng("gather")
    img = _leaf(r, 6, 7, 2)
    u = Tensor(r.uniform(0.7, 6.3, (4, 5)), True)
    v = Tensor(r.uniform(0.7, 5.3, (4, 5)), True)
    return _weighted(lambda: bilinear_sample(img, u, v), r), {"image": img, "u": u, "v": v}, {}


@register("geometry", "splat")
def _():
    r = _rng("splat")
    vals = _leaf(r, 2, 3, 4, 2)
    u = Tensor(r.uniform(0.7, 6.3, (2, 3, 4)), True)
    v = Tensor(r.uniform(0.7, 5.3, (2, 3, 4)), True)
    return _weighted(lambda: bilinear_splat(vals, u, v, 6, 7), r), {"values": vals, "u": u, "v": v}, {}


@register("geometry", "backproject")
def _():
    r = _rng("backproject")
    frustum, cams = _scene()
    img = _leaf(r, 10, 10, 3)
    logits = _leaf(r, 2, 6, 6, lo=-0.8, hi=0.8)

    def out():
        pts = layer_world_points(frustum, depth_from_logits(logits, frustum))
        return gather_backproject(img, cams[1], pts)[0]
    return _weighted(out, r), {"image": img, "depth_logits": logits}, {}


@register("geometry", "splat_project")
def _():
    r = _rng("splat_project")
    frustum, cams = _scene()
    vals = _leaf(r, 2, 6, 6, 2)
    logits = _leaf(r, 2, 6, 6, lo=-0.8, hi=0.8)

    def out():
        pts = layer_world_points(frustum, depth_from_logits(logits, frustum))
        return splat_project(vals, cams[2], pts)
    return _weighted(out, r), {"values": vals, "depth_logits": logits}, {}


# ----------------------------------------------------------------------------
# ldm


@register("ldm", "over_composite")
def _():
    r = _rng("over")
    vals = _leaf(r, 4, 3, 3, 2)
    sig = _leaf(r, 4, 3, 3, lo=0.05, hi=0.95)
    return _weighted(lambda: over_composite(vals, sig), r), {"values": vals, "sigma": sig}, {}


@register("ldm", "depth_activation")
def _():
    r = _rng("depth_act")
    frustum, _ = _scene()
    logits = _leaf(r, 3, 4, 4, lo=-2, hi=2)
    return _weighted(lambda: depth_from_logits(logits, frustum), r), {"logits": logits}, {}


@register("ldm", "density_activation")
def _():
    r = _rng("density_act")
    V, w = _leaf(r, 2, 3, 3, 4), _leaf(r, 4, 1)
    return _weighted(lambda: activate_density(V, w), r), {"V": V, "W_sigma": w}, {}


def _raw_ldm(r, frustum, L=2, M=3):
    return (_leaf(r, L, 6, 6, lo=-0.8, hi=0.8), _leaf(r, L, 6, 6, lo=-2, hi=2), _leaf(r, L, 6, 6, M))


@register("ldm", "render_target")
def _():
    r = _rng("render_target")
    frustum, cams = _scene()
    d, s, b = _raw_ldm(r, frustum)
    imgs = _leaf(r, 3, 10, 10, 3, lo=0, hi=1)

    def out():
        ldm = Ldm(depth_from_logits(d, frustum), ad.sigmoid(s), ad.softmax(b), frustum)
        return render_target(ldm, imgs, cams)
    return _weighted(out, r), {"depth": d, "density": s, "blend": b, "images": imgs}, {}


@register("ldm", "render_novel")
def _():
    r = _rng("render_novel")
    frustum, cams = _scene()
    d, s, b = _raw_ldm(r, frustum)
    imgs = _leaf(r, 3, 10, 10, 3, lo=0, hi=1)

    def out():
        ldm = Ldm(depth_from_logits(d, frustum), ad.sigmoid(s), ad.softmax(b), frustum)
        return render_novel(ldm, imgs, cams, cams[0], exclude=0)
    return _weighted(out, r), {"depth": d, "density": s, "blend": b}, {}


@register("ldm", "render_to_input_view")
def _():
    r = _rng("render_input")
    frustum, cams = _scene()
    V = _leaf(r, 2, 6, 6, 4)
    heads = DecodeHeads(_leaf(r, 4, 1), _leaf(r, 4, 1), _leaf(r, 4, 4))
    return (_weighted(lambda: render_to_input_view(V, heads, cams[1], frustum), r),
            {"V": V, "W_sigma": heads.density, "W_d": heads.depth, "W_a": heads.appearance}, {})


@register("ldm", "upsample_activate")
def _():
    r = _rng("upsample")
    frustum = Frustum(Camera.look_from((0, 0, 0), 8, 8, 8, 8), 1.0, 8.0)
    V = _leaf(r, 2, 4, 4, 4)
    heads = DecodeHeads(_leaf(r, 4, 1), _leaf(r, 4, 1), _leaf(r, 4, 4))
    logits = _leaf(r, 2, 4, 4, 3)

    def out():
        ldm = upsample_activate(V, heads, logits, 2.0, frustum)
        return ad.concat([ad.reshape(ldm.depth, (-1,)), ad.reshape(ldm.density, (-1,)),
                          ad.reshape(ldm.blend, (-1,))])
    return _weighted(out, r), {"V": V, "blend_logits": logits, "W_d": heads.depth}, {}


# ----------------------------------------------------------------------------
# attention


@register("attention", "one_to_many")
def _():
    r = _rng("otm")
    std = random_std_params(r, 8, 2)
    p = fold_params(std)
    p.W_q.requires_grad = p.W_O.requires_grad = True
    q, d = _leaf(r, 5, 8), _leaf(r, 5, 4, 8)
    return _weighted(lambda: one_to_many_attention(q, d, p), r), {"q": q, "deltas": d, "W_q": p.W_q, "W_O": p.W_O}, {}


@register("attention", "standard")
def _():
    r = _rng("std_attn")
    std = random_std_params(r, 8, 2)
    for t in (std.W_Q, std.W_K, std.W_V, std.W_O):
        t.requires_grad = True
    q, k = _leaf(r, 5, 8), _leaf(r, 5, 4, 8)
    return (_weighted(lambda: standard_cross_attention(q, k, std), r),
            {"q": q, "keys": k, "W_Q": std.W_Q, "W_K": std.W_K, "W_V": std.W_V, "W_O": std.W_O}, {})


@register("attention", "fusion_block")
def _():
    r = _rng("fusion")
    store = ParamStore(seed=3, dtype=np.float64)
    V = _leaf(r, 2, 4, 4, 8)
    deltas = _leaf(r, 3, 2, 4, 4, 8)
    fn = _weighted(lambda: fusion_block(V, deltas, store, "f", 2, 2), r)
    fn()  # create parameters
    inputs = {"V": V, "deltas": deltas, "wq": store["f/attn/wq"], "wo": store["f/attn/wo"],
              "norm": store["f/attn/norm"], "conv1": store["f/conv1/conv1/w"]}
    return fn, inputs, {"max_elems": 24}


# ----------------------------------------------------------------------------
# network


@register("network", "layer_collapse")
def _():
    r = _rng("collapse")
    store = ParamStore(seed=4, dtype=np.float64)
    V = _leaf(r, 4, 3, 3, 4)
    fn = _weighted(lambda: layer_collapse(V, store, "lc"), r)
    fn()
    return fn, {"V": V, "fc1": store["lc/fc1/w"], "fc2": store["lc/fc2/w"], "b1": store["lc/fc1/b"]}, {}


@register("network", "update_cnn")
def _():
    r = _rng("update_cnn")
    store = ParamStore(seed=5, dtype=np.float64)
    x = _leaf(r, 2, 5, 5, 6)
    fn = _weighted(lambda: update_cnn(x, store, "u", 4, 1), r)
    fn()
    return fn, {"x": x, "conv_in": store["u/conv_in/w"], "res": store["u/res0/conv2/w"]}, {"max_elems": 24}


@register("network", "blend_logits")
def _():
    r = _rng("blend_logits")
    store = ParamStore(seed=6, dtype=np.float64)
    V, d = _leaf(r, 2, 3, 3, 4), _leaf(r, 3, 2, 3, 3, 4)
    fn = _weighted(lambda: decode_blend_logits(V, d, store), r)
    fn()
    return fn, {"V": V, "deltas": d, "w": store["blend/w"]}, {}


def tiny_nano_config():
    """Nano structure at 32x32 with 2 views, small enough for finite differences."""
    return nano_config(views=2, image=32)


@register("network", "nano_forward")
def _():
    r = _rng("nano")
    cfg = tiny_nano_config()
    store = build_params(cfg, seed=0, dtype=np.float64)
    H, W = cfg.image_size
    cams = [Camera.look_from((0.1 * m - 0.05, 0.0, 0.0), W, W, W, H) for m in range(cfg.views)]
    target = Frustum(Camera.look_from((0.0, 0.0, 0.0), W, W, W, H), cfg.near, cfg.far)
    images = _leaf(r, cfg.views, H, W, 3, lo=0, hi=1)

    def out():
        ldm, aux = forward(images, cams, target, cfg, store)
        return render_output(ldm, aux, images, cams)
    names = ["encoder/stem/w", "rayproj/level2", "init/c0", "initialize/update/conv_in/w",
             "initialize/fusion0/attn/wq", "update0/fusion0/conv0/conv2/w", "update2/collapse0/fc1/w",
             "heads/depth", "heads/density", "blend/w"]
    inputs = {"images": images}
    inputs.update({n: store[n] for n in names})
    return _weighted(out, r), inputs, {"max_elems": 3, "directions": 2}
