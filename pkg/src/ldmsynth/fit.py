"""Optimisation harnesses: direct LDM fitting, nano-network training, Adam and PSNR."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, NonFiniteError, ParamStore, Tensor
from .config import ModelConfig
from .geometry import Camera, Frustum, layer_world_points, splat_project
from .ldm import (Ldm, backproject_inputs, blend_samples, depth_from_logits, over_composite,
                  render_target, splat_composite)
from .network import build_params, forward, render_output

PSNR_INF = float("inf")
NANO_LR = 3e-3
INIT_OPAQUE_LOGIT = 4.0
INIT_CLEAR_LOGIT = -2.0


class FitError(RuntimeError):
    def __init__(self, step: int, msg: str):
        super().__init__(f"step {step}: {msg}")
        self.step = step


def psnr(a, b) -> float:
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr of {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_INF
    return 10.0 * np.log10(1.0 / mse)


@dataclass
class FitConfig:
    steps: int = 400
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l1_weight: float = 10.0
    depth_lr_scale: float = 1.0
    depth_smoothness: float = 1.0  # weight of an L1 penalty on neighbouring depth-logit differences
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ContractError("steps must be >= 0")
        if not self.lr > 0:
            raise ContractError("learning rate must be positive")


@dataclass
class FitReport:
    losses: list[float] = field(default_factory=list)
    psnr: dict[str, float] = field(default_factory=dict)
    wall_time: float = 0.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "loss"])
            for i, l in enumerate(self.losses):
                w.writerow([i, repr(float(l))])
            for k, v in self.psnr.items():
                w.writerow([f"psnr_{k}", repr(float(v))])


class Adam:
    """Adam over named tensors; ``scales`` multiplies the learning rate per name."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8,
                 scales: dict[str, float] | None = None):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.scales = scales or {}
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            lr = self.lr * self.scales.get(k, 1.0)
            upd = lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data -= upd.astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def _l1(pred: Tensor, target: np.ndarray, weight: float, mask: np.ndarray | None = None) -> Tensor:
    diff = ad.tabs(ad.sub(pred, target.astype(pred.dtype)))
    if mask is None:
        return ad.mul(ad.mean(diff), weight)
    m = np.broadcast_to(mask[..., None], diff.shape).astype(pred.dtype)
    return ad.mul(ad.tsum(ad.mul(diff, m)), weight / max(float(m.sum()), 1.0))


# ----------------------------------------------------------------------------
# direct LDM fitting


def find_view(cams: list[Camera], cam: Camera, tol: float = 1e-9) -> int | None:
    for m, c in enumerate(cams):
        same_pose = np.abs(c.camera_from_world - cam.camera_from_world).max() < tol
        K = c.scaled(cam.width, cam.height).intrinsics
        if same_pose and np.abs(K - cam.intrinsics).max() < tol:
            return m
    return None


@dataclass
class RawLdm:
    """Pre-activation tensors of an LDM being optimised."""
    depth_logits: Tensor  # [L, H, W]
    density_logits: Tensor  # [L, H, W]
    blend_logits: Tensor  # [L, H, W, M]
    frustum: Frustum

    @classmethod
    def initial(cls, L: int, M: int, frustum: Frustum, dtype=np.float64) -> "RawLdm":
        H, W = frustum.camera.height, frustum.camera.width
        z = np.zeros((L, H, W), dtype=dtype)
        # far layer starts opaque, nearer ones mostly clear
        dens = np.full((L, H, W), INIT_CLEAR_LOGIT, dtype=dtype)
        dens[0] = INIT_OPAQUE_LOGIT
        return cls(Tensor(z.copy(), True), Tensor(dens, True),
                   Tensor(np.zeros((L, H, W, M), dtype=dtype), True), frustum)

    def params(self) -> dict[str, Tensor]:
        return {"depth": self.depth_logits, "density": self.density_logits, "blend": self.blend_logits}

    def activate(self) -> Ldm:
        return Ldm(depth_from_logits(self.depth_logits, self.frustum), ad.sigmoid(self.density_logits),
                   ad.softmax(self.blend_logits, axis=-1), self.frustum)


def smoothness(x: Tensor) -> Tensor:
    """Mean absolute difference between horizontally and vertically adjacent texels of [L, H, W]."""
    dx = ad.tabs(ad.sub(x[:, :, 1:], x[:, :, :-1]))
    dy = ad.tabs(ad.sub(x[:, 1:], x[:, :-1]))
    return ad.add(ad.mean(dx), ad.mean(dy))


def coverage_mask(ldm: Ldm, valid: np.ndarray, exclude: int | None, cam: Camera | None = None) -> np.ndarray:
    """Pixels whose rendering draws only on texels some non-excluded view sees.

    ``valid`` is the [L, H, W, M] sample validity. With ``cam`` the mask is for
    splatting into that camera, where every layer must also land with at least
    half a texel of weight; otherwise it is for the LDM's own camera.
    """
    keep = np.ones(valid.shape[-1], dtype=bool)
    if exclude is not None:
        keep[exclude] = False
    seen = valid[..., keep].any(axis=-1)
    if cam is None:
        return seen.all(axis=0)
    points = Tensor(layer_world_points(ldm.frustum, ldm.depth, check=False).data)
    total = splat_project(Tensor(np.ones(seen.shape + (1,))), cam, points, normalize=False).data[..., 0]
    good = splat_project(Tensor(seen[..., None].astype(np.float64)), cam, points,
                         normalize=False).data[..., 0]
    return ((total >= 0.5) & (good >= total - 1e-9)).all(axis=0)


def leave_one_out_losses(ldm: Ldm, imgs: Tensor, cams: list[Camera], ref: int,
                         weight: float) -> list[Tensor]:
    """Per input view: L1 of its render with itself left out of the blend, on covered pixels."""
    samples, valid = backproject_inputs(ldm, imgs, cams)
    out = []
    for m in range(len(cams)):
        rgb = blend_samples(ldm.blend, samples, valid, exclude=m)
        if m == ref:
            mask = coverage_mask(ldm, valid, m)
            pred = over_composite(rgb, ldm.density)
        else:
            mask = coverage_mask(ldm, valid, m, cams[m])
            pred = splat_composite(ldm, rgb, cams[m])
        out.append(_l1(pred, imgs.data[m], weight, mask))
    return out


def fit_raw_ldm(images, cams: list[Camera], target: Frustum, L: int,
                config: FitConfig | None = None) -> tuple[Ldm, FitReport]:
    """Fit depth, density and blend logits directly against the input views.

    The LDM lives in the target frustum, whose camera must be one of the input
    cameras. Each input view is rendered with itself left out of the blend
    (the target view directly, the others by splatting), so the colors have to
    come from the other views and only correct geometry explains all of them.
    """
    config = config or FitConfig()
    imgs = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float64))
    M = imgs.shape[0]
    if M < 2:
        raise ContractError("fitting needs at least 2 input views")
    ref = find_view(cams, target.camera)
    if ref is None:
        raise ContractError("target camera must coincide with one of the input cameras")
    cam = target.camera
    ref_img = imgs.data[ref]
    if ref_img.shape[:2] != (cam.height, cam.width):
        raise ContractError(f"target camera {cam.height}x{cam.width} does not match image {ref_img.shape[:2]}")

    raw = RawLdm.initial(L, M, target, imgs.dtype)
    opt = Adam(raw.params(), config.lr, config.beta1, config.beta2, config.eps,
               scales={"depth": config.depth_lr_scale})
    report = FitReport()
    t0 = time.perf_counter()
    for step in range(config.steps):
        opt.zero_grad()
        try:
            ldm = raw.activate()
            terms = leave_one_out_losses(ldm, imgs, cams, ref, config.l1_weight / M)
            data = terms[0]
            for t in terms[1:]:
                data = ad.add(data, t)
            loss = data
            if config.depth_smoothness:
                loss = ad.add(loss, ad.mul(smoothness(raw.depth_logits), config.depth_smoothness))
        except NonFiniteError as e:
            raise FitError(step, str(e)) from e
        if not np.isfinite(loss.data):
            raise FitError(step, "loss is not finite")
        # the curve tracks the photometric term; the smoothness prior is not part of it
        report.losses.append(float(data.data))
        ad.backward(loss)
        opt.step()
    ldm = raw.activate()
    report.psnr[f"view{ref}"] = held_out_psnr(ldm, imgs, cams, ref)
    report.wall_time = time.perf_counter() - t0
    return ldm, report


def held_out_psnr(ldm: Ldm, imgs: Tensor, cams: list[Camera], ref: int) -> float:
    """PSNR of the leave-one-out render at view ``ref`` over its covered pixels."""
    valid = backproject_inputs(ldm, imgs, cams)[1]
    mask = coverage_mask(ldm, valid, ref)
    pred = render_target(ldm, imgs, cams, exclude=ref).data
    return psnr(pred[mask], imgs.data[ref][mask])


# ----------------------------------------------------------------------------
# nano network training


@dataclass
class TrainScene:
    images: np.ndarray  # [M, H, W, 3]
    cams: list[Camera]
    target: Frustum
    target_image: np.ndarray  # [Ho, Wo, 3]


def train_nano(scenes: list[TrainScene], cfg: ModelConfig, config: FitConfig | None = None,
               store: ParamStore | None = None, dtype=np.float32) -> tuple[ParamStore, FitReport]:
    """Adam on 10 * L1 between the rendered target and the held-out image, cycling through scenes."""
    config = config or FitConfig(steps=500, lr=NANO_LR)
    if not scenes:
        raise ContractError("need at least one training scene")
    store = store or build_params(cfg, seed=config.seed, dtype=dtype)
    params = dict(store.items())
    for p in params.values():
        p.requires_grad = True
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.eps)
    data = [(Tensor(np.asarray(s.images, dtype=dtype)), s) for s in scenes]
    report = FitReport()
    t0 = time.perf_counter()
    for step in range(config.steps):
        imgs, sc = data[step % len(data)]
        opt.zero_grad()
        try:
            ldm, aux = forward(imgs, sc.cams, sc.target, cfg, store)
            loss = _l1(render_output(ldm, aux, imgs, sc.cams), np.asarray(sc.target_image), config.l1_weight)
        except NonFiniteError as e:
            raise FitError(step, str(e)) from e
        if not np.isfinite(loss.data):
            raise FitError(step, "loss is not finite")
        report.losses.append(float(loss.data))
        ad.backward(loss)
        opt.step()
    for i, (imgs, sc) in enumerate(data):
        ldm, aux = forward(imgs, sc.cams, sc.target, cfg, store)
        report.psnr[f"scene{i}"] = psnr(np.clip(render_output(ldm, aux, imgs, sc.cams).data, 0, 1),
                                        np.asarray(sc.target_image))
    report.wall_time = time.perf_counter() - t0
    return store, report


def save_report(report: FitReport, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(path)
