"""Pinhole cameras, bilinear gather/splat between layer space and image space,
and the near/far ray directional encoding.

Pixel convention: pixel (row i, col j) covers [j, j+1] x [i, i+1], so its
center sits at (u, v) = (j + 0.5, i + 0.5). Intrinsics use the same
continuous coordinates. Bilinear sampling treats the image as samples at
pixel centers, clamped at the borders (align-corners-false).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor

SPLAT_EPS = 1e-4
Z_MIN = 1e-6
RAY_T_BOUND = 1e4


@dataclass(frozen=True)
class Camera:
    intrinsics: np.ndarray  # 3x3
    camera_from_world: np.ndarray  # 4x4 rigid
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64)
        T = np.asarray(self.camera_from_world, dtype=np.float64)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "camera_from_world", T)
        if K.shape != (3, 3) or T.shape != (4, 4):
            raise ContractError("camera needs 3x3 intrinsics and 4x4 camera_from_world")
        if not (K[0, 0] > 0 and K[1, 1] > 0):
            raise ContractError("focal lengths must be positive")
        R = T[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-5:
            raise ContractError("camera_from_world rotation is not orthonormal")
        if self.width < 1 or self.height < 1:
            raise ContractError("image size must be positive")

    @classmethod
    def from_params(cls, fx, fy, cx, cy, width, height, camera_from_world=None) -> "Camera":
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        T = np.eye(4) if camera_from_world is None else np.asarray(camera_from_world, float)
        return cls(K, T, int(width), int(height))

    @classmethod
    def look_from(cls, position, fx, fy, width, height, cx=None, cy=None) -> "Camera":
        """Camera at ``position`` with identity orientation (looking down +z)."""
        T = np.eye(4)
        T[:3, 3] = -np.asarray(position, float)
        return cls.from_params(fx, fy, width / 2 if cx is None else cx,
                               height / 2 if cy is None else cy, width, height, T)

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsics[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsics[1, 2])

    @property
    def rotation(self) -> np.ndarray:
        return self.camera_from_world[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.camera_from_world[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def scaled(self, width: int, height: int) -> "Camera":
        """Same camera at a different image resolution."""
        sx, sy = width / self.width, height / self.height
        K = self.intrinsics.copy()
        K[0] *= sx
        K[1] *= sy
        return Camera(K, self.camera_from_world, int(width), int(height))

    def pixel_rays(self, h: int, w: int) -> np.ndarray:
        """Camera-space rays (z = 1) through the centers of an h x w grid spanning the image."""
        u = (np.arange(w) + 0.5) * (self.width / w)
        v = (np.arange(h) + 0.5) * (self.height / h)
        uu, vv = np.meshgrid(u, v)
        pix = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
        return pix @ np.linalg.inv(self.intrinsics).T

    def project(self, points: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """World points [..., 3] -> (u, v, z) with z the camera-space depth."""
        pc = ad.add(ad.matmul(points, self.rotation.T), self.translation.astype(points.dtype))
        pix = ad.matmul(pc, self.intrinsics.T)
        z = pix[..., 2]
        zs = ad.clamp_min(z, Z_MIN)
        return pix[..., 0] / zs, pix[..., 1] / zs, z

    def project_np(self, points: np.ndarray) -> np.ndarray:
        pc = points @ self.rotation.T + self.translation
        pix = pc @ self.intrinsics.T
        return pix[..., :2] / pix[..., 2:3]

    def unproject_np(self, uv: np.ndarray, depth) -> np.ndarray:
        """Pixel coords [..., 2] at z-depth -> world points [..., 3]."""
        pix = np.concatenate([uv, np.ones_like(uv[..., :1])], axis=-1)
        rays = pix @ np.linalg.inv(self.intrinsics).T
        pc = rays * np.asarray(depth)[..., None]
        return (pc - self.translation) @ self.rotation


@dataclass(frozen=True)
class Frustum:
    camera: Camera
    near: float
    far: float

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise ContractError(f"frustum needs 0 < near < far, got {self.near}, {self.far}")


@dataclass
class RayEncodingParams:
    """Sinusoidal octave count plus one [4*octaves, C] projection per pyramid level."""

    octaves: int = 8
    projections: dict | None = None


# ----------------------------------------------------------------------------
# layer space


def layer_world_points(frustum: Frustum, depth: Tensor, check: bool = True) -> Tensor:
    """World position of each texel of layers [L, H, W] at the given z-depths."""
    d = depth.data
    if check:
        tol = 1e-5 * frustum.far
        if d.min() < frustum.near - tol or d.max() > frustum.far + tol:
            raise ContractError(f"layer depths [{d.min()}, {d.max()}] outside "
                                f"[{frustum.near}, {frustum.far}]")
    cam = frustum.camera
    H, W = depth.shape[-2:]
    rays = cam.pixel_rays(H, W).astype(depth.dtype)
    pc = ad.mul(ad.reshape(depth, depth.shape + (1,)), rays)
    return ad.matmul(ad.sub(pc, cam.translation.astype(depth.dtype)), cam.rotation.astype(depth.dtype))


# ----------------------------------------------------------------------------
# bilinear taps


def _taps(u: np.ndarray, v: np.ndarray, Hi: int, Wi: int):
    """Flat pixel indices, weights and coordinate derivatives of the 4 bilinear taps."""
    sx = np.clip(u - 0.5, 0.0, Wi - 1)
    sy = np.clip(v - 0.5, 0.0, Hi - 1)
    inx = (u - 0.5 > 0) & (u - 0.5 < Wi - 1)
    iny = (v - 0.5 > 0) & (v - 0.5 < Hi - 1)
    x0 = np.minimum(np.floor(sx).astype(np.int64), max(Wi - 2, 0))
    y0 = np.minimum(np.floor(sy).astype(np.int64), max(Hi - 2, 0))
    x1 = np.minimum(x0 + 1, Wi - 1)
    y1 = np.minimum(y0 + 1, Hi - 1)
    fx = sx - x0
    fy = sy - y0
    idx = np.stack([y0 * Wi + x0, y0 * Wi + x1, y1 * Wi + x0, y1 * Wi + x1])
    w = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx])
    dx = inx.astype(u.dtype)
    dy = iny.astype(u.dtype)
    dwdu = np.stack([-(1 - fy), (1 - fy), -fy, fy]) * dx
    dwdv = np.stack([-(1 - fx), -fx, (1 - fx), fx]) * dy
    return idx, w, dwdu, dwdv


def _tap_sum(w: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """sum_k w[k, n] * taps[k, n, c]"""
    return w[0, :, None] * taps[0] + w[1, :, None] * taps[1] + w[2, :, None] * taps[2] + w[3, :, None] * taps[3]


def inside_mask(u: np.ndarray, v: np.ndarray, z: np.ndarray, Hi: int, Wi: int) -> np.ndarray:
    return (z > Z_MIN) & (u >= 0) & (u <= Wi) & (v >= 0) & (v <= Hi)


def bilinear_sample(image: Tensor, u: Tensor, v: Tensor) -> Tensor:
    """Sample image [Hi, Wi, C] at continuous pixel coords u, v of any shape S -> [*S, C]."""
    Hi, Wi, C = image.shape
    S = u.shape
    idx, w, dwdu, dwdv = _taps(u.data.ravel(), v.data.ravel(), Hi, Wi)
    flat = image.data.reshape(-1, C)
    taps = flat[idx]  # [4, N, C]
    out = _tap_sum(w, taps).reshape(*S, C)

    def bw(g):
        g2 = g.reshape(-1, C)
        gimg = _scatter(idx, w, g2, Hi * Wi).reshape(Hi, Wi, C)
        gu = (_tap_sum(dwdu, taps) * g2).sum(axis=-1).reshape(S)
        gv = (_tap_sum(dwdv, taps) * g2).sum(axis=-1).reshape(S)
        return gimg, gu, gv

    return ad.make(out, (image, u, v), bw, "gather", cost=4 * out.size)


def _scatter(idx: np.ndarray, w: np.ndarray, vals: np.ndarray, n: int) -> np.ndarray:
    """Sum w[k, i] * vals[i] into n bins at idx[k, i]; bincount keeps a fixed summation order."""
    C = vals.shape[1]
    out = np.empty((n, C), dtype=vals.dtype)
    flat_idx = idx.ravel()
    for c in range(C):
        out[:, c] = np.bincount(flat_idx, weights=(w * vals[None, :, c]).ravel(), minlength=n)
    return out


def bilinear_splat(values: Tensor, u: Tensor, v: Tensor, Hi: int, Wi: int) -> Tensor:
    """Scatter-add values [L, H, W, C] to [L, Hi, Wi, C] with bilinear weights, layer by layer."""
    L = values.shape[0]
    C = values.shape[-1]
    idx, w, dwdu, dwdv = _taps(u.data.ravel(), v.data.ravel(), Hi, Wi)
    per_layer = u.data.size // L
    layer = np.repeat(np.arange(L), per_layer)
    idx = idx + layer[None, :] * (Hi * Wi)
    vals = values.data.reshape(-1, C)
    out = _scatter(idx, w, vals, L * Hi * Wi).reshape(L, Hi, Wi, C)

    def bw(g):
        g2 = g.reshape(-1, C)
        taps = g2[idx]  # [4, N, C]
        gvals = _tap_sum(w, taps).reshape(values.shape)
        gu = (_tap_sum(dwdu, taps) * vals).sum(axis=-1).reshape(u.shape)
        gv = (_tap_sum(dwdv, taps) * vals).sum(axis=-1).reshape(v.shape)
        return gvals, gu, gv

    return ad.make(out, (values, u, v), bw, "splat", cost=4 * values.data.size)


# ----------------------------------------------------------------------------
# projection operators


def gather_backproject(image: Tensor, cam: Camera, points: Tensor) -> tuple[Tensor, np.ndarray]:
    """Back-project an image onto layer points [L, H, W, 3]: bilinear samples plus validity mask."""
    Hi, Wi, _ = image.shape
    if (Wi, Hi) != (cam.width, cam.height):
        cam = cam.scaled(Wi, Hi)
    u, v, z = cam.project(points)
    mask = inside_mask(u.data, v.data, z.data, Hi, Wi)
    vals = bilinear_sample(image, u, v)
    return ad.mul(vals, mask[..., None].astype(vals.dtype)), mask.astype(vals.dtype)


def splat_project(values: Tensor, cam: Camera, points: Tensor, normalize: bool = True,
                  eps: float = SPLAT_EPS) -> Tensor:
    """Splat layer values [L, H, W, C] into cam's image plane -> [L, Hi, Wi, C]."""
    Hi, Wi = cam.height, cam.width
    u, v, z = cam.project(points)
    mask = inside_mask(u.data, v.data, z.data, Hi, Wi).astype(values.dtype)[..., None]
    raw = bilinear_splat(ad.mul(values, mask), u, v, Hi, Wi)
    if not normalize:
        return raw
    ones = ad.Tensor(np.broadcast_to(mask, values.shape[:-1] + (1,)).copy())
    wsum = bilinear_splat(ones, u, v, Hi, Wi)
    return ad.div(raw, ad.clamp_min(wsum, eps))


# ----------------------------------------------------------------------------
# ray directional encoding


def ray_ndc_delta(input_cam: Camera, frustum: Frustum, grid: tuple[int, int]) -> np.ndarray:
    """tanh of the target-NDC offset between far- and near-plane hits, per grid ray -> [h, w, 2]."""
    h, w = grid
    tgt = frustum.camera
    rays = input_cam.pixel_rays(h, w)
    d_world = rays @ input_cam.rotation  # R^T d
    o_t = tgt.rotation @ input_cam.center + tgt.translation
    d_t = d_world @ tgt.rotation.T
    dz = d_t[..., 2]
    dz = np.where(np.abs(dz) < 1e-12, np.where(dz < 0, -1e-12, 1e-12), dz)
    K = tgt.intrinsics
    ndc = []
    for plane in (frustum.near, frustum.far):
        t = np.clip((plane - o_t[2]) / dz, -RAY_T_BOUND, RAY_T_BOUND)
        hit = o_t + t[..., None] * d_t
        # projective coordinates of the hit relative to the plane depth
        x = hit[..., 0] / plane
        y = hit[..., 1] / plane
        u = K[0, 0] * x + K[0, 1] * y + K[0, 2]
        v = K[1, 1] * y + K[1, 2]
        ndc.append(np.stack([2 * u / tgt.width - 1, 2 * v / tgt.height - 1], axis=-1))
    return np.tanh(ndc[1] - ndc[0])


def sinusoidal_encoding(e: np.ndarray, octaves: int = 8) -> np.ndarray:
    """[..., D] -> [..., 2 * D * octaves]: all sin terms then all cos terms."""
    freqs = (2.0 ** np.arange(octaves)) * np.pi
    arg = (e[..., :, None] * freqs).reshape(*e.shape[:-1], -1)
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def ray_directional_encoding(input_cam: Camera, frustum: Frustum, grid: tuple[int, int],
                             params: RayEncodingParams | None = None, level=None,
                             dtype=np.float64):
    """Encoded ray directions on ``grid``; projected to C channels when a projection is given."""
    octaves = 8 if params is None else params.octaves
    enc = sinusoidal_encoding(ray_ndc_delta(input_cam, frustum, grid), octaves).astype(dtype)
    if params is None or params.projections is None:
        return enc
    return ad.matmul(Tensor(enc), params.projections[level])
