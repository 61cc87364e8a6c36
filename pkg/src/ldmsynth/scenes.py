"""Synthetic textured-plane scenes, camera rigs and an exact ray-cast renderer."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ContractError
from .geometry import Camera, Frustum

BASELINE_PRESETS = {"small": 0.1, "medium": 0.2, "large": 0.3}
TEXTURE_PERIOD_PX = (10.0, 16.0)  # texture period range in pixels at the plane depth


@dataclass
class Texture:
    """Band-limited procedural texture evaluated at plane coordinates (x, y) in meters."""
    kind: str  # "checker" or "gradient"
    color0: tuple[float, float, float]
    color1: tuple[float, float, float]
    frequency: float  # cycles per meter
    phase: tuple[float, float] = (0.0, 0.0)
    angle: float = 0.0

    def __post_init__(self):
        if self.kind not in ("checker", "gradient"):
            raise ContractError(f"texture kind {self.kind!r} unknown")
        if self.frequency <= 0:
            raise ContractError("texture frequency must be positive")

    def evaluate(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        c, s = np.cos(self.angle), np.sin(self.angle)
        xr = c * x + s * y
        yr = -s * x + c * y
        w = 2 * np.pi * self.frequency
        if self.kind == "checker":
            t = 0.5 + 0.35 * np.sin(w * xr + self.phase[0]) * np.sin(w * yr + self.phase[1]) \
                + 0.15 * np.sin(0.5 * w * (xr + yr) + self.phase[0])
        else:
            t = 0.5 + 0.3 * np.sin(0.25 * w * xr + self.phase[0]) + 0.2 * np.sin(w * yr + self.phase[1])
        c0 = np.asarray(self.color0, dtype=np.float64)
        c1 = np.asarray(self.color1, dtype=np.float64)
        return c0 + t[..., None] * (c1 - c0)


@dataclass
class Plane:
    depth: float  # world z at the extent center
    extent: tuple[float, float, float, float]  # x0, x1, y0, y1 in world meters
    texture: Texture
    opacity: float = 1.0
    slope: tuple[float, float] = (0.0, 0.0)  # dz/dx, dz/dy; zero for fronto-parallel

    def __post_init__(self):
        x0, x1, y0, y1 = self.extent
        if not (x0 < x1 and y0 < y1):
            raise ContractError(f"empty plane extent {self.extent}")
        if not 0 < self.opacity <= 1:
            raise ContractError(f"opacity {self.opacity} outside (0, 1]")

    def center(self) -> tuple[float, float]:
        x0, x1, y0, y1 = self.extent
        return 0.5 * (x0 + x1), 0.5 * (y0 + y1)


@dataclass
class PlaneScene:
    planes: list[Plane]  # nearest first
    background: tuple[float, float, float]
    near: float
    far: float

    def __post_init__(self):
        if not self.planes:
            raise ContractError("a scene needs at least one plane")
        d = [p.depth for p in self.planes]
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ContractError(f"plane depths must be strictly increasing, got {d}")
        if not all(self.near < z < self.far for z in d):
            raise ContractError(f"plane depths {d} outside ({self.near}, {self.far})")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PlaneScene":
        planes = []
        for p in d["planes"]:
            p = dict(p)
            t = dict(p.pop("texture"))
            for k in ("color0", "color1", "phase"):
                if k in t:
                    t[k] = tuple(t[k])
            p["extent"] = tuple(p["extent"])
            if "slope" in p:
                p["slope"] = tuple(p["slope"])
            planes.append(Plane(texture=Texture(**t), **p))
        return cls(planes, tuple(d["background"]), float(d["near"]), float(d["far"]))


@dataclass
class RigSpec:
    """M cameras on a planar grid at z = 0, all looking down +z with shared intrinsics."""
    views: int
    baseline: float
    width: int = 64
    height: int = 64
    focal: float | None = None  # defaults to the image width
    rows: int = 1
    offset: tuple[float, float, float] = field(default=(0.0, 0.0, 0.0))

    def __post_init__(self):
        if self.views < 1:
            raise ContractError("a rig needs at least one camera")
        if not self.baseline > 0:
            raise ContractError(f"baseline must be positive, got {self.baseline}")
        if self.rows < 1 or self.rows > self.views:
            raise ContractError(f"rows {self.rows} incompatible with {self.views} views")

    @classmethod
    def preset(cls, name: str, views: int = 4, **kw) -> "RigSpec":
        return cls(views, BASELINE_PRESETS[name], **kw)

    @property
    def fx(self) -> float:
        return float(self.width if self.focal is None else self.focal)

    def positions(self) -> np.ndarray:
        cols = -(-self.views // self.rows)
        out = []
        for m in range(self.views):
            r, c = divmod(m, cols)
            out.append(((c - (cols - 1) / 2) * self.baseline, (r - (self.rows - 1) / 2) * self.baseline, 0.0))
        return np.asarray(out) + np.asarray(self.offset)

    def cameras(self) -> list[Camera]:
        return [Camera.look_from(p, self.fx, self.fx, self.width, self.height) for p in self.positions()]

    def center_camera(self, width: int | None = None, height: int | None = None) -> Camera:
        w = width or self.width
        h = height or self.height
        f = self.fx * w / self.width
        return Camera.look_from(self.positions().mean(axis=0), f, f, w, h)

    def reference_index(self) -> int:
        """The camera nearest the rig center (the middle-left one for an even row)."""
        d = np.linalg.norm(self.positions() - self.positions().mean(axis=0), axis=1)
        return int(np.argmin(np.round(d, 12)))


def _band_depths(rng: np.random.Generator, n: int, frustum: Frustum) -> list[float]:
    """Nearest first; plane i sits inside disparity band 2i+1 of 2n equal bands.

    The planes then fall strictly inside distinct bands of both an n- and a
    2n-layer partition, so LDMs with either layer count can represent them.
    """
    lo, hi = 1.0 / frustum.far, 1.0 / frustum.near
    width = (hi - lo) / (2 * n)
    out = []
    for i in range(n):
        band_hi = hi - (2 * i + 1) * width
        disp = band_hi - width * rng.uniform(0.3, 0.7)
        out.append(1.0 / disp)
    return out


def _random_texture(rng: np.random.Generator, depth: float, fx: float) -> Texture:
    period_px = rng.uniform(*TEXTURE_PERIOD_PX)
    c0 = rng.uniform(0.05, 0.45, size=3)
    c1 = rng.uniform(0.55, 0.95, size=3)
    return Texture(
        kind="checker" if rng.uniform() < 0.6 else "gradient",
        color0=tuple(float(v) for v in c0), color1=tuple(float(v) for v in c1),
        frequency=float(fx / (depth * period_px)),
        phase=tuple(float(v) for v in rng.uniform(0, 2 * np.pi, size=2)),
        angle=float(rng.uniform(-0.4, 0.4)),
    )


def make_scene(seed: int, num_planes: int, frustum: Frustum, opacity: float = 1.0,
               slanted: bool = False) -> PlaneScene:
    """Deterministic scene: the farthest plane is a wall filling the view, nearer planes are cards."""
    if num_planes < 1:
        raise ContractError("num_planes must be >= 1")
    rng = np.random.default_rng(seed)
    cam = frustum.camera
    depths = _band_depths(rng, num_planes, frustum)
    cx, cy, _ = cam.center
    planes = []
    for i, z in enumerate(depths):
        # half-extent of the view at this depth
        hx = z * cam.width / (2 * cam.fx)
        hy = z * cam.height / (2 * cam.fy)
        tex = _random_texture(rng, z, cam.fx)
        if i == num_planes - 1:
            extent = (cx - 4 * hx - 1, cx + 4 * hx + 1, cy - 4 * hy - 1, cy + 4 * hy + 1)
            alpha = 1.0
        else:
            wx = hx * rng.uniform(0.5, 0.8)
            wy = hy * rng.uniform(0.6, 1.2)
            ox = cx + hx * rng.uniform(-0.4, 0.4)
            oy = cy + hy * rng.uniform(-0.3, 0.3)
            extent = (ox - wx, ox + wx, oy - wy, oy + wy)
            alpha = opacity
        slope = tuple(float(v) for v in rng.uniform(-0.1, 0.1, size=2)) if slanted else (0.0, 0.0)
        planes.append(Plane(float(z), tuple(float(e) for e in extent), tex, float(alpha), slope))
    bg = tuple(float(v) for v in rng.uniform(0.0, 0.2, size=3))
    return PlaneScene(planes, bg, frustum.near, frustum.far)


def world_rays(cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Ray origin [3] and world directions [H, W, 3] scaled to unit camera-z."""
    d_cam = cam.pixel_rays(cam.height, cam.width)  # [H, W, 3] with z = 1
    return cam.center, d_cam @ cam.rotation  # R^T d for each row vector


def _intersect(plane: Plane, origin: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ray parameter t (camera z-depth) and world x, y of the hit, NaN-free; misses get t = inf."""
    sx, sy = plane.slope
    px, py = plane.center()
    # plane: z - sx (x - px) - sy (y - py) = depth
    n = np.array([-sx, -sy, 1.0])
    c = plane.depth - sx * px - sy * py
    denom = dirs @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (c - origin @ n) / denom
    x = origin[0] + t * dirs[..., 0]
    y = origin[1] + t * dirs[..., 1]
    x0, x1, y0, y1 = plane.extent
    hit = np.isfinite(t) & (t > 0) & (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)
    return np.where(hit, t, np.inf), np.where(hit, x, 0.0), np.where(hit, y, 0.0)


def oracle_render(scene: PlaneScene, cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Exact image [H, W, 3] and depth [H, W] (z of the nearest opaque hit, inf if none)."""
    origin, dirs = world_rays(cam)
    hits = [_intersect(p, origin, dirs) for p in scene.planes]
    t = np.stack([h[0] for h in hits])
    order = np.argsort(t, axis=0, kind="stable")
    color = np.zeros(t.shape[1:] + (3,))
    trans = np.ones(t.shape[1:])
    depth = np.full(t.shape[1:], np.inf)
    for rank in range(len(scene.planes)):
        for i, p in enumerate(scene.planes):
            sel = (order[rank] == i) & np.isfinite(t[i])
            if not sel.any():
                continue
            tex = p.texture.evaluate(hits[i][1][sel], hits[i][2][sel])
            color[sel] += (trans[sel] * p.opacity)[:, None] * tex
            if p.opacity >= 1.0:
                depth[sel] = np.where(np.isinf(depth[sel]), t[i][sel], depth[sel])
            trans[sel] *= 1.0 - p.opacity
    color += trans[..., None] * np.asarray(scene.background)
    # depth is the camera z; dirs have unit camera-z so t already is z
    return color, depth


@dataclass
class RenderedScene:
    scene: PlaneScene
    rig: RigSpec
    images: np.ndarray  # [M, H, W, 3]
    depths: np.ndarray  # [M, H, W]
    cams: list[Camera]


def render_rig(scene: PlaneScene, rig: RigSpec) -> RenderedScene:
    cams = rig.cameras()
    out = [oracle_render(scene, c) for c in cams]
    return RenderedScene(scene, rig, np.stack([o[0] for o in out]), np.stack([o[1] for o in out]), cams)
