"""File formats: named-tensor container, PFM/PPM images, camera JSON and scene bundles."""
from __future__ import annotations

import json
import math
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ParamStore, Tensor
from .geometry import Camera, Frustum
from .ldm import Ldm

MAGIC = b"QNTC"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
MAX_NDIM = 16
MAX_NAME = 1 << 16


class FormatError(ValueError):
    """Malformed file; ``field`` names the offending field."""

    def __init__(self, field: str, msg: str):
        super().__init__(f"{field}: {msg}")
        self.field = field


# ----------------------------------------------------------------------------
# named tensor container


def encode_container(tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype == np.float32:
            code = 0
        elif arr.dtype == np.float64:
            code = 1
        else:
            raise FormatError(f"{name}.dtype", f"unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BI", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, field: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(field, f"truncated: need {n} bytes at offset {self.pos}, "
                                     f"{len(self.buf) - self.pos} left")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str, field: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field))


def decode_container(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("magic", "not a QNTC container")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError("version", f"unsupported version {version}")
    (count,) = r.unpack("<I", "count")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        where = f"entries[{i}]"
        (nlen,) = r.unpack("<I", f"{where}.name_len")
        if nlen > MAX_NAME:
            raise FormatError(f"{where}.name_len", f"name length {nlen} too large")
        try:
            name = r.take(nlen, f"{where}.name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{where}.name", "not valid utf-8") from e
        if name in out:
            raise FormatError(f"{where}.name", f"duplicate name {name!r}")
        (code,) = r.unpack("<B", f"{where}.dtype")
        if code not in DTYPE_CODES:
            raise FormatError(f"{where}.dtype", f"unknown dtype code {code}")
        (ndim,) = r.unpack("<I", f"{where}.ndim")
        if ndim > MAX_NDIM:
            raise FormatError(f"{where}.ndim", f"ndim {ndim} exceeds {MAX_NDIM}")
        dims = r.unpack(f"<{ndim}Q", f"{where}.dims")
        dt = DTYPE_CODES[code]
        n = math.prod(dims)
        if n * dt.itemsize > len(buf) - r.pos:
            raise FormatError(f"{where}.data", f"truncated: dims {list(dims)} need {n * dt.itemsize} bytes, "
                                               f"{len(buf) - r.pos} left")
        data = r.take(n * dt.itemsize, f"{where}.data")
        out[name] = np.frombuffer(data, dtype=dt).reshape(dims).copy()
    if r.pos != len(buf):
        raise FormatError("trailer", f"{len(buf) - r.pos} unexpected bytes after the last entry")
    return out


def write_container(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_container(tensors))


def read_container(path) -> dict[str, np.ndarray]:
    return decode_container(Path(path).read_bytes())


# ----------------------------------------------------------------------------
# images


def encode_pfm(img: np.ndarray) -> bytes:
    """Little-endian PFM, rows stored bottom-up; [H, W, 3] color or [H, W] gray."""
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 3:
        tag = b"PF"
    elif img.ndim == 2:
        tag = b"Pf"
    else:
        raise FormatError("shape", f"PFM needs [H, W] or [H, W, 3], got {img.shape}")
    H, W = img.shape[:2]
    header = tag + b"\n" + f"{W} {H}\n".encode() + b"-1.0\n"
    return header + np.ascontiguousarray(img[::-1], dtype="<f4").tobytes()


def _header_tokens(buf: bytes, n: int, field: str) -> tuple[list[bytes], int]:
    """First n whitespace-separated header tokens (PPM-style comments skipped) and the data offset."""
    toks, pos = [], 0
    while len(toks) < n:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(field, "truncated header")
        toks.append(buf[start:pos])
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(field, "header must end with a single whitespace byte")
    return toks, pos + 1


def _dims(tok_w: bytes, tok_h: bytes, field: str) -> tuple[int, int]:
    try:
        W, H = int(tok_w), int(tok_h)
    except ValueError as e:
        raise FormatError(field, f"non-integer dimensions {tok_w!r} {tok_h!r}") from e
    if W < 1 or H < 1:
        raise FormatError(field, f"dimensions must be positive, got {W}x{H}")
    return W, H


def decode_pfm(buf: bytes) -> np.ndarray:
    toks, off = _header_tokens(buf, 4, "pfm.header")
    tag = toks[0]
    if tag not in (b"PF", b"Pf"):
        raise FormatError("pfm.magic", f"expected PF or Pf, got {tag[:8]!r}")
    W, H = _dims(toks[1], toks[2], "pfm.dims")
    try:
        scale = float(toks[3])
    except ValueError as e:
        raise FormatError("pfm.scale", f"not a number: {toks[3]!r}") from e
    if scale == 0 or not math.isfinite(scale):
        raise FormatError("pfm.scale", f"scale must be finite and nonzero, got {scale}")
    dt = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    C = 3 if tag == b"PF" else 1
    need = W * H * C * 4
    if len(buf) - off != need:
        raise FormatError("pfm.data", f"expected {need} data bytes, found {len(buf) - off}")
    arr = np.frombuffer(buf[off:], dtype=dt).reshape(H, W, C)[::-1].astype("<f4")
    return arr if C == 3 else arr[..., 0]


def encode_ppm(img: np.ndarray) -> bytes:
    """8-bit binary PPM preview, values clamped to [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError("shape", f"PPM needs [H, W, 3], got {img.shape}")
    H, W = img.shape[:2]
    q = np.round(np.clip(np.nan_to_num(img), 0.0, 1.0) * 255).astype(np.uint8)
    return f"P6\n{W} {H}\n255\n".encode() + q.tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    """Raw uint8 [H, W, 3]."""
    toks, off = _header_tokens(buf, 4, "ppm.header")
    if toks[0] != b"P6":
        raise FormatError("ppm.magic", f"expected P6, got {toks[0][:8]!r}")
    W, H = _dims(toks[1], toks[2], "ppm.dims")
    if toks[3] != b"255":
        raise FormatError("ppm.maxval", f"only maxval 255 is supported, got {toks[3]!r}")
    if len(buf) - off != W * H * 3:
        raise FormatError("ppm.data", f"expected {W * H * 3} data bytes, found {len(buf) - off}")
    return np.frombuffer(buf[off:], dtype=np.uint8).reshape(H, W, 3).copy()


def write_pfm(path, img) -> None:
    Path(path).write_bytes(encode_pfm(img))


def read_pfm(path) -> np.ndarray:
    return decode_pfm(Path(path).read_bytes())


def write_ppm(path, img) -> None:
    Path(path).write_bytes(encode_ppm(img))


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


# ----------------------------------------------------------------------------
# cameras.json

CAMERA_FIELDS = ("fx", "fy", "cx", "cy", "width", "height", "camera_from_world", "near", "far")


def _number(v, field: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise FormatError(field, f"expected a finite number, got {v!r}")
    return float(v)


def _integer(v, field: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise FormatError(field, f"expected an integer, got {v!r}")
    if v < 1:
        raise FormatError(field, f"must be positive, got {v}")
    return v


def camera_to_json(cam: Camera, near: float, far: float) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy, "width": cam.width,
            "height": cam.height, "camera_from_world": [float(v) for v in cam.camera_from_world.ravel()],
            "near": float(near), "far": float(far)}


def camera_from_json(d, where: str = "camera") -> tuple[Camera, float, float]:
    if not isinstance(d, dict):
        raise FormatError(where, "expected an object")
    for k in d:
        if k not in CAMERA_FIELDS:
            raise FormatError(f"{where}.{k}", "unknown field")
    for k in CAMERA_FIELDS:
        if k not in d:
            raise FormatError(f"{where}.{k}", "missing field")
    fx, fy, cx, cy = (_number(d[k], f"{where}.{k}") for k in ("fx", "fy", "cx", "cy"))
    for k, v in (("fx", fx), ("fy", fy)):
        if v <= 0:
            raise FormatError(f"{where}.{k}", f"focal length must be positive, got {v}")
    width = _integer(d["width"], f"{where}.width")
    height = _integer(d["height"], f"{where}.height")
    T = d["camera_from_world"]
    if not isinstance(T, list) or len(T) != 16:
        raise FormatError(f"{where}.camera_from_world", "expected a list of 16 numbers")
    T = np.array([_number(v, f"{where}.camera_from_world[{i}]") for i, v in enumerate(T)]).reshape(4, 4)
    R = T[:3, :3]
    if np.abs(R.T @ R - np.eye(3)).max() >= 1e-5 or np.linalg.det(R) <= 0:
        raise FormatError(f"{where}.camera_from_world", "rotation block is not a proper rotation")
    if np.abs(T[3] - [0, 0, 0, 1]).max() > 0:
        raise FormatError(f"{where}.camera_from_world", "last row must be 0 0 0 1")
    near = _number(d["near"], f"{where}.near")
    far = _number(d["far"], f"{where}.far")
    if not 0 < near < far:
        raise FormatError(f"{where}.near", f"need 0 < near < far, got {near}, {far}")
    return Camera.from_params(fx, fy, cx, cy, width, height, T), near, far


def cameras_from_json(data) -> tuple[list[Camera], float, float]:
    if not isinstance(data, list) or not data:
        raise FormatError("cameras", "expected a non-empty list")
    parsed = [camera_from_json(d, f"cameras[{i}]") for i, d in enumerate(data)]
    near, far = parsed[0][1], parsed[0][2]
    for i, (_, n, f) in enumerate(parsed):
        if (n, f) != (near, far):
            raise FormatError(f"cameras[{i}].near", "all cameras must share near/far")
    return [p[0] for p in parsed], near, far


def _load_json(path: Path, field: str):
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(field, f"invalid JSON: {e}") from e


# ----------------------------------------------------------------------------
# scene bundles

_VIEW = re.compile(r"^view_(\d{3})\.pfm$")


@dataclass
class SceneBundle:
    images: np.ndarray  # [M, H, W, 3] float32
    cams: list[Camera]
    near: float
    far: float
    meta: dict  # scene.json contents

    @property
    def reference(self) -> int:
        return int(self.meta.get("reference", 0))

    def frustum(self, index: int | None = None) -> Frustum:
        return Frustum(self.cams[self.reference if index is None else index], self.near, self.far)


def write_bundle(out_dir, images: np.ndarray, cams: list[Camera], near: float, far: float,
                 meta: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if len(images) != len(cams):
        raise FormatError("cameras", f"{len(cams)} cameras for {len(images)} images")
    (out / "cameras.json").write_text(json.dumps([camera_to_json(c, near, far) for c in cams], indent=2))
    for m, img in enumerate(images):
        write_pfm(out / f"view_{m:03d}.pfm", img)
        write_ppm(out / f"view_{m:03d}.ppm", img)
    (out / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_bundle(path) -> SceneBundle:
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"scene bundle {root} is not a directory")
    cams, near, far = cameras_from_json(_load_json(root / "cameras.json", "cameras.json"))
    views = sorted(p.name for p in root.iterdir() if _VIEW.match(p.name))
    if len(views) != len(cams):
        raise FormatError("cameras", f"{len(cams)} cameras but {len(views)} view_###.pfm images")
    images = []
    for m, name in enumerate(views):
        if name != f"view_{m:03d}.pfm":
            raise FormatError(f"images[{m}]", f"expected view_{m:03d}.pfm, found {name}")
        img = read_pfm(root / name)
        if img.ndim != 3:
            raise FormatError(f"images[{m}]", "expected a color PFM")
        if img.shape[:2] != (cams[m].height, cams[m].width):
            raise FormatError(f"images[{m}].dims", f"image {img.shape[:2]} != camera "
                                                   f"{(cams[m].height, cams[m].width)}")
        images.append(img)
    meta = _load_json(root / "scene.json", "scene.json") if (root / "scene.json").exists() else {}
    if not isinstance(meta, dict):
        raise FormatError("scene.json", "expected an object")
    ref = meta.get("reference", 0)
    if isinstance(ref, bool) or not isinstance(ref, int) or not 0 <= ref < len(cams):
        raise FormatError("scene.json.reference", f"reference {ref!r} is not a view index")
    return SceneBundle(np.stack(images), cams, near, far, meta)


# ----------------------------------------------------------------------------
# LDMs and parameters


def ldm_to_tensors(ldm: Ldm) -> dict[str, np.ndarray]:
    cam = ldm.frustum.camera
    return {
        "depth": ldm.depth.data, "density": ldm.density.data, "blend": ldm.blend.data,
        "camera/intrinsics": cam.intrinsics, "camera/camera_from_world": cam.camera_from_world,
        "camera/size": np.array([cam.width, cam.height], dtype=np.float64),
        "frustum/near_far": np.array([ldm.frustum.near, ldm.frustum.far], dtype=np.float64),
    }


def ldm_from_tensors(t: dict[str, np.ndarray]) -> Ldm:
    for k in ("depth", "density", "blend", "camera/intrinsics", "camera/camera_from_world",
              "camera/size", "frustum/near_far"):
        if k not in t:
            raise FormatError(k, "missing entry")
    depth, density, blend = t["depth"], t["density"], t["blend"]
    if depth.ndim != 3 or density.shape != depth.shape:
        raise FormatError("density", f"shape {density.shape} != depth {depth.shape}")
    if blend.ndim != 4 or blend.shape[:3] != depth.shape:
        raise FormatError("blend", f"shape {blend.shape} does not extend depth {depth.shape}")
    w, h = (int(v) for v in t["camera/size"])
    try:
        cam = Camera(t["camera/intrinsics"], t["camera/camera_from_world"], w, h)
        near, far = (float(v) for v in t["frustum/near_far"])
        frustum = Frustum(cam, near, far)
    except ValueError as e:
        raise FormatError("camera", str(e)) from e
    if (h, w) != depth.shape[1:]:
        raise FormatError("camera/size", f"{(h, w)} != LDM texel grid {depth.shape[1:]}")
    return Ldm(Tensor(depth), Tensor(density), Tensor(blend), frustum)


def save_ldm(path, ldm: Ldm) -> None:
    write_container(path, ldm_to_tensors(ldm))


def load_ldm(path) -> Ldm:
    return ldm_from_tensors(read_container(path))


def save_params(path, store: ParamStore) -> None:
    write_container(path, store.state())


def load_params(path, store: ParamStore) -> None:
    store.load(read_container(path))
