"""Model configuration: per-step block sequences and the shape propagator."""
from __future__ import annotations

import json
import re
from dataclasses import MISSING, asdict, dataclass, field, replace
from pathlib import Path

_TOKEN = re.compile(r"^(Bp|U|Lc|C|A(\d+))$")


class ConfigError(ValueError):
    pass


@dataclass
class StepConfig:
    name: str
    out_layers: int
    volume: tuple[int, int]
    pyramid_level: int
    blocks: list[str]
    in_layers: int | None = None

    def tokens(self) -> list[tuple[str, int]]:
        out = []
        for tok in self.blocks:
            m = _TOKEN.match(tok.strip())
            if not m:
                raise ConfigError(f"step {self.name}: unknown block token {tok!r}")
            out.append(("A", int(m.group(2))) if m.group(2) else (m.group(1), 0))
        return out

    def fusion_groups(self) -> list[tuple[int, int]]:
        """(heads, number of conv blocks) for each attention token, in order."""
        groups: list[list[int]] = []
        for kind, h in self.tokens():
            if kind == "A":
                groups.append([h, 0])
            elif kind == "C":
                if not groups:
                    raise ConfigError(f"step {self.name}: C block before any attention block")
                groups[-1][1] += 1
        return [(h, n) for h, n in groups]

    def collapses(self) -> int:
        return sum(1 for k, _ in self.tokens() if k == "Lc")


@dataclass
class Ablations:
    zero_keys: bool = False
    zero_ray_encoding: bool = False
    zero_rendered_image: bool = False
    rgb_output: bool = False


@dataclass
class ModelConfig:
    channels: int
    views: int
    image_size: tuple[int, int]  # input (H, W)
    pyramid_levels: int
    upsample: float
    output_size: tuple[int, int]  # target (H, W)
    near: float
    far: float
    steps: list[StepConfig]
    encoder_blocks: int = 2
    update_blocks: int = 2
    ray_octaves: int = 8
    ablations: Ablations = field(default_factory=Ablations)

    def level_size(self, k: int) -> tuple[int, int]:
        H, W = self.image_size
        for _ in range(k + 1):
            H, W = H // 2, W // 2
        return H, W

    def with_views(self, M: int) -> "ModelConfig":
        return replace(self, views=M)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["output_size"] = list(self.output_size)
        for s in d["steps"]:
            s["volume"] = list(s["volume"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        _strict(d, cls, "config")
        d = dict(d)
        steps = []
        for i, s in enumerate(d.pop("steps")):
            _strict(s, StepConfig, f"steps[{i}]")
            s = dict(s)
            s["volume"] = tuple(s["volume"])
            steps.append(StepConfig(**s))
        abl = d.pop("ablations", {})
        _strict(abl, Ablations, "ablations")
        d["image_size"] = tuple(d["image_size"])
        d["output_size"] = tuple(d["output_size"])
        return cls(steps=steps, ablations=Ablations(**abl), **d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _strict(d, cls, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    known = set(cls.__dataclass_fields__)
    for k in d:
        if k not in known:
            raise ConfigError(f"{where}.{k}: unknown field")
    required = {k for k, f in cls.__dataclass_fields__.items()
                if f.default is MISSING and f.default_factory is MISSING}
    for k in sorted(required - set(d)):
        raise ConfigError(f"{where}.{k}: missing field")


def propagate_shapes(cfg: ModelConfig) -> list[tuple[int, int, int, int]]:
    """Validate the step sequence and return each step's output (L, h, w, C)."""
    C = cfg.channels
    if C < 1 or cfg.views < 1:
        raise ConfigError("channels and views must be positive")
    if not cfg.steps:
        raise ConfigError("steps: need at least the initialize step")
    if not 0 < cfg.near < cfg.far:
        raise ConfigError("near/far: need 0 < near < far")
    shapes = []
    L = h = w = 1
    for i, step in enumerate(cfg.steps):
        where = f"steps[{i}] ({step.name})"
        toks = step.tokens()
        kinds = [k for k, _ in toks]
        n_lc = step.collapses()
        if kinds[:n_lc] != ["Lc"] * n_lc:
            raise ConfigError(f"{where}: Lc blocks must form a prefix")
        entry = [k for k in kinds if k in ("Bp", "U")]
        if len(entry) != 1:
            raise ConfigError(f"{where}: need exactly one of Bp/U")
        if (entry[0] == "Bp") != (i == 0):
            raise ConfigError(f"{where}: Bp only (and always) in the initialize step")
        if kinds[n_lc] != entry[0]:
            raise ConfigError(f"{where}: {entry[0]} must follow the Lc prefix")
        for kind, hh in toks:
            if kind == "A" and (hh < 1 or C % hh):
                raise ConfigError(f"{where}: A{hh} heads must divide {C} channels")
        step.fusion_groups()
        if not 0 <= step.pyramid_level < cfg.pyramid_levels:
            raise ConfigError(f"{where}: pyramid_level {step.pyramid_level} out of range")
        if i == 0:
            if n_lc:
                raise ConfigError(f"{where}: no layer collapse at initialization")
            L = step.out_layers
            if step.in_layers not in (None, 1):
                raise ConfigError(f"{where}: initialize starts from a single broadcast feature")
        else:
            if step.in_layers is not None and step.in_layers != L:
                raise ConfigError(f"{where}: in_layers {step.in_layers} != previous output {L}")
            for _ in range(n_lc):
                if L % 2:
                    raise ConfigError(f"{where}: cannot collapse odd layer count {L}")
                L //= 2
            if step.out_layers != L:
                raise ConfigError(f"{where}: out_layers {step.out_layers} != {L} after collapse")
            nh, nw = step.volume
            if (nh, nw) not in ((h, w), (2 * h, 2 * w)):
                raise ConfigError(f"{where}: volume {step.volume} must keep or double {(h, w)}")
            if step.pyramid_level > cfg.steps[i - 1].pyramid_level:
                raise ConfigError(f"{where}: pyramid level may not get coarser")
        h, w = step.volume
        shapes.append((L, h, w, C))
    Ho, Wo = cfg.output_size
    if (int(round(h * cfg.upsample)), int(round(w * cfg.upsample))) != (Ho, Wo):
        raise ConfigError(f"output_size {cfg.output_size} != final volume {(h, w)} x {cfg.upsample}")
    for k in range(cfg.pyramid_levels):
        lh, lw = cfg.level_size(k)
        if lh < 1 or lw < 1:
            raise ConfigError(f"pyramid level {k} is empty for image_size {cfg.image_size}")
    H, W = cfg.image_size
    if H % (2 ** cfg.pyramid_levels) or W % (2 ** cfg.pyramid_levels):
        raise ConfigError(f"image_size {cfg.image_size} not divisible by 2^{cfg.pyramid_levels}")
    return shapes


def nano_config(views: int = 4, image: int = 64) -> ModelConfig:
    """Desk-scale configuration keeping every structural feature of the full model."""
    return ModelConfig(
        channels=8, views=views, image_size=(image, image), pyramid_levels=3, upsample=2.0,
        output_size=(image, image), near=1.0, far=8.0,
        steps=[
            StepConfig("initialize", 8, (image // 8, image // 8), 2, ["Bp", "A2", "C"], in_layers=1),
            StepConfig("update0", 8, (image // 8, image // 8), 2, ["U", "A2", "C", "C"]),
            StepConfig("update1", 8, (image // 4, image // 4), 1, ["U", "A2", "C"]),
            StepConfig("update2", 4, (image // 2, image // 2), 0, ["Lc", "U", "A1", "C"]),
        ],
    )


def full_config() -> ModelConfig:
    """Full-size configuration (24 -> 6 layers, 36x64 -> 288x512 volumes, 1080p output)."""
    A4CC = ["A4", "C", "C"] * 3
    return ModelConfig(
        channels=32, views=8, image_size=(576, 960), pyramid_levels=4, upsample=3.75,
        output_size=(1080, 1920), near=1.0, far=100.0,
        steps=[
            StepConfig("initialize", 24, (36, 64), 3, ["Bp"] + A4CC, in_layers=1),
            StepConfig("update0", 24, (36, 64), 3, ["U"] + A4CC, in_layers=24),
            StepConfig("update1", 24, (72, 128), 2, ["U"] + A4CC, in_layers=24),
            StepConfig("update2", 24, (72, 128), 2, ["U", "A4", "C", "A4", "C"], in_layers=24),
            StepConfig("update3", 12, (144, 256), 1, ["Lc", "U", "A2", "C", "A2", "C"], in_layers=24),
            StepConfig("update4", 6, (288, 512), 0, ["Lc", "U", "A1", "C", "A1", "C"], in_layers=12),
        ],
    )
