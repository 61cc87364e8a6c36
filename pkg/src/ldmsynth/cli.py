"""Command-line entry point.

Exit codes: 0 success, 1 validation or usage error, 2 numeric failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import io as lio
from .attention import flop_table, time_attention
from .autodiff import ContractError, DimensionError, NonFiniteError, Tensor
from .config import Ablations, ConfigError, ModelConfig, nano_config, propagate_shapes
from .fit import NANO_LR, FitConfig, FitError, TrainScene, find_view, fit_raw_ldm, psnr, train_nano
from .geometry import Frustum
from .gradcheck import run_checks
from .ldm import check_invariants, render_depth, render_novel, render_novel_depth, render_target
from .network import build_params, fit_cost_model, forward, render_output
from .scenes import BASELINE_PRESETS, RigSpec, make_scene, render_rig

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _baseline(text: str) -> float:
    if text in BASELINE_PRESETS:
        return BASELINE_PRESETS[text]
    try:
        b = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"baseline must be a number or one of {sorted(BASELINE_PRESETS)}")
    if not b > 0:
        raise argparse.ArgumentTypeError(f"baseline must be positive, got {text}")
    return b


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


# ----------------------------------------------------------------------------
# commands


def cmd_generate_scene(a) -> int:
    rig = RigSpec(a.views, a.baseline, a.size, a.size, rows=a.rows)
    ref = rig.reference_index()
    cams = rig.cameras()
    frustum = Frustum(cams[ref], a.near, a.far)
    scene = make_scene(a.seed, a.planes, frustum, opacity=a.opacity, slanted=a.slanted)
    rendered = render_rig(scene, rig)
    meta = {"seed": a.seed, "planes": a.planes, "views": a.views, "baseline": a.baseline,
            "size": a.size, "rows": a.rows, "reference": ref, "scene": scene.to_dict()}
    lio.write_bundle(a.out, rendered.images.astype(np.float32), cams, a.near, a.far, meta)
    for m, d in enumerate(rendered.depths):
        lio.write_pfm(Path(a.out) / f"depth_{m:03d}.pfm", d.astype(np.float32))
    print(f"wrote {a.views} views to {a.out} (reference view {ref})")
    return EXIT_OK


def cmd_fit_ldm(a) -> int:
    b = lio.read_bundle(a.scene)
    images = Tensor(b.images.astype(np.float64))
    cfg = FitConfig(steps=a.steps, lr=a.lr, seed=a.seed, depth_smoothness=a.smoothness)
    ldm, report = fit_raw_ldm(images, b.cams, b.frustum(), a.layers, cfg)
    lio.save_ldm(a.out, ldm)
    if a.report:
        report.write_csv(a.report)
    for k, v in report.psnr.items():
        print(f"psnr {k}: {v:.2f} dB")
    if report.losses:
        print(f"loss {report.losses[0]:.5f} -> {report.losses[-1]:.5f} in {report.wall_time:.1f}s")
    return EXIT_OK


def cmd_render(a) -> int:
    ldm = lio.load_ldm(a.ldm)
    b = lio.read_bundle(a.scene)
    if ldm.num_views != len(b.cams):
        raise ContractError(f"LDM blends {ldm.num_views} views but the bundle has {len(b.cams)}")
    if not 0 <= a.camera_index < len(b.cams):
        raise UsageError(f"--camera-index {a.camera_index} outside 0..{len(b.cams) - 1}")
    cam = b.cams[a.camera_index]
    images = Tensor(b.images.astype(ldm.depth.dtype))
    exclude = a.camera_index if a.holdout else None
    if find_view([ldm.frustum.camera], cam) is not None:
        img = render_target(ldm, images, b.cams, exclude)
        depth = render_depth(ldm) if a.depth else None
    else:
        img = render_novel(ldm, images, b.cams, cam, exclude)
        depth = render_novel_depth(ldm, cam) if a.depth else None
    lio.write_pfm(a.out, img.data.astype(np.float32))
    if a.depth:
        lio.write_pfm(a.depth, depth.data.astype(np.float32))
    print(f"psnr vs view {a.camera_index}: {psnr(np.clip(img.data, 0, 1), b.images[a.camera_index]):.2f} dB")
    return EXIT_OK


BENCH_FIELDS = ["sweep", "h", "N", "d_k", "standard_flops", "one_to_many_flops", "speedup",
                "standard_rel", "one_to_many_rel", "standard_ms", "one_to_many_ms"]


def cmd_bench_attention(a) -> int:
    sweeps = ["heads", "inputs"] if a.sweep == "both" else [a.sweep]
    rows = []
    for sw in sweeps:
        for r in flop_table(sw, a.dk):
            t_std, t_otm = (float("nan"), float("nan")) if a.no_timing else time_attention(r.N, r.h, r.d_k, a.batch)
            rows.append({"sweep": sw, "h": r.h, "N": r.N, "d_k": r.d_k, "standard_flops": r.standard,
                         "one_to_many_flops": r.one_to_many, "speedup": r.ratio,
                         "standard_rel": r.standard_rel, "one_to_many_rel": r.one_to_many_rel,
                         "standard_ms": f"{t_std:.3f}", "one_to_many_ms": f"{t_otm:.3f}"})
    for sw in sweeps:
        print(f"# {sw} sweep (d_k={a.dk})")
        print(f"{'h':>3} {'N':>4} {'standard':>9} {'one-to-many':>12} {'speedup':>8} {'std rel':>8} "
              f"{'otm rel':>8} {'std ms':>8} {'otm ms':>8}")
        for r in rows:
            if r["sweep"] == sw:
                print(f"{r['h']:>3} {r['N']:>4} {r['standard_flops']:>9} {r['one_to_many_flops']:>12} "
                      f"{r['speedup']:>8} {r['standard_rel']:>8} {r['one_to_many_rel']:>8} "
                      f"{r['standard_ms']:>8} {r['one_to_many_ms']:>8}")
    if a.csv:
        with open(a.csv, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=BENCH_FIELDS)
            w.writeheader()
            w.writerows(rows)
    return EXIT_OK


def cmd_gradcheck(a) -> int:
    results = run_checks(a.module)
    failed = [r for r in results if not r.passed]
    for r in results:
        tag = "ok  " if r.passed else "FAIL"
        extra = f"  ({r.worst})" if not r.passed else ""
        print(f"{tag} {r.module:<10} {r.name:<28} max rel err {r.max_rel:.2e}{extra}")
    print(f"{len(results) - len(failed)}/{len(results)} passed")
    return EXIT_NUMERIC if failed else EXIT_OK


def _load_config(path) -> ModelConfig:
    if path is None:
        return nano_config()
    try:
        return ModelConfig.load(path)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config: invalid JSON: {e}") from e
    except (TypeError, KeyError) as e:
        raise ConfigError(f"config: {e}") from e


def _target_for(cfg: ModelConfig, b: lio.SceneBundle, index: int) -> Frustum:
    Ho, Wo = cfg.output_size
    return Frustum(b.cams[index].scaled(Wo, Ho), b.near, b.far)


def _gray_ppm(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.clip(x, 0, 1)[..., None], 3, axis=-1)


def cmd_forward_demo(a) -> int:
    cfg = _load_config(a.config)
    b = lio.read_bundle(a.scene)
    cfg = cfg.with_views(len(b.cams))
    propagate_shapes(cfg)
    if b.images.shape[1:3] != tuple(cfg.image_size):
        raise ConfigError(f"config image_size {cfg.image_size} != bundle images {b.images.shape[1:3]}")
    store = build_params(cfg, seed=a.seed, dtype=np.float32)
    if a.params:
        lio.load_params(a.params, store)
    images = Tensor(b.images.astype(np.float32))
    target = _target_for(cfg, b, b.reference)
    ldm, aux = forward(images, b.cams, target, cfg, store)
    img = render_output(ldm, aux, images, b.cams)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    lio.write_pfm(out / "target.pfm", img.data)
    lio.write_ppm(out / "target.ppm", img.data)
    lio.write_pfm(out / "depth.pfm", render_depth(ldm).data)
    for l in range(ldm.num_layers):
        lio.write_ppm(out / f"sigma_{l:02d}.ppm", _gray_ppm(ldm.density.data[l]))
    lio.save_ldm(out / "ldm.qntc", ldm)
    problems = check_invariants(ldm)
    cost = fit_cost_model(cfg, tuple(a.op_views))
    report = {"views": list(cost.views), "totals": list(cost.totals), "T_V": str(cost.T_V),
              "T_image": str(cost.T_image), "residuals": [str(r) for r in cost.residuals],
              "by_kind": {k: list(v) for k, v in cost.by_kind.items()}, "invariant_problems": problems}
    (out / "ops.json").write_text(json.dumps(report, indent=2))
    print(f"T_V = {cost.T_V}, T_image = {cost.T_image}, residuals {[str(r) for r in cost.residuals]}")
    if problems:
        print("LDM invariant violations: " + "; ".join(problems))
        return EXIT_NUMERIC
    return EXIT_OK


ABLATIONS = {"none": {}, "zero-keys": {"zero_keys": True}, "zero-rays": {"zero_ray_encoding": True},
             "zero-render": {"zero_rendered_image": True}, "rgb": {"rgb_output": True}}


def cmd_train_nano(a) -> int:
    cfg = _load_config(a.config)
    cfg.ablations = Ablations(**ABLATIONS[a.ablation])
    b = lio.read_bundle(a.scene)
    if len(b.cams) != cfg.views + 1:
        raise ContractError(f"bundle needs {cfg.views + 1} views ({cfg.views} inputs + 1 held-out target), "
                            f"has {len(b.cams)}")
    ref = b.reference
    keep = [m for m in range(len(b.cams)) if m != ref]
    scene = TrainScene(b.images[keep], [b.cams[m] for m in keep], _target_for(cfg, b, ref), b.images[ref])
    store, report = train_nano([scene], cfg, FitConfig(steps=a.steps, lr=a.lr, seed=a.seed))
    if a.out:
        lio.save_params(a.out, store)
    if a.report:
        report.write_csv(a.report)
    if report.losses:
        print(f"loss {report.losses[0]:.5f} -> {report.losses[-1]:.5f} in {report.wall_time:.1f}s")
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ldmsynth", description="Layered depth map view synthesis toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-scene", help="render a synthetic multi-view plane scene")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--planes", type=_positive_int, default=2)
    g.add_argument("--views", type=_positive_int, default=4)
    g.add_argument("--baseline", type=_baseline, default=BASELINE_PRESETS["medium"],
                   help="meters between adjacent cameras, or small/medium/large")
    g.add_argument("--size", type=_positive_int, default=64)
    g.add_argument("--rows", type=_positive_int, default=1)
    g.add_argument("--near", type=float, default=1.0)
    g.add_argument("--far", type=float, default=8.0)
    g.add_argument("--opacity", type=float, default=1.0, help="opacity of the nearer planes")
    g.add_argument("--slanted", action="store_true")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_generate_scene)

    f = sub.add_parser("fit-ldm", help="fit an LDM directly to a scene bundle")
    f.add_argument("--scene", required=True)
    f.add_argument("--layers", type=_positive_int, default=2)
    f.add_argument("--steps", type=_nonneg_int, default=400)
    f.add_argument("--lr", type=float, default=0.05)
    f.add_argument("--smoothness", type=float, default=1.0, help="depth smoothness weight")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)
    f.add_argument("--report")
    f.set_defaults(fn=cmd_fit_ldm)

    r = sub.add_parser("render", help="render a fitted LDM into one of the bundle's cameras")
    r.add_argument("--ldm", required=True)
    r.add_argument("--scene", required=True)
    r.add_argument("--camera-index", type=int, required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--depth")
    r.add_argument("--holdout", action="store_true", help="leave the rendered view out of the blend")
    r.set_defaults(fn=cmd_render)

    b = sub.add_parser("bench-attention", help="FLOP tables and timings of both attention variants")
    b.add_argument("--dk", type=_positive_int, default=32)
    b.add_argument("--sweep", choices=["heads", "inputs", "both"], default="both")
    b.add_argument("--csv")
    b.add_argument("--batch", type=_positive_int, default=64, help="queries per timed call")
    b.add_argument("--no-timing", action="store_true")
    b.set_defaults(fn=cmd_bench_attention)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks in float64")
    c.add_argument("--module", choices=["all", "autodiff", "geometry", "ldm", "attention", "network"],
                   default="all")
    c.set_defaults(fn=cmd_gradcheck)

    d = sub.add_parser("forward-demo", help="run the network forward and report op counts")
    d.add_argument("--scene", required=True)
    d.add_argument("--config")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--params", help="weights container to load instead of random init")
    d.add_argument("--op-views", type=_positive_int, nargs="+", default=[2, 4, 8])
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_forward_demo)

    t = sub.add_parser("train-nano", help="overfit the nano network on one bundle")
    t.add_argument("--scene", required=True, help="bundle with views+1 cameras; the reference is held out")
    t.add_argument("--config")
    t.add_argument("--steps", type=_nonneg_int, default=500)
    t.add_argument("--lr", type=float, default=NANO_LR)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--ablation", choices=sorted(ABLATIONS), default="none")
    t.add_argument("--out")
    t.add_argument("--report")
    t.set_defaults(fn=cmd_train_nano)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (lio.FormatError, ConfigError, ContractError, DimensionError) as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FitError, NonFiniteError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
