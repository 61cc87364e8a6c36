import csv
import json

import numpy as np
import pytest

from ldmsynth import io
from ldmsynth.autodiff import Tensor
from ldmsynth.cli import BENCH_FIELDS, main
from ldmsynth.fit import RawLdm, coverage_mask
from ldmsynth.ldm import Ldm, backproject_inputs


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "scene"
    assert main(["generate-scene", "--seed", "1", "--planes", "1", "--size", "32", "--out", str(out)]) == 0
    return out


def test_generate_is_byte_deterministic(tmp_path, bundle):
    again = tmp_path / "again"
    assert main(["generate-scene", "--seed", "1", "--planes", "1", "--size", "32", "--out", str(again)]) == 0
    names = sorted(p.name for p in bundle.iterdir())
    assert names == sorted(p.name for p in again.iterdir())
    assert "view_003.pfm" in names and "depth_000.pfm" in names and "view_000.ppm" in names
    for n in names:
        assert (bundle / n).read_bytes() == (again / n).read_bytes()
    assert json.loads((bundle / "scene.json").read_text())["reference"] == 1


@pytest.mark.parametrize("args", [["--baseline", "0"], ["--baseline", "huge"], ["--planes", "0"], ["--bogus"]])
def test_bad_generate_arguments_exit_1(tmp_path, args):
    assert main(["generate-scene", "--out", str(tmp_path / "x")] + args) == 1


def test_missing_command_exits_1():
    assert main([]) == 1


def test_missing_bundle_exits_3(tmp_path):
    assert main(["fit-ldm", "--scene", str(tmp_path / "nope"), "--out", str(tmp_path / "l.qntc")]) == 3


def test_corrupt_cameras_json_names_the_field(tmp_path, bundle, capsys):
    import shutil
    bad = tmp_path / "bad"
    shutil.copytree(bundle, bad)
    cams = json.loads((bad / "cameras.json").read_text())
    cams[2]["fy"] = "wide"
    (bad / "cameras.json").write_text(json.dumps(cams))
    assert main(["fit-ldm", "--scene", str(bad), "--out", str(tmp_path / "l.qntc")]) == 1
    assert "cameras[2].fy" in capsys.readouterr().err


def test_zero_steps_writes_initial_ldm_and_empty_curve(tmp_path, bundle):
    out, rep = tmp_path / "l.qntc", tmp_path / "fit.csv"
    assert main(["fit-ldm", "--scene", str(bundle), "--steps", "0", "--out", str(out), "--report", str(rep)]) == 0
    b = io.read_bundle(bundle)
    init = RawLdm.initial(2, 4, b.frustum()).activate()
    ldm = io.load_ldm(out)
    np.testing.assert_array_equal(ldm.density.data, init.density.data)
    np.testing.assert_array_equal(ldm.depth.data, init.depth.data)
    rows = list(csv.reader(rep.open()))
    assert rows[0] == ["step", "loss"] and all(r[0].startswith("psnr_") for r in rows[1:])


def test_fit_report_is_deterministic(tmp_path, bundle):
    reports = []
    for k in range(2):
        rep = tmp_path / f"r{k}.csv"
        assert main(["fit-ldm", "--scene", str(bundle), "--steps", "5", "--out", str(tmp_path / f"l{k}.qntc"),
                     "--report", str(rep)]) == 0
        reports.append(rep.read_bytes())
    assert reports[0] == reports[1]
    assert (tmp_path / "l0.qntc").read_bytes() == (tmp_path / "l1.qntc").read_bytes()


def test_fit_then_render_reproduces_the_view(tmp_path, bundle, capsys):
    ldm = tmp_path / "l.qntc"
    assert main(["fit-ldm", "--scene", str(bundle), "--steps", "150", "--out", str(ldm)]) == 0
    # view 1 is the LDM's own; splatting into view 2 leaves its edge columns uncovered
    for idx, cols in ((1, slice(None)), (2, slice(4, -4))):
        out = tmp_path / f"v{idx}.pfm"
        assert main(["render", "--ldm", str(ldm), "--scene", str(bundle), "--camera-index", str(idx),
                     "--out", str(out)]) == 0
        img = np.clip(io.read_pfm(out), 0, 1)[:, cols]
        ref = io.read_bundle(bundle).images[idx][:, cols]
        assert 10 * np.log10(1 / np.mean((img - ref) ** 2)) >= 30
    assert main(["render", "--ldm", str(ldm), "--scene", str(bundle), "--camera-index", "9",
                 "--out", str(tmp_path / "x.pfm")]) == 1


def test_transparent_ldm_renders_black(tmp_path, bundle):
    b = io.read_bundle(bundle)
    raw = RawLdm.initial(2, 4, b.frustum()).activate()
    clear = Ldm(raw.depth, Tensor(np.zeros_like(raw.density.data)), raw.blend, raw.frustum)
    io.save_ldm(tmp_path / "clear.qntc", clear)
    for idx in (1, 3):
        out = tmp_path / f"c{idx}.pfm"
        assert main(["render", "--ldm", str(tmp_path / "clear.qntc"), "--scene", str(bundle),
                     "--camera-index", str(idx), "--out", str(out)]) == 0
        assert not np.any(io.read_pfm(out))


def test_bench_attention_csv(tmp_path, capsys):
    path = tmp_path / "bench.csv"
    assert main(["bench-attention", "--no-timing", "--csv", str(path)]) == 0
    rows = list(csv.DictReader(path.open()))
    assert list(rows[0]) == BENCH_FIELDS
    assert [r["one_to_many_flops"] for r in rows if r["sweep"] == "heads"] == ["2304", "4608", "9216", "18432"]
    assert "# inputs sweep" in capsys.readouterr().out


def test_gradcheck_module_filter(capsys):
    assert main(["gradcheck", "--module", "attention"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert all(" attention " in l for l in lines[:-1]) and lines[-1].endswith("passed")
    assert main(["gradcheck", "--module", "fit"]) == 1


def test_forward_demo(tmp_path, capsys):
    scene = tmp_path / "s"
    assert main(["generate-scene", "--seed", "2", "--views", "4", "--out", str(scene)]) == 0
    out = tmp_path / "demo"
    assert main(["forward-demo", "--scene", str(scene), "--out", str(out), "--op-views", "2", "4"]) == 0
    report = json.loads((out / "ops.json").read_text())
    assert report["residuals"] == ["0", "0"] and report["invariant_problems"] == []
    assert io.read_pfm(out / "target.pfm").shape == (64, 64, 3)
    assert len(list(out.glob("sigma_*.ppm"))) == 4
    small = tmp_path / "small"
    assert main(["generate-scene", "--size", "32", "--out", str(small)]) == 0
    assert main(["forward-demo", "--scene", str(small), "--out", str(tmp_path / "d2")]) == 1


def test_train_nano_checks_view_count(tmp_path, bundle):
    assert main(["train-nano", "--scene", str(bundle), "--steps", "1"]) == 1


def test_train_nano_short_run(tmp_path):
    scene = tmp_path / "s"
    assert main(["generate-scene", "--views", "5", "--out", str(scene)]) == 0
    rep = tmp_path / "t.csv"
    assert main(["train-nano", "--scene", str(scene), "--steps", "2", "--report", str(rep),
                 "--out", str(tmp_path / "w.qntc")]) == 0
    assert sum(1 for r in csv.reader(rep.open()) if r[0].isdigit()) == 2
    assert len(io.read_container(tmp_path / "w.qntc")) > 10


@pytest.mark.parametrize("seed", [0, 3])
def test_single_plane_depth_is_recovered(tmp_path, seed):
    scene = tmp_path / "s"
    assert main(["generate-scene", "--seed", str(seed), "--planes", "1", "--out", str(scene)]) == 0
    assert main(["fit-ldm", "--scene", str(scene), "--out", str(tmp_path / "l.qntc")]) == 0
    assert main(["render", "--ldm", str(tmp_path / "l.qntc"), "--scene", str(scene), "--camera-index", "1",
                 "--out", str(tmp_path / "v.pfm"), "--depth", str(tmp_path / "d.pfm")]) == 0
    ldm = io.load_ldm(tmp_path / "l.qntc")
    b = io.read_bundle(scene)
    _, valid = backproject_inputs(ldm, Tensor(b.images.astype(np.float64)), b.cams)
    covered = coverage_mask(ldm, valid, None)
    truth = io.read_pfm(scene / "depth_001.pfm")
    err = np.abs(io.read_pfm(tmp_path / "d.pfm") - truth) / truth
    assert (err[covered] < 0.02).mean() >= 0.95
