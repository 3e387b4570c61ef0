import csv
import json

import numpy as np
import pytest
from PIL import Image

from cvsdeblur import cli
from cvsdeblur.dataset import read_dataset, read_sample, write_sample
from cvsdeblur.sensor import compute_exposure
from cvsdeblur.synth import moving_pattern_dataset, moving_sequence
from cvsdeblur.trainer import load_checkpoint

TINY = ["--base-channels", "4", "--crop", "16", "--batch-size", "2"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def manifest(d):
    return json.loads((d / "manifest.json").read_text())


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "data"
    assert run("datagen", "--synthetic", 3, "--size", 24, "--exposures", "6600",
               "--tail-headroom", 2, "--out", d) == 0
    return d


@pytest.fixture(scope="module")
def ckpt(data_dir):
    out = data_dir.parent / "train"
    assert run("train", "--data", data_dir, "--steps", 3, *TINY, "--out", out) == 0
    return out / "model.ckpt"


def write_pngs(d, frames, bits=8):
    d.mkdir(parents=True)
    for i, f in enumerate(frames):
        if bits == 8:
            Image.fromarray(np.rint(f * 255).astype(np.uint8)).save(d / f"{i}.png")
        else:
            g = np.rint(f.mean(axis=-1) * 65535).astype(np.uint16)
            Image.fromarray(g).save(d / f"{i}.png")


def test_datagen_synthetic_layout(data_dir):
    samples = read_dataset(data_dir)
    assert len(samples) == 3
    assert all(s.N == 5 and s.tail_td.shape[0] == 2 for s in samples)
    m = manifest(data_dir)
    assert m["status"] == "ok" and m["samples_written"] == 3 and m["seed"] == 0


def test_datagen_deterministic(tmp_path, data_dir):
    run("datagen", "--synthetic", 3, "--size", 24, "--exposures", "6600",
        "--tail-headroom", 2, "--out", tmp_path / "again")
    for a, b in zip(sorted(data_dir.iterdir()), sorted((tmp_path / "again").iterdir())):
        if a.is_dir():
            assert (a / "blur.f32").read_bytes() == (b / "blur.f32").read_bytes()


def test_datagen_png_windows_and_skips(tmp_path):
    frames = moving_sequence(np.random.default_rng(0), 20, 15)
    write_pngs(tmp_path / "in" / "long", frames)
    write_pngs(tmp_path / "in" / "short", frames[:4])
    out = tmp_path / "out"
    assert run("datagen", "--input", tmp_path / "in", "--exposures", "6600,14520",
               "--out", out) == 0
    m = manifest(out)
    # 15 frames: three N=5 windows and one N=11 window; the 4-frame clip fits neither
    assert m["samples_written"] == 4 and m["sequences_skipped"] == 2
    s = read_sample(out / "long_t6600_w001")
    q = np.rint(np.asarray(frames[5:10]) * 255) / 255
    np.testing.assert_allclose(s.gt, q, atol=1e-6)


def test_datagen_png_16bit_gray(tmp_path):
    frames = moving_sequence(np.random.default_rng(1), 16, 5)
    write_pngs(tmp_path / "seq", frames, bits=16)
    assert run("datagen", "--input", tmp_path / "seq", "--exposures", "6600",
               "--out", tmp_path / "o") == 0
    s = read_sample(tmp_path / "o" / "seq_t6600_w000")
    np.testing.assert_allclose(s.gt[..., 0], np.asarray(frames).mean(-1), atol=1e-4)


def test_datagen_errors(tmp_path):
    assert run("datagen", "--out", tmp_path / "a") == cli.EXIT_VALIDATION
    assert run("datagen", "--input", tmp_path / "missing", "--out", tmp_path / "b") == cli.EXIT_IO
    m = manifest(tmp_path / "b")
    assert m["status"] == "io" and m["partial"]
    assert run("datagen", "--synthetic", 1, "--exposures", "1000",
               "--out", tmp_path / "c") == cli.EXIT_VALIDATION


def test_validate_detects_corruption(tmp_path):
    s = moving_pattern_dataset(2, size=16, seed=4, tail=0)
    write_sample(s[0], tmp_path / "data" / "good")
    d = write_sample(s[1], tmp_path / "data" / "bad")
    td = np.fromfile(d / "td_1.i8", np.int8)
    td[0] = np.int8(td[0] + 9 if td[0] < 100 else td[0] - 9)
    td.tofile(d / "td_1.i8")
    out = tmp_path / "val"
    assert run("validate", "--data", tmp_path / "data", "--out", out) == cli.EXIT_VALIDATION
    report = json.loads((out / "validation.json").read_text())
    assert report["good"]["ok"] and not report["bad"]["ok"]
    assert any("td_1" in p for p in report["bad"]["problems"])


def test_validate_static_flag(tmp_path):
    frame = np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)
    from cvsdeblur.sensor import make_sample
    write_sample(make_sample([frame] * 5, compute_exposure(6600)), tmp_path / "d" / "s")
    assert run("validate", "--data", tmp_path / "d", "--out", tmp_path / "v") == 0
    assert json.loads((tmp_path / "v" / "validation.json").read_text())["s"]["static"]


def test_train_outputs(ckpt):
    out = ckpt.parent
    rows = list(csv.DictReader(open(out / "loss.csv")))
    assert [int(r["step"]) for r in rows] == [1, 2, 3]
    assert all(np.isfinite(float(r["loss"])) for r in rows)
    m = manifest(out)
    assert m["final_step"] == 3 and m["arch"]["base_channels"] == 4
    assert load_checkpoint(ckpt).arch.base_channels == 4


def test_train_resume_appends(tmp_path, data_dir, ckpt):
    out = tmp_path / "r"
    assert run("train", "--data", data_dir, "--steps", 5, *TINY, "--resume", ckpt,
               "--out", out) == 0
    assert [int(r["step"]) for r in csv.DictReader(open(out / "loss.csv"))] == [4, 5]
    out.joinpath("loss.csv").write_text("step,lr,loss\n")
    assert run("train", "--data", data_dir, "--steps", 6, *TINY, "--resume",
               out / "model.ckpt", "--out", out) == 0
    rows = list(csv.DictReader(open(out / "loss.csv")))
    assert [int(r["step"]) for r in rows] == [6]
    assert manifest(out)["final_step"] == 6


def test_train_same_seed_same_curve(tmp_path, data_dir):
    for name in "ab":
        assert run("train", "--data", data_dir, "--steps", 3, *TINY, "--out", tmp_path / name) == 0
    assert (tmp_path / "a" / "loss.csv").read_text() == (tmp_path / "b" / "loss.csv").read_text()


def test_train_ablation_and_config_file(tmp_path, data_dir):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"steps": 2, "batch_size": 2, "crop": 16},
                               "arch": {"base_channels": 4}}))
    out = tmp_path / "t"
    assert run("train", "--data", data_dir, "--config", cfg, "--ablate", "no-td",
               "--out", out) == 0
    m = manifest(out)
    assert m["final_step"] == 2 and m["arch"]["use_td"] is False


def test_train_resume_arch_mismatch(tmp_path, data_dir, ckpt):
    code = run("train", "--data", data_dir, "--steps", 4, *TINY[2:], "--base-channels", 8,
               "--resume", ckpt, "--out", tmp_path / "x")
    assert code == cli.EXIT_VALIDATION


def test_eval_report(tmp_path, data_dir, ckpt):
    out = tmp_path / "ev"
    assert run("eval", "--data", data_dir, "--checkpoint", ckpt, "--out", out) == 0
    rep = json.loads((out / "metrics.json").read_text())
    assert len(rep["per_sample"]) == 3
    assert set(rep["aggregate"]) == {"psnr", "ssim", "blur_psnr", "blur_ssim"}
    assert rep["aggregate"]["psnr"] == pytest.approx(
        np.mean([r["psnr"] for r in rep["per_sample"]]))


def test_infer_matches_library(tmp_path, data_dir, ckpt):
    sdir = sorted(p for p in data_dir.iterdir() if p.is_dir())[0]
    out = tmp_path / "inf"
    assert run("infer", "--sample", sdir, "--checkpoint", ckpt, "--out", out) == 0
    got = np.fromfile(out / "restored.f32", "<f4").reshape(24, 24, 3)
    want = load_checkpoint(ckpt).restore(read_sample(sdir))
    assert got.tobytes() == want.astype("<f4").tobytes()
    assert Image.open(out / "restored.png").size == (24, 24)
    assert run("infer", "--sample", sdir, "--checkpoint", ckpt, "--k", 9,
               "--out", tmp_path / "bad") == cli.EXIT_VALIDATION


def test_video_emits_n_frames(tmp_path, data_dir, ckpt):
    sdir = sorted(p for p in data_dir.iterdir() if p.is_dir())[0]
    out = tmp_path / "vid"
    assert run("video", "--sample", sdir, "--checkpoint", ckpt, "--out", out) == 0
    model, s = load_checkpoint(ckpt), read_sample(sdir)
    for k in range(5):
        got = np.fromfile(out / f"frame_{k:02d}.f32", "<f4").reshape(24, 24, 3)
        assert got.tobytes() == model.restore(s, k=k).astype("<f4").tobytes()
    assert manifest(out)["n_frames"] == 5
    assert run("infer", "--sample", sdir, "--checkpoint", ckpt, "--out", tmp_path / "i") == 0
    mid = (out / f"frame_{s.exposure.mid_index:02d}.f32").read_bytes()
    assert mid == (tmp_path / "i" / "restored.f32").read_bytes()


def test_disk_bench_grid(tmp_path, ckpt):
    out = tmp_path / "disk"
    assert run("disk-bench", "--checkpoint", ckpt, "--rpm", "0,400", "--exposures", "6600",
               "--illumination", "1.0,0.5", "--size", 48, "--out", out) == 0
    grid = json.loads((out / "grid.json").read_text())
    assert len(grid["cells"]) == 4
    static = [c for c in grid["cells"] if c["rpm"] == 0]
    assert all(abs(c["blurry"]["mean_rbew"] - 1) < 1e-6 for c in static)
    fast = [c for c in grid["cells"] if c["rpm"] == 400]
    assert all(c["blurry"]["mean_rbew"] > 1 for c in fast)
    assert all("restored" in c for c in grid["cells"])
    assert (out / "heatmap_restored.png").stat().st_size > 0


def test_missing_checkpoint_is_io_error(tmp_path, data_dir):
    code = run("eval", "--data", data_dir, "--checkpoint", tmp_path / "none.ckpt",
               "--out", tmp_path / "e")
    assert code in (cli.EXIT_IO, cli.EXIT_VALIDATION)
    assert manifest(tmp_path / "e")["partial"]


def test_unknown_command_exits_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2


def test_disk_bench_degrees(tmp_path):
    rad, deg = tmp_path / "rad", tmp_path / "deg"
    for out, extra in ((rad, []), (deg, ["--degrees"])):
        assert run("disk-bench", "--rpm", "300", "--exposures", "6600", "--size", 48,
                   "--out", out, *extra) == 0
    a = json.loads((rad / "grid.json").read_text())["cells"][0]["blurry"]
    b = json.loads((deg / "grid.json").read_text())["cells"][0]["blurry"]
    assert a["mean_rbew"] == b["mean_rbew"]
    for ea, eb in zip(a["per_edge"], b["per_edge"]):
        assert eb["bew"] == pytest.approx(np.degrees(ea["bew"]))
        assert eb["a"] * eb["bew"] == pytest.approx(ea["a"] * ea["bew"])
    assert 0 < a["ssim"] <= 1 and a["psnr"] > 0
