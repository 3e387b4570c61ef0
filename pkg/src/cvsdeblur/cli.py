"""Command-line entry point.

Subcommands: datagen, train, eval, infer, video, disk-bench, validate.
Every run writes ``manifest.json`` into its ``--out`` directory.  Exit codes:
0 ok, 1 validation error, 2 non-finite numerics, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import DatasetError, read_dataset, read_sample, sample_dirs, write_sample
from .metrics import DiskGeometry, mean_rbew, psnr, ssim
from .model import ABLATIONS, ArchConfig, STGDNet, ablate
from .sensor import (
    DEFAULT_EXPOSURES_US,
    compute_exposure,
    gen_rotating_disk,
    luma,
    make_sample,
    quantize,
    spatial_difference,
    synthesize_blur,
)
from .synth import moving_sequence
from .trainer import (
    CheckpointError,
    NumericError,
    TrainConfig,
    aggregate,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

log = logging.getLogger("cvsdeblur")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class ValidationFailed(Exception):
    """A command ran but found invalid data; outputs are still written."""


# ---------------------------------------------------------------- image I/O

def _png_bit_depth(path: Path) -> tuple[int, int]:
    # IHDR is always the first chunk: depth and colour type sit at bytes 24 and 25
    head = path.read_bytes()[:26]
    if len(head) < 26 or head[:8] != b"\x89PNG\r\n\x1a\n":
        raise OSError(f"{path}: not a PNG file")
    return head[24], head[25]


def read_png(path: Path, srgb_decode: bool = False) -> np.ndarray:
    """An ``(H, W, 3)`` float32 frame in [0, 1] from an 8- or 16-bit PNG."""
    from PIL import Image

    depth, color_type = _png_bit_depth(path)
    if depth == 16 and color_type in (2, 6):
        # Pillow narrows 16-bit colour PNGs to 8 bits, so defer to OpenCV
        try:
            import cv2
        except ImportError as exc:
            raise OSError(f"{path}: 16-bit colour PNG needs opencv-python") from exc
        raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if raw is None:
            raise OSError(f"{path}: unreadable")
        arr = raw[..., 2::-1].astype(np.float64) / 65535.0
    else:
        with Image.open(path) as im:
            if im.mode in ("I;16", "I;16B", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if srgb_decode:
        arr = np.where(arr <= 0.04045, arr / 12.92, ((arr + 0.055) / 1.055) ** 2.4)
    return arr.astype(np.float32)


def write_png(path: Path, frame: np.ndarray) -> None:
    from PIL import Image

    img = np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path)


def write_frame(stem: Path, frame: np.ndarray) -> list[str]:
    """Exact ``.f32`` (little-endian, HxWx3) plus an 8-bit ``.png`` preview."""
    raw = stem.with_suffix(".f32")
    np.asarray(frame, dtype="<f4").tofile(raw)
    png = stem.with_suffix(".png")
    write_png(png, frame)
    return [str(raw), str(png)]


def _natural_key(p: Path):
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", p.name)]


def find_sequences(root: Path) -> list[tuple[str, list[Path]]]:
    """Numbered PNG sequences: ``root`` itself or each of its subdirectories."""
    if not root.is_dir():
        raise OSError(f"input directory {root} not found")
    direct = sorted(root.glob("*.png"), key=_natural_key)
    if direct:
        return [(root.name, direct)]
    seqs = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        frames = sorted(sub.glob("*.png"), key=_natural_key)
        if frames:
            seqs.append((sub.name, frames))
    return seqs


# ---------------------------------------------------------------- run bookkeeping

class Run:
    """Collects the manifest of one command invocation."""

    def __init__(self, args: argparse.Namespace, command: str):
        self.out = Path(args.out)
        self.manifest = {
            "command": command,
            "version": __version__,
            "seed": args.seed,
            "argv": sys.argv[1:],
            "config": {k: v for k, v in vars(args).items() if k != "func"},
            "inputs": {},
            "outputs": [],
            "status": "running",
        }
        self.start = time.perf_counter()

    def finish(self, status: str, error: str | None = None) -> None:
        self.manifest["status"] = status
        self.manifest["partial"] = status != "ok"
        if error:
            self.manifest["error"] = error
        self.manifest["duration_s"] = round(time.perf_counter() - self.start, 3)
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "manifest.json").write_text(
            json.dumps(self.manifest, indent=2, default=str) + "\n")


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    cfg = json.loads(Path(path).read_text())
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return cfg


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


# ---------------------------------------------------------------- datagen

def cmd_datagen(args, run: Run) -> None:
    cfg = _load_config(args.config).get("datagen", {})
    exposures = _floats(args.exposures) if args.exposures else \
        cfg.get("exposures", list(DEFAULT_EXPOSURES_US))
    headroom = args.tail_headroom
    rng = np.random.default_rng(args.seed)
    if args.synthetic:
        seqs = [(f"synthetic_{i:04d}", None) for i in range(args.synthetic)]
    else:
        if not args.input:
            raise ValueError("datagen needs --input or --synthetic")
        seqs = find_sequences(Path(args.input))
        run.manifest["inputs"]["frames"] = str(args.input)
    out = Path(args.out)
    written, skipped = 0, 0
    for t in exposures:
        e = compute_exposure(t)
        need = e.N + headroom
        for name, paths in seqs:
            if paths is None:
                frames = moving_sequence(rng, args.size, need)
                windows = [frames]
            else:
                if len(paths) < need:
                    skipped += 1
                    log.warning("%s: %d frames, need %d for t=%g us; skipped",
                                name, len(paths), need, t)
                    continue
                stride = args.stride or e.N
                starts = range(0, len(paths) - need + 1, stride)
                windows = ([read_png(p, args.srgb_decode) for p in paths[s : s + need]]
                           for s in starts)
            for w_idx, frames in enumerate(windows):
                sample = make_sample(frames, e, tail=headroom)
                d = out / f"{name}_t{int(round(t))}_w{w_idx:03d}"
                write_sample(sample, d)
                run.manifest["outputs"].append(str(d))
                written += 1
    run.manifest["samples_written"] = written
    run.manifest["sequences_skipped"] = skipped
    log.info("wrote %d samples (%d short sequences skipped)", written, skipped)
    if written == 0:
        raise ValidationFailed("no samples written")


# ---------------------------------------------------------------- train

def _train_and_arch(args) -> tuple[TrainConfig, ArchConfig]:
    cfg = _load_config(args.config)
    tc = dict(cfg.get("train", {}))
    ac = dict(cfg.get("arch", {}))
    for key, val in (("steps", args.steps), ("epochs", args.epochs),
                     ("batch_size", args.batch_size), ("crop", args.crop),
                     ("lr_max", args.lr)):
        if val is not None:
            tc[key] = val
    if args.augment:
        tc["td_tail_augment"] = True
    if args.geo_augment:
        tc["geometric_augment"] = True
    tc["seed"] = args.seed
    if args.base_channels is not None:
        ac["base_channels"] = args.base_channels
    if args.attention is not None:
        ac["attention"] = args.attention
    arch = ablate(ArchConfig.from_dict(ac), **ABLATIONS[args.ablate])
    return TrainConfig.from_dict(tc), arch


def cmd_train(args, run: Run) -> None:
    config, arch = _train_and_arch(args)
    data = read_dataset(args.data)
    run.manifest["inputs"]["data"] = str(args.data)
    model = state = None
    if args.resume:
        model, state = load_checkpoint(args.resume, expected=arch, with_state=True)
        run.manifest["inputs"]["resume"] = str(args.resume)
        if state is None:
            raise CheckpointError(f"{args.resume} carries no optimizer state; cannot resume")
    run.manifest["train_config"] = asdict(config)
    run.manifest["arch"] = asdict(arch)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "loss.csv"
    result = train(data, config, arch, model=model, state=state)
    append = bool(args.resume) and csv_path.exists()
    with open(csv_path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(["step", "lr", "loss"])
        for step, lr, loss in result.history:
            w.writerow([step, repr(lr), repr(loss)])
    ckpt = save_checkpoint(out / "model.ckpt", result.model, result.state,
                           extra={"train_config": asdict(config)})
    run.manifest["outputs"] += [str(ckpt), str(csv_path)]
    run.manifest["final_step"] = result.state.t
    if result.history:
        run.manifest["final_loss"] = result.history[-1][2]


# ---------------------------------------------------------------- eval / infer / video

def cmd_eval(args, run: Run) -> None:
    model = load_checkpoint(args.checkpoint)
    dirs = sample_dirs(args.data)
    samples = [read_sample(d) for d in dirs]
    rows = evaluate(model, samples)
    for d, r in zip(dirs, rows):
        r["sample"] = d.name
    agg = aggregate([{k: v for k, v in r.items() if k != "sample"} for r in rows])
    report = {"per_sample": rows, "aggregate": agg}
    path = Path(args.out) / "metrics.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2) + "\n")
    run.manifest["inputs"].update(data=str(args.data), checkpoint=str(args.checkpoint))
    run.manifest["outputs"].append(str(path))
    log.info("restored %.3f dB / blurry %.3f dB over %d samples",
             agg["psnr"], agg["blur_psnr"], len(rows))


def cmd_infer(args, run: Run) -> None:
    model = load_checkpoint(args.checkpoint)
    sample = read_sample(args.sample)
    k = sample.exposure.mid_index if args.k is None else args.k
    frame = model.restore(sample, k=k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run.manifest["inputs"].update(sample=str(args.sample), checkpoint=str(args.checkpoint))
    run.manifest["outputs"] += write_frame(out / "restored", frame)
    run.manifest["k"] = k
    run.manifest["shape"] = list(frame.shape)


def cmd_video(args, run: Run) -> None:
    model = load_checkpoint(args.checkpoint)
    sample = read_sample(args.sample)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(sample.N):
        run.manifest["outputs"] += write_frame(out / f"frame_{k:02d}", model.restore(sample, k=k))
    run.manifest["inputs"].update(sample=str(args.sample), checkpoint=str(args.checkpoint))
    run.manifest["n_frames"] = sample.N
    run.manifest["shape"] = [sample.height, sample.width, 3]


# ---------------------------------------------------------------- disk benchmark

def disk_cell(model: STGDNet | None, rpm: float, t_rgb_us: float, illumination: float,
              sectors: int, size: int, degrees: bool = False) -> dict:
    """Mean-rBEW of the blurred and restored disk for one (rpm, exposure, illumination).

    Per-edge angles and widths are in radians unless ``degrees`` is set.
    """
    e = compute_exposure(t_rgb_us)
    fps = 1e6 / e.tau_diff_us
    frames = gen_rotating_disk(sectors, rpm, fps, e.N, size, illumination)
    sample = make_sample(frames, e)
    # the restoration is aligned with SD_mid, so the reference shows the disk at that angle
    mid_deg = 360.0 * rpm / 60.0 * e.mid_index / fps
    ref = gen_rotating_disk(sectors, 0, fps, 1, size, illumination, start_deg=mid_deg)[0]
    geo = DiskGeometry.for_frame(size, sectors)
    cell = {"rpm": rpm, "t_rgb_us": t_rgb_us, "illumination": illumination, "N": e.N}
    for key, img in (("blurry", sample.blur),
                     ("restored", model.restore(sample) if model is not None else None)):
        if img is None:
            continue
        try:
            rep = mean_rbew(img, ref, geo)
            edges = rep.per_edge
            if degrees:
                # widths scale up by 180/pi; the slope a is per angle unit and scales down
                conv = {"theta_center": np.degrees, "bew": np.degrees, "bew_ref": np.degrees,
                        "a": np.radians}
                edges = [{k: (float(conv[k](v)) if k in conv and v is not None else v)
                          for k, v in e.items()} for e in edges]
            cell[key] = {"psnr": psnr(img, ref), "ssim": ssim(img, ref),
                         "mean_rbew": rep.mean_rbew, "n_used": rep.n_used,
                         "n_excluded": rep.n_excluded, "per_edge": edges}
        except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
            cell[key] = {"mean_rbew": None, "error": str(exc)}
    return cell


def _heatmap(cells: list[dict], rpms, exposures, illums, key: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(illums), figsize=(4.5 * len(illums), 3.8), squeeze=False)
    for ax, il in zip(axes[0], illums):
        grid = np.full((len(exposures), len(rpms)), np.nan)
        for c in cells:
            if c["illumination"] == il and c.get(key, {}).get("mean_rbew") is not None:
                grid[exposures.index(c["t_rgb_us"]), rpms.index(c["rpm"])] = c[key]["mean_rbew"]
        im = ax.imshow(grid, origin="lower", aspect="auto", cmap="viridis")
        ax.set_xticks(range(len(rpms)), [f"{r:g}" for r in rpms])
        ax.set_yticks(range(len(exposures)), [f"{t:g}" for t in exposures])
        ax.set_xlabel("rotation speed (rpm)")
        ax.set_ylabel("RGB exposure (us)")
        ax.set_title(f"{key} Mean-rBEW, illumination {il:g}")
        fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_disk_bench(args, run: Run) -> None:
    model = load_checkpoint(args.checkpoint) if args.checkpoint else None
    rpms, exposures, illums = _floats(args.rpm), _floats(args.exposures), _floats(args.illumination)
    if not (rpms and exposures and illums):
        raise ValueError("rpm, exposure and illumination lists must be non-empty")
    cells = [disk_cell(model, r, t, il, args.sectors, args.size, args.degrees)
             for il in illums for t in exposures for r in rpms]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid_path = out / "grid.json"
    grid_path.write_text(json.dumps({"rpm": rpms, "exposures_us": exposures,
                                     "illumination": illums, "sectors": args.sectors,
                                     "size": args.size,
                                     "angle_unit": "deg" if args.degrees else "rad",
                                     "cells": cells}, indent=2) + "\n")
    run.manifest["outputs"].append(str(grid_path))
    for key in ("blurry", "restored") if model is not None else ("blurry",):
        png = out / f"heatmap_{key}.png"
        _heatmap(cells, rpms, exposures, illums, key, png)
        run.manifest["outputs"].append(str(png))
    if args.checkpoint:
        run.manifest["inputs"]["checkpoint"] = str(args.checkpoint)
    failed = sum(1 for c in cells for k in ("blurry", "restored")
                 if k in c and c[k]["mean_rbew"] is None)
    run.manifest["failed_cells"] = failed


# ---------------------------------------------------------------- validate

def check_sample(d: Path, atol: float = 1e-6) -> list[str]:
    """Problems found in one sample directory (empty when consistent)."""
    try:
        s = read_sample(d)
    except DatasetError as exc:
        return [str(exc)]
    problems = []
    gt = s.gt.astype(np.float64)
    if np.max(np.abs(synthesize_blur(gt) - s.blur)) > atol:
        problems.append("blur differs from the mean of the GT frames")
    gray = [luma(f) for f in gt]
    for k in range(s.N):
        if np.any(quantize(spatial_difference(gray[k])).astype(int) - s.sd_seq[k] != 0):
            problems.append(f"sd_{k} inconsistent with GT frame {k}")
    for i in range(s.N - 1):
        diff = np.abs(quantize(gray[i + 1] - gray[i]).astype(int) - s.td_seq[i])
        if np.any(diff > 1):    # one code of slack for float rounding at the half-step
            problems.append(f"td_{i} inconsistent with GT frames {i}, {i + 1}")
    return problems


def cmd_validate(args, run: Run) -> None:
    results = {}
    for d in sample_dirs(args.data):
        problems = check_sample(d)
        s = None if problems else read_sample(d)
        results[d.name] = {"ok": not problems, "problems": problems,
                           "static": bool(s is not None and np.all(s.td_seq == 0)
                                          and np.array_equal(s.blur, s.gt[s.gt_index]))}
    path = Path(args.out) / "validation.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(results, indent=2) + "\n")
    run.manifest["inputs"]["data"] = str(args.data)
    run.manifest["outputs"].append(str(path))
    bad = [k for k, v in results.items() if not v["ok"]]
    run.manifest["invalid_samples"] = bad
    if bad:
        raise ValidationFailed(f"{len(bad)} of {len(results)} samples invalid")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    common.add_argument("--config", help="JSON file with 'train', 'arch' and 'datagen' sections")
    common.add_argument("--out", default="out", help="output directory (default ./out)")
    common.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cvsdeblur", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("datagen", parents=[common], help="build a dataset from sharp frames")
    g.add_argument("--input", help="directory of numbered PNGs, or of such directories")
    g.add_argument("--synthetic", type=int, default=0,
                   help="generate this many moving-texture sequences instead of reading PNGs")
    g.add_argument("--size", type=int, default=48, help="synthetic frame size")
    g.add_argument("--exposures", help="comma-separated RGB exposures in us")
    g.add_argument("--tail-headroom", type=int, default=0, choices=range(4),
                   help="extra TDs stored after each exposure for tail augmentation")
    g.add_argument("--stride", type=int, default=None,
                   help="frames between window starts (default N, non-overlapping)")
    g.add_argument("--srgb-decode", action="store_true", help="linearize sRGB PNGs")
    g.set_defaults(func=cmd_datagen)

    t = sub.add_parser("train", parents=[common], help="train STGDNet")
    t.add_argument("--data", required=True)
    t.add_argument("--ablate", default="full", choices=sorted(ABLATIONS))
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--steps", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--crop", type=int)
    t.add_argument("--lr", type=float, help="peak learning rate")
    t.add_argument("--augment", action="store_true", help="enable TD-tail augmentation")
    t.add_argument("--geo-augment", action="store_true",
                   help="random quarter turns and mirrors (SD recomputed from GT)")
    t.add_argument("--base-channels", type=int)
    t.add_argument("--attention", choices=("channel", "spatial"))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="PSNR/SSIM of a checkpoint on a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", parents=[common], help="restore one sample")
    i.add_argument("--sample", required=True)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--k", type=int, help="SD index to align with (default mid index)")
    i.set_defaults(func=cmd_infer)

    v = sub.add_parser("video", parents=[common], help="emit all N intra-exposure frames")
    v.add_argument("--sample", required=True)
    v.add_argument("--checkpoint", required=True)
    v.set_defaults(func=cmd_video)

    d = sub.add_parser("disk-bench", parents=[common], help="rotating-disk boundary benchmark")
    d.add_argument("--checkpoint", help="model to benchmark (omit for blurry-only)")
    d.add_argument("--rpm", default="0,100,200,300,400,500,600")
    d.add_argument("--exposures", default=",".join(str(x) for x in DEFAULT_EXPOSURES_US))
    d.add_argument("--illumination", default="1.0")
    d.add_argument("--sectors", type=int, default=6)
    d.add_argument("--size", type=int, default=64)
    d.add_argument("--degrees", action="store_true", help="report edge angles and BEW in degrees")
    d.set_defaults(func=cmd_disk_bench)

    c = sub.add_parser("validate", parents=[common], help="check dataset consistency")
    c.add_argument("--data", required=True)
    c.set_defaults(func=cmd_validate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = Run(args, args.command)
    limiter = None
    if args.threads:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=args.threads)
    try:
        args.func(args, run)
    except (NumericError, FloatingPointError) as exc:
        return _fail(run, "numeric", exc, EXIT_NUMERIC)
    except (ValidationFailed, DatasetError, CheckpointError, ValueError, IndexError) as exc:
        return _fail(run, "invalid", exc, EXIT_VALIDATION)
    except OSError as exc:
        return _fail(run, "io", exc, EXIT_IO)
    finally:
        if limiter is not None:
            limiter.unregister()
    run.finish("ok")
    return EXIT_OK


def _fail(run: Run, status: str, exc: Exception, code: int) -> int:
    print(f"cvsdeblur: error: {exc}", file=sys.stderr)
    try:
        run.finish(status, str(exc))
    except OSError:
        pass
    return code


if __name__ == "__main__":
    sys.exit(main())
