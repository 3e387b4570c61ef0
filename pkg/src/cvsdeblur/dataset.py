"""On-disk sample directories.

Each sample lives in its own directory::

    meta.json    {t_rgb_us, tau_diff_us, N, mid_index, height, width, gt_index, n_tail}
    blur.f32     little-endian float32, H*W*3, row-major, channel-last
    sd_<k>.i8    int8, H*W*2, k in [0, N-1]
    td_<i>.i8    int8, H*W,   i in [0, N-2]
    gt_<k>.f32   little-endian float32, H*W*3
    tail_<j>.i8  int8, H*W,   optional TDs recorded after the exposure

Readers check every file against ``meta.json`` and raise ``DatasetError``
on any mismatch.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .sensor import CVSSample, ExposureConfig

META_KEYS = ("t_rgb_us", "tau_diff_us", "N", "mid_index", "height", "width", "gt_index")


class DatasetError(ValueError):
    pass


def write_sample(sample: CVSSample, directory: str | Path) -> Path:
    sample.validate()
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    e = sample.exposure
    meta = {
        "t_rgb_us": e.t_rgb_us,
        "tau_diff_us": e.tau_diff_us,
        "N": e.N,
        "mid_index": e.mid_index,
        "height": sample.height,
        "width": sample.width,
        "gt_index": sample.gt_index,
        "n_tail": int(sample.tail_td.shape[0]) if sample.tail_td.size else 0,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    sample.blur.astype("<f4").tofile(d / "blur.f32")
    for k in range(e.N):
        sample.sd_seq[k].astype(np.int8).tofile(d / f"sd_{k}.i8")
        sample.gt[k].astype("<f4").tofile(d / f"gt_{k}.f32")
    for i in range(e.N - 1):
        sample.td_seq[i].astype(np.int8).tofile(d / f"td_{i}.i8")
    for j in range(meta["n_tail"]):
        sample.tail_td[j].astype(np.int8).tofile(d / f"tail_{j}.i8")
    return d


def _load(path: Path, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"missing file {path}")
    arr = np.fromfile(path, dtype=dtype)
    expected = int(np.prod(shape))
    if arr.size != expected:
        raise DatasetError(f"{path.name}: {arr.size} values, expected {expected}")
    return arr.reshape(shape)


def read_meta(directory: str | Path) -> dict:
    d = Path(directory)
    try:
        meta = json.loads((d / "meta.json").read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"{d}: no meta.json") from exc
    missing = [k for k in META_KEYS if k not in meta]
    if missing:
        raise DatasetError(f"{d}/meta.json lacks {missing}")
    return meta


def read_sample(directory: str | Path) -> CVSSample:
    d = Path(directory)
    meta = read_meta(d)
    n, h, w = int(meta["N"]), int(meta["height"]), int(meta["width"])
    if n < 2:
        raise DatasetError(f"{d}: N={n} leaves no TD frame")
    if int(meta["mid_index"]) != (n - 1) // 2:
        raise DatasetError(f"{d}: mid_index {meta['mid_index']} inconsistent with N={n}")
    n_tail = int(meta.get("n_tail", 0))
    n_sd = len(list(d.glob("sd_*.i8")))
    n_td = len(list(d.glob("td_*.i8")))
    n_gt = len(list(d.glob("gt_*.f32")))
    n_tl = len(list(d.glob("tail_*.i8")))
    if (n_sd, n_td, n_gt, n_tl) != (n, n - 1, n, n_tail):
        raise DatasetError(
            f"{d}: found {n_sd} SD / {n_td} TD / {n_gt} GT / {n_tl} tail files, "
            f"meta.json implies {n} / {n - 1} / {n} / {n_tail}")
    sample = CVSSample(
        blur=_load(d / "blur.f32", "<f4", (h, w, 3)).astype(np.float32),
        sd_seq=np.stack([_load(d / f"sd_{k}.i8", "i1", (h, w, 2)) for k in range(n)]),
        td_seq=np.stack([_load(d / f"td_{i}.i8", "i1", (h, w)) for i in range(n - 1)]),
        exposure=ExposureConfig(float(meta["t_rgb_us"]), float(meta["tau_diff_us"]), n,
                                int(meta["mid_index"])),
        gt=np.stack([_load(d / f"gt_{k}.f32", "<f4", (h, w, 3)) for k in range(n)]).astype(np.float32),
        gt_index=int(meta["gt_index"]),
        tail_td=(np.stack([_load(d / f"tail_{j}.i8", "i1", (h, w)) for j in range(n_tail)])
                 if n_tail else np.zeros((0, h, w), np.int8)),
    )
    try:
        sample.validate()
    except ValueError as exc:
        raise DatasetError(f"{d}: {exc}") from exc
    return sample


def sample_dirs(root: str | Path) -> list[Path]:
    root = Path(root)
    if (root / "meta.json").is_file():
        return [root]
    dirs = sorted(p.parent for p in root.glob("*/meta.json"))
    if not dirs:
        raise DatasetError(f"no sample directories under {root}")
    return dirs


def read_dataset(root: str | Path) -> list[CVSSample]:
    return [read_sample(d) for d in sample_dirs(root)]
