"""Simulation of the complementary vision sensor's data format.

The sensor pairs a slow RGB pathway with a fast difference pathway that
emits, every ``tau_diff`` microseconds, a two-channel spatial difference (SD,
diagonal gradients) and a one-channel temporal difference (TD) between
consecutive ticks.  Here both are derived from a sequence of sharp frames,
one frame per tick; the RGB frame is the mean of the frames inside its
exposure.

Frames are numpy arrays, ``(H, W)`` for gray and ``(H, W, 3)`` for RGB, with
intensities in ``[0, 1]``.  Quantized SD/TD are ``int8`` with codes in
``[-127, 127]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

TAU_DIFF_US = 1320.0
QUANT_BITS = 7
DEFAULT_EXPOSURES_US = (6600.0, 9240.0, 11880.0, 14520.0)
MIN_EXTENT = 8


@dataclass(frozen=True)
class ExposureConfig:
    t_rgb_us: float
    tau_diff_us: float
    N: int
    mid_index: int


@dataclass
class CVSSample:
    """One blurred RGB exposure with its difference signals and sharp frames.

    ``tail_td`` optionally holds quantized TDs recorded *after* the exposure
    (``TD_{N-1}, TD_N, ...``); they feed the TD-tail augmentation.
    """

    blur: np.ndarray            # (H, W, 3) float32
    sd_seq: np.ndarray          # (N, H, W, 2) int8
    td_seq: np.ndarray          # (N-1, H, W) int8
    exposure: ExposureConfig
    gt: np.ndarray              # (N, H, W, 3) float32
    gt_index: int
    tail_td: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 0), np.int8))

    @property
    def height(self) -> int:
        return self.blur.shape[0]

    @property
    def width(self) -> int:
        return self.blur.shape[1]

    @property
    def N(self) -> int:
        return self.exposure.N

    def validate(self) -> None:
        n = self.exposure.N
        h, w = self.blur.shape[:2]
        if self.blur.shape != (h, w, 3):
            raise ValueError(f"blur must be (H, W, 3), got {self.blur.shape}")
        if self.sd_seq.shape != (n, h, w, 2):
            raise ValueError(f"sd_seq shape {self.sd_seq.shape} != {(n, h, w, 2)}")
        if self.td_seq.shape != (n - 1, h, w):
            raise ValueError(f"td_seq shape {self.td_seq.shape} != {(n - 1, h, w)}")
        if self.gt.shape != (n, h, w, 3):
            raise ValueError(f"gt shape {self.gt.shape} != {(n, h, w, 3)}")
        if not 0 <= self.gt_index < n:
            raise ValueError(f"gt_index {self.gt_index} outside [0, {n - 1}]")
        if self.tail_td.size and self.tail_td.shape[1:] != (h, w):
            raise ValueError(f"tail_td shape {self.tail_td.shape} incompatible with {h}x{w}")


def compute_exposure(t_rgb_us: float, tau_diff_us: float = TAU_DIFF_US) -> ExposureConfig:
    """Number of SD ticks covering an RGB exposure and the index nearest its midpoint."""
    if t_rgb_us <= 0 or tau_diff_us <= 0:
        raise ValueError("exposure and tick interval must be positive")
    if t_rgb_us <= tau_diff_us:
        raise ValueError(
            f"exposure {t_rgb_us} us does not exceed one tick ({tau_diff_us} us): no TD exists")
    # exact rational ceiling; avoids 6600/1320 landing a hair above 5
    n = math.ceil(round(t_rgb_us / tau_diff_us, 9))
    return ExposureConfig(float(t_rgb_us), float(tau_diff_us), n, (n - 1) // 2)


def _as_gray(frame: np.ndarray) -> np.ndarray:
    f = np.asarray(frame)
    if f.ndim == 3 and f.shape[2] == 1:
        f = f[:, :, 0]
    if f.ndim != 2:
        raise ValueError(f"expected a single-channel frame, got shape {f.shape}")
    return f


def luma(frame: np.ndarray) -> np.ndarray:
    """Unweighted channel mean ``(R + G + B) / 3``."""
    f = np.asarray(frame)
    if f.ndim == 2:
        return f
    return f.mean(axis=2, dtype=np.float64).astype(f.dtype if f.dtype.kind == "f" else np.float32)


def spatial_difference(frame: np.ndarray) -> np.ndarray:
    """Diagonal gradients of a gray frame, shape ``(H, W, 2)``.

    Channel 0 is the +45 degree difference ``I(y-1, x+1) - I(y, x)``, channel 1
    the -45 degree difference ``I(y+1, x+1) - I(y, x)``.  Borders replicate the
    edge pixels, so constant frames map to zero everywhere.
    """
    f = _as_gray(frame)
    p = np.pad(f, 1, mode="edge")
    h, w = f.shape
    up_right = p[0:h, 2 : w + 2]
    down_right = p[2 : h + 2, 2 : w + 2]
    return np.stack([up_right - f, down_right - f], axis=-1)


def temporal_difference(frame_a: np.ndarray, frame_b: np.ndarray) -> np.ndarray:
    """Per-pixel change from the earlier frame ``frame_a`` to ``frame_b``."""
    a, b = _as_gray(frame_a), _as_gray(frame_b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return b - a


def quantize(diff: np.ndarray, bits: int = QUANT_BITS) -> np.ndarray:
    """Map float differences in [-1, 1] to signed codes, rounding half away from zero."""
    scale = (1 << bits) - 1
    d = np.clip(np.asarray(diff, dtype=np.float64), -1.0, 1.0) * scale
    q = np.sign(d) * np.floor(np.abs(d) + 0.5)
    q = np.clip(q, -scale, scale)
    return q.astype(np.int8 if bits <= 7 else np.int16)


def dequantize(q: np.ndarray, bits: int = QUANT_BITS) -> np.ndarray:
    return np.asarray(q, dtype=np.float32) / np.float32((1 << bits) - 1)


def synthesize_blur(sharp: list[np.ndarray] | np.ndarray) -> np.ndarray:
    """Exposure-integrated frame: the per-pixel mean of the sharp frames."""
    if len(sharp) == 0:
        raise ValueError("synthesize_blur needs at least one frame")
    stack = np.asarray(sharp)
    if stack.dtype == object:
        raise ValueError("frames must share one shape")
    return stack.mean(axis=0, dtype=np.float64).astype(np.float32)


def make_sample(sharp_seq, exposure: ExposureConfig, gt_index: int | None = None,
                tail: int = 0) -> CVSSample:
    """Assemble a sample from the first ``N`` sharp frames of ``sharp_seq``.

    ``tail`` additional TDs past the exposure are recorded when the sequence
    has ``N + tail`` frames.
    """
    n = exposure.N
    if gt_index is None:
        gt_index = exposure.mid_index
    if len(sharp_seq) < n + tail:
        raise ValueError(f"need {n + tail} frames, got {len(sharp_seq)}")
    if not 0 <= gt_index < n:
        raise ValueError(f"gt_index {gt_index} outside [0, {n - 1}]")
    frames = np.asarray(sharp_seq[: n + tail], dtype=np.float32)
    if frames.ndim == 3:
        frames = np.repeat(frames[..., None], 3, axis=-1)
    h, w = frames.shape[1:3]
    if h < MIN_EXTENT or w < MIN_EXTENT:
        raise ValueError(f"frames must be at least {MIN_EXTENT}x{MIN_EXTENT}")
    gray = [luma(f) for f in frames]
    sd = np.stack([quantize(spatial_difference(g)) for g in gray[:n]])
    td = np.stack([quantize(temporal_difference(gray[i], gray[i + 1])) for i in range(n - 1)])
    if tail:
        tail_td = np.stack([quantize(temporal_difference(gray[i], gray[i + 1]))
                            for i in range(n - 1, n - 1 + tail)])
    else:
        tail_td = np.zeros((0, h, w), np.int8)
    return CVSSample(
        blur=synthesize_blur(frames[:n]),
        sd_seq=sd,
        td_seq=td,
        exposure=exposure,
        gt=frames[:n].copy(),
        gt_index=gt_index,
        tail_td=tail_td,
    )


def accumulate_td_tail(last_td: np.ndarray, extra_tds, m: int) -> np.ndarray:
    """Float sum of the dequantized last TD and the first ``m`` extra TDs."""
    if len(extra_tds) < m:
        raise ValueError(f"need {m} extra TD frames, got {len(extra_tds)}")
    acc = dequantize(last_td).astype(np.float64)
    for j in range(m):
        acc += dequantize(extra_tds[j])
    return acc


def augment_td_tail(sample: CVSSample, extra_tds=None, m: int = 1) -> CVSSample:
    """Replace the last TD with the accumulated TD over ``m`` more ticks."""
    if m not in (1, 2, 3):
        raise ValueError(f"m must be 1, 2 or 3, got {m}")
    extra = sample.tail_td if extra_tds is None else extra_tds
    acc = accumulate_td_tail(sample.td_seq[-1], extra, m)
    td = sample.td_seq.copy()
    td[-1] = quantize(acc)
    return replace(sample, td_seq=td)


def transform_sample(sample: CVSSample, rot: int = 0, flip: bool = False) -> CVSSample:
    """Rotate the scene by ``rot`` quarter turns, then optionally mirror it left-right.

    Blur, GT and TDs are pointwise in space and move with the image.  The
    diagonal SD stencil is not symmetric under these maps, so SD is recomputed
    from the transformed GT; this assumes the sample's SD was derived from its GT.
    """

    def geo(a, axes):
        a = np.rot90(a, rot, axes=axes)
        return np.ascontiguousarray(np.flip(a, axis=axes[1]) if flip else a)

    gt = geo(sample.gt, (1, 2))
    sd = np.stack([quantize(spatial_difference(luma(f))) for f in gt])
    tail = geo(sample.tail_td, (1, 2)) if sample.tail_td.size else sample.tail_td
    return replace(sample, blur=geo(sample.blur, (0, 1)), sd_seq=sd,
                   td_seq=geo(sample.td_seq, (1, 2)), gt=gt, tail_td=tail)


def gen_rotating_disk(sectors: int, rpm: float, fps: float, n_frames: int, size: int,
                      illumination: float = 1.0, start_deg: float = 0.0,
                      colors=((0.9, 0.8, 0.3), (0.15, 0.2, 0.55)),
                      supersample: int = 4) -> list[np.ndarray]:
    """Render a disk of alternating-colour sectors spinning at ``rpm``.

    Frame ``t`` is rotated by ``start_deg + 360 * rpm / 60 * t / fps`` degrees.
    The disk has radius ``0.45 * size`` on a black background; each pixel
    averages a ``supersample x supersample`` grid of sub-samples.
    """
    if sectors < 2:
        raise ValueError("need at least two sectors")
    if size < MIN_EXTENT or n_frames < 1 or fps <= 0 or rpm < 0:
        raise ValueError("invalid disk parameters")
    if not 0 < illumination <= 1:
        raise ValueError("illumination must lie in (0, 1]")
    s = supersample
    offs = (np.arange(s) + 0.5) / s
    coords = (np.arange(size)[:, None] + offs[None, :]).reshape(-1)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    c = size / 2.0
    dy, dx = yy - c, xx - c
    inside = np.hypot(dx, dy) <= 0.45 * size
    phi = np.arctan2(dy, dx)
    palette = np.asarray(colors, dtype=np.float64)
    width = 2 * np.pi / sectors
    frames = []
    for t in range(n_frames):
        rot = np.deg2rad(np.mod(start_deg + 360.0 * rpm / 60.0 * t / fps, 360.0))
        idx = np.floor(np.mod(phi - rot, 2 * np.pi) / width).astype(int) % sectors
        img = palette[idx % 2] * inside[..., None]
        img = img.reshape(size, s, size, s, 3).mean(axis=(1, 3)) * illumination
        frames.append(img.astype(np.float32))
    return frames
