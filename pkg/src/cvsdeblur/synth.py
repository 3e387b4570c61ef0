"""Synthetic sharp-frame sequences: textured patterns under rigid motion."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .sensor import CVSSample, compute_exposure, make_sample


def random_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """An RGB canvas with smooth colour variation plus hard-edged shapes."""
    base = np.stack([ndimage.gaussian_filter(rng.random((size, size)), sigma=size / 12)
                     for _ in range(3)], axis=-1)
    base = (base - base.min()) / (np.ptp(base) + 1e-12)
    img = 0.2 + 0.4 * base
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for _ in range(int(rng.integers(14, 24))):
        color = rng.random(3)
        kind = rng.integers(0, 3)
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(size / 16, size / 5)
        if kind == 0:
            mask = np.hypot(yy - cy, xx - cx) <= r
        elif kind == 1:
            mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= 0.6 * r)
        else:
            ang = rng.uniform(0, np.pi)
            period = rng.uniform(4, 10)
            phase = (np.cos(ang) * xx + np.sin(ang) * yy) / period
            mask = (np.hypot(yy - cy, xx - cx) <= 1.5 * r) & (np.mod(phase, 1.0) < 0.5)
        img[mask] = color
    return np.clip(img, 0.0, 1.0)


def moving_sequence(rng: np.random.Generator, size: int, n_frames: int,
                    max_shift: float = 2.0, max_rot_deg: float = 2.0) -> list[np.ndarray]:
    """``n_frames`` views of one texture under constant translation and rotation per tick."""
    canvas = 2 * size
    tex = random_texture(rng, canvas)
    speed = rng.uniform(0.5, 1.0) * max_shift
    heading = rng.uniform(0, 2 * np.pi)
    v = speed * np.array([np.sin(heading), np.cos(heading)])
    omega = np.deg2rad(rng.uniform(-max_rot_deg, max_rot_deg))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy -= size / 2.0
    xx -= size / 2.0
    frames = []
    for t in range(n_frames):
        c, s = np.cos(omega * t), np.sin(omega * t)
        src_y = c * yy - s * xx + canvas / 2.0 + v[0] * t
        src_x = s * yy + c * xx + canvas / 2.0 + v[1] * t
        frame = np.stack([ndimage.map_coordinates(tex[..., ch], [src_y, src_x], order=1,
                                                  mode="reflect")
                          for ch in range(3)], axis=-1)
        frames.append(np.clip(frame, 0.0, 1.0).astype(np.float32))
    return frames


def moving_pattern_dataset(n: int, size: int = 48, t_rgb_us: float = 6600.0, seed: int = 0,
                           tail: int = 3, **motion) -> list[CVSSample]:
    """``n`` samples of moving textures at one exposure, each with ``tail`` extra TDs."""
    rng = np.random.default_rng(seed)
    exposure = compute_exposure(t_rgb_us)
    return [make_sample(moving_sequence(rng, size, exposure.N + tail, **motion), exposure,
                        tail=tail)
            for _ in range(n)]
