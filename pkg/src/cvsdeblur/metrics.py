"""Image quality and edge-sharpness metrics.

PSNR and SSIM compare a restoration against ground truth.  The rotating-disk
boundary metric needs no ground truth: it samples intensity around a circle,
fits a sigmoid to every sector transition, and reports the 10%-90% blurred
edge width (BEW) relative to a static reference image.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .sensor import luma

PSNR_CAP_DB = 100.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K = (0.01, 0.03)
BEW_FACTOR = 2.0 * math.log(9.0)


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    return p, g


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit peak; identical inputs give 100 dB."""
    p, g = _check_pair(pred, gt)
    mse = float(np.mean((p - g) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, n, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=1) @ g


def _ssim_gray(x: np.ndarray, y: np.ndarray, g: np.ndarray) -> float:
    c1 = SSIM_K[0] ** 2
    c2 = SSIM_K[1] ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian windows (sigma 1.5).

    RGB inputs are scored per channel and averaged.
    """
    p, g = _check_pair(pred, gt)
    if p.shape[0] < SSIM_WIN or p.shape[1] < SSIM_WIN:
        raise ValueError(f"frame {p.shape[:2]} smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    w = gaussian_window()
    if p.ndim == 2:
        return _ssim_gray(p, g, w)
    return float(np.mean([_ssim_gray(p[..., c], g[..., c], w) for c in range(p.shape[2])]))


# ---------------------------------------------------------------- angular profiles

def bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample ``img`` at continuous coordinates; pixel (i, j) is centred at (j+0.5, i+0.5)."""
    u, v = np.asarray(x) - 0.5, np.asarray(y) - 0.5
    j0 = np.clip(np.floor(u).astype(int), 0, img.shape[1] - 2)
    i0 = np.clip(np.floor(v).astype(int), 0, img.shape[0] - 2)
    fu, fv = u - j0, v - i0
    return ((1 - fv) * ((1 - fu) * img[i0, j0] + fu * img[i0, j0 + 1])
            + fv * ((1 - fu) * img[i0 + 1, j0] + fu * img[i0 + 1, j0 + 1]))


def profile_at(frame: np.ndarray, center: tuple[float, float], radius: float,
               thetas: np.ndarray) -> np.ndarray:
    """Luma sampled at angles ``thetas`` on a circle; ``center`` is ``(x, y)``."""
    img = luma(np.asarray(frame, dtype=np.float64))
    cx, cy = center
    h, w = img.shape
    if radius <= 0 or cx - radius < 0.5 or cy - radius < 0.5 \
            or cx + radius > w - 0.5 or cy + radius > h - 0.5:
        raise ValueError(f"circle r={radius} at {center} leaves the {w}x{h} frame")
    t = np.asarray(thetas, dtype=np.float64)
    return bilinear(img, cx + radius * np.cos(t), cy + radius * np.sin(t))


def sample_angular_profile(frame: np.ndarray, center: tuple[float, float], radius: float,
                           n_samples: int = 720) -> tuple[np.ndarray, np.ndarray]:
    """``n_samples`` uniformly spaced angles in ``[0, 2*pi)`` and their luma values."""
    thetas = np.linspace(0.0, 2 * np.pi, n_samples, endpoint=False)
    return thetas, profile_at(frame, center, radius, thetas)


# ---------------------------------------------------------------- sigmoid fit

@dataclass
class SigmoidFit:
    """``S(theta) = delta / (1 + exp(-(a*theta + b))) + g_min``."""

    a: float
    b: float
    delta: float
    g_min: float
    residual: float
    converged: bool
    iterations: int = 0

    def __call__(self, theta):
        return self.delta / (1.0 + np.exp(-(self.a * np.asarray(theta) + self.b))) + self.g_min


def _sig(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _model_and_jac(p, t):
    a, b, d, g = p
    s = _sig(a * t + b)
    ds = s * (1.0 - s)
    jac = np.stack([d * ds * t, d * ds, s, np.ones_like(t)], axis=1)
    return d * s + g, jac


def fit_sigmoid(theta, intensity, max_iter: int = 100, tol: float = 1e-12) -> SigmoidFit:
    """Least-squares sigmoid through one edge transition (Levenberg-Marquardt).

    The fit runs in normalized coordinates (theta mapped to [-1, 1], intensity
    to [0, 1]) and is mapped back, so results are invariant to translating
    theta and to affine rescaling of intensity.  ``converged`` is False when
    the solver stops on its evaluation budget instead of a tolerance.
    """
    t = np.asarray(theta, dtype=np.float64)
    y = np.asarray(intensity, dtype=np.float64)
    if t.shape != y.shape or t.ndim != 1 or t.size < 5:
        raise ValueError("need matching 1-D theta/intensity arrays with at least 5 points")
    order = np.argsort(t)
    t, y = t[order], y[order]
    tc, ts = 0.5 * (t[0] + t[-1]), 0.5 * (t[-1] - t[0])
    ylo, yr = y.min(), y.max() - y.min()
    if ts <= 0 or yr <= 0:
        return SigmoidFit(0.0, 0.0, 0.0, float(ylo), 0.0, False)
    tn, yn = (t - tc) / ts, (y - ylo) / yr

    # initial guess: plateaus, 50% crossing, slope there
    above = yn >= 0.5
    rising = yn[-1] >= yn[0]
    flips = np.nonzero(above[1:] != above[:-1])[0]
    if flips.size:
        i = flips[0]
        t50 = tn[i] + (0.5 - yn[i]) * (tn[i + 1] - tn[i]) / (yn[i + 1] - yn[i])
    else:
        i, t50 = len(tn) // 2, 0.0
    slope = np.gradient(yn, tn)[max(0, min(i, len(tn) - 1))]
    a0 = 4.0 * slope
    if a0 == 0 or (a0 > 0) != rising:
        a0 = 4.0 if rising else -4.0
    p0 = np.array([a0, -a0 * t50, 1.0, 0.0])

    res = least_squares(lambda p: _model_and_jac(p, tn)[0] - yn, p0,
                        jac=lambda p: _model_and_jac(p, tn)[1], method="lm",
                        xtol=tol, ftol=tol, gtol=tol, max_nfev=max_iter * 5)
    sse = float(res.fun @ res.fun)
    a_n, b_n, d_n, g_n = res.x
    a = a_n / ts
    b = b_n - a_n * tc / ts
    delta = d_n * yr
    g_min = g_n * yr + ylo
    if delta < 0:
        # same curve with the sigmoid mirrored: d*s(z) + g = -d*s(-z) + (g + d)
        a, b, g_min, delta = -a, -b, g_min + delta, -delta
    converged = bool(res.status > 0 and np.all(np.isfinite(res.x)))
    return SigmoidFit(float(a), float(b), float(delta), float(g_min), float(sse * yr * yr),
                      converged, int(res.nfev))


def bew(fit: SigmoidFit) -> float:
    """Angular width between the 10% and 90% levels of the fitted edge: ``2 ln 9 / |a|``."""
    if fit.a == 0 or not np.isfinite(fit.a):
        raise ValueError("fit has no transition (a = 0)")
    return BEW_FACTOR / abs(fit.a)


# ---------------------------------------------------------------- disk boundary metric

@dataclass(frozen=True)
class DiskGeometry:
    center: tuple[float, float]
    radius: float
    sectors: int
    n_samples: int = 720

    @classmethod
    def for_frame(cls, size: int, sectors: int, n_samples: int = 720) -> "DiskGeometry":
        """Sampling circle at 70% of the rendered disk radius (see ``gen_rotating_disk``)."""
        return cls((size / 2.0, size / 2.0), 0.7 * 0.45 * size, sectors, n_samples)


@dataclass
class EdgeFit:
    theta_center: float
    rising: bool
    fit: SigmoidFit
    bew: float | None


@dataclass
class BEWReport:
    per_edge: list[dict] = field(default_factory=list)
    mean_rbew: float = float("nan")
    n_edges: int = 0
    n_used: int = 0
    n_excluded: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def find_edges(thetas: np.ndarray, values: np.ndarray) -> list[tuple[float, bool]]:
    """Circular 50%-level crossings of a full-turn profile as ``(theta, rising)``."""
    thr = 0.5 * (values.min() + values.max())
    s = values - thr
    n = len(values)
    step = 2 * np.pi / n
    edges = []
    for i in range(n):
        j = (i + 1) % n
        if (s[i] < 0) != (s[j] < 0):
            frac = s[i] / (s[i] - s[j])
            edges.append((float(np.mod(thetas[i] + frac * step, 2 * np.pi)), bool(s[i] < 0)))
    return sorted(edges)


def fit_edges(thetas: np.ndarray, values: np.ndarray) -> list[EdgeFit]:
    """Cut the profile halfway between neighbouring crossings and fit each piece.

    Falling edges are reflected in theta so every fit sees a rising transition.
    """
    edges = find_edges(thetas, values)
    out = []
    m = len(edges)
    if m < 2:
        return out
    for e, (tc, rising) in enumerate(edges):
        prev_t = edges[e - 1][0]
        next_t = edges[(e + 1) % m][0]
        lo = -0.5 * np.mod(tc - prev_t, 2 * np.pi)
        hi = 0.5 * np.mod(next_t - tc, 2 * np.pi)
        rel = np.mod(thetas - tc + np.pi, 2 * np.pi) - np.pi
        sel = (rel >= lo) & (rel <= hi)
        t_seg, v_seg = rel[sel], values[sel]
        if not rising:
            t_seg = -t_seg
        try:
            fit = fit_sigmoid(t_seg, v_seg)
            width = bew(fit) if fit.converged else None
        except ValueError:
            fit = SigmoidFit(0.0, 0.0, 0.0, 0.0, float("nan"), False)
            width = None
        out.append(EdgeFit(tc, rising, fit, width))
    return out


def _circ_dist(a: float, b: float) -> float:
    d = abs(np.mod(a - b, 2 * np.pi))
    return min(d, 2 * np.pi - d)


def mean_rbew(test: np.ndarray, static_ref: np.ndarray, geometry: DiskGeometry) -> BEWReport:
    """Mean over edges of BEW(test) / BEW(static reference).

    Each reference edge is paired with the nearest test edge of the same
    polarity within half a sector.  Unpaired edges and edges whose fit did not
    converge are excluded and counted in ``n_excluded``.
    """
    th, v_ref = sample_angular_profile(static_ref, geometry.center, geometry.radius,
                                       geometry.n_samples)
    _, v_test = sample_angular_profile(test, geometry.center, geometry.radius,
                                       geometry.n_samples)
    ref_edges = fit_edges(th, v_ref)
    test_edges = fit_edges(th, v_test)
    half_sector = np.pi / geometry.sectors
    report = BEWReport(n_edges=len(ref_edges))
    ratios = []
    for re_ in ref_edges:
        cands = [te for te in test_edges if te.rising == re_.rising
                 and _circ_dist(te.theta_center, re_.theta_center) < half_sector]
        te = min(cands, key=lambda c: _circ_dist(c.theta_center, re_.theta_center)) \
            if cands else None
        ok = te is not None and te.bew is not None and re_.bew is not None
        rb = te.bew / re_.bew if ok else None
        if ok:
            ratios.append(rb)
        f = te.fit if te is not None else None
        report.per_edge.append({
            "theta_center": re_.theta_center,
            "a": f.a if f else None,
            "b": f.b if f else None,
            "delta": f.delta if f else None,
            "g_min": f.g_min if f else None,
            "bew": te.bew if te is not None else None,
            "bew_ref": re_.bew,
            "rbew": rb,
            "converged": bool(ok),
        })
    report.n_used = len(ratios)
    report.n_excluded = len(ref_edges) - len(ratios)
    if not ratios:
        raise ValueError("no usable edges for Mean-rBEW")
    report.mean_rbew = float(np.mean(ratios))
    return report
