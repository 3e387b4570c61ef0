"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def grad_check(f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor],
               h: float = 1e-6, max_coords: int | None = 16, seed: int = 0,
               atol: float = 1e-9) -> float:
    """Return the worst per-parameter relative error between analytic and numeric grads.

    ``f`` maps the parameter list to a scalar tensor.  Analytic gradients are
    taken at the parameters' own dtype; central differences always run on
    float64 copies.  For large tensors only ``max_coords`` randomly chosen
    coordinates are probed.  The error for one parameter is
    ``||g_a - g_n|| / max(||g_a||, ||g_n||, atol)`` over the probed entries,
    so ``atol`` is an absolute floor below which differences are not
    amplified.  It should sit above the cancellation noise of the central
    difference, roughly ``1e-16 * |f| / h``.
    """
    for p in params:
        p.grad = None
        p.requires_grad = True
    out = f(params)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("grad_check: non-finite output")
    out.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]

    probes = [Tensor(p.data.astype(np.float64), requires_grad=False) for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for idx, probe in enumerate(probes):
        flat = probe.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if max_coords is None or n <= max_coords else \
            rng.choice(n, size=max_coords, replace=False)
        num = np.empty(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + h
            fp = float(f(probes).data)
            flat[c] = orig - h
            fm = float(f(probes).data)
            flat[c] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError("grad_check: non-finite output under perturbation")
            num[j] = (fp - fm) / (2 * h)
        ana = analytic[idx].reshape(-1)[coords]
        denom = max(np.linalg.norm(ana), np.linalg.norm(num), atol)
        worst = max(worst, float(np.linalg.norm(ana - num) / denom))
    return worst
