import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cvsdeblur.optim import OptimState, adamw_step, cosine_lr


def scalar_adamw(p, grads, lr, wd, b1, b2, eps):
    """Hand-rolled AdamW recurrence on one float."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        p = p * (1 - lr * wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p = p - lr * m_hat / (math.sqrt(v_hat) + eps)
    return p


def test_zero_grad_zero_decay_unchanged():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    st_ = OptimState(weight_decay=0.0)
    for _ in range(5):
        adamw_step(p, {"w": np.zeros(3)}, st_)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0, 3.0])


def test_scalar_three_steps_match_oracle():
    p = {"w": np.array([0.8])}
    s = OptimState()
    for _ in range(3):
        adamw_step(p, {"w": np.array([1.0])}, s)
    ref = scalar_adamw(0.8, [1.0] * 3, 2e-4, 1e-4, 0.9, 0.99, 1e-8)
    assert abs(p["w"][0] - ref) <= 1e-15
    assert s.t == 3


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8), st.floats(-3, 3))
def test_matches_oracle_for_arbitrary_gradients(gs, p0):
    p = {"w": np.array([p0])}
    s = OptimState(lr=1e-2, weight_decay=0.05)
    for g in gs:
        adamw_step(p, {"w": np.array([g])}, s)
    assert p["w"][0] == pytest.approx(scalar_adamw(p0, gs, 1e-2, 0.05, 0.9, 0.99, 1e-8),
                                      abs=1e-12)


def test_weight_decay_shrinks_magnitude():
    p = {"w": np.array([2.0, -3.0])}
    s = OptimState(weight_decay=0.1, lr=1e-2)
    prev = np.abs(p["w"]).copy()
    for _ in range(4):
        adamw_step(p, {"w": None}, s)
        assert np.all(np.abs(p["w"]) < prev)
        prev = np.abs(p["w"]).copy()


def test_deterministic():
    rng = np.random.default_rng(0)
    g = rng.standard_normal((4, 4)).astype(np.float32)
    w0 = rng.standard_normal((4, 4)).astype(np.float32)
    out = []
    for _ in range(2):
        p, s = {"w": w0.copy()}, OptimState()
        for _ in range(3):
            adamw_step(p, {"w": g}, s)
        out.append(p["w"])
    assert out[0].tobytes() == out[1].tobytes()


def test_shape_mismatch():
    with pytest.raises(ValueError):
        adamw_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, OptimState())
    s = OptimState(m={"w": np.zeros(2)}, v={"w": np.zeros(2)})
    with pytest.raises(ValueError):
        adamw_step({"w": np.zeros(3)}, {"w": np.zeros(3)}, s)


def test_cosine_endpoints():
    assert cosine_lr(0, 1000) == 2e-4
    assert cosine_lr(1000, 1000) == pytest.approx(1e-7, abs=1e-20)
    assert cosine_lr(500, 1000) == pytest.approx((2e-4 + 1e-7) / 2, rel=1e-12)


def test_cosine_monotone_and_errors():
    lrs = [cosine_lr(s, 50) for s in range(51)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        cosine_lr(51, 50)
    with pytest.raises(ValueError):
        cosine_lr(-1, 50)
