from __future__ import annotations

import math

import numpy as np
import pytest

from geoworld.optim import AdamW, clip_by_global_norm, global_norm
from geoworld.tensor import Tensor


def test_global_norm():
    assert global_norm({"a": np.array([3.0]), "b": np.array([[4.0]])}) == 5.0


def test_clip_scales_to_max():
    g, n = clip_by_global_norm({"a": np.array([3.0, 4.0])}, 1.0)
    assert n == 5.0
    np.testing.assert_allclose(g["a"], [0.6, 0.8], atol=1e-15)


def test_clip_noop_below_max():
    src = {"a": np.array([0.3, 0.4])}
    g, n = clip_by_global_norm(src, 1.0)
    assert g["a"] is src["a"] and n == 0.5


def test_adamw_first_step_hand_value():
    p = Tensor(np.array([1.0, -2.0]), True, "p")
    opt = AdamW({"p": p}, lr=0.1, weight_decay=0.01)
    opt.step({"p": np.array([0.5, -0.25])})
    # bias-corrected first step moves each coordinate by lr * sign(g)
    expect = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * np.array([0.5, -0.25]) / (
        np.abs([0.5, -0.25]) + 1e-8)
    np.testing.assert_allclose(p.data, expect, rtol=0, atol=1e-15)
    assert not p.data.flags.writeable


def test_adamw_two_steps_against_reference():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=5)
    g1, g2 = rng.normal(size=5), rng.normal(size=5)
    p = Tensor(x0, True, "p")
    opt = AdamW({"p": p}, lr=1e-3, weight_decay=0.01)
    opt.step({"p": g1})
    opt.step({"p": g2})
    x, m, v = x0.copy(), np.zeros(5), np.zeros(5)
    for t, g in enumerate((g1, g2), start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh, vh = m / (1 - 0.9 ** t), v / (1 - 0.999 ** t)
        x = x * (1 - 1e-5) - 1e-3 * mh / (np.sqrt(vh) + 1e-8)
    np.testing.assert_allclose(p.data, x, rtol=0, atol=1e-15)


def test_missing_grad_decays():
    p = Tensor(np.array([2.0]), True, "p")
    opt = AdamW({"p": p}, lr=0.5, weight_decay=0.1)
    opt.step({})
    assert p.data[0] == 2.0 * (1 - 0.05)


def test_rejects_frozen_and_unknown():
    with pytest.raises(ValueError, match="frozen"):
        AdamW({"f": Tensor(np.zeros(2))})
    opt = AdamW({"p": Tensor(np.zeros(2), True)})
    with pytest.raises(KeyError):
        opt.step({"q": np.zeros(2)})


def test_minimizes_quadratic():
    p = Tensor(np.array([3.0, -1.0]), True, "p")
    opt = AdamW({"p": p}, lr=0.05, weight_decay=0.0)
    for _ in range(500):
        opt.step({"p": 2 * p.data})
    assert math.hypot(*p.data) < 1e-2
