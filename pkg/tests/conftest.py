"""Shared helpers for the test suite."""

import numpy as np

from rainquant.qunet import QuantileUNet, pinball_loss, pinball_grad
from rainquant.swath import QUANTILE_LEVELS


def sample_from_quantiles(q, rng, u=None):
    """Draw one value per pixel from its quantile-sampled CDF by inverse
    transform: linear interpolation of values between the shared levels,
    clamped to the first/last quantile outside [0.01, 0.99].

    ``q`` is (99, n_pixels) with monotone columns.
    """
    n_levels, n_pix = q.shape
    levels = QUANTILE_LEVELS
    if u is None:
        u = rng.random(n_pix)
    idx = np.searchsorted(levels, u, side="left")
    out = np.empty(n_pix, dtype=np.float64)
    cols = np.arange(n_pix)
    low = idx == 0
    high = idx == n_levels
    out[low] = q[0, cols[low]]
    out[high] = q[-1, cols[high]]
    mid = ~(low | high)
    i = idx[mid]
    c = cols[mid]
    l_lo, l_hi = levels[i - 1], levels[i]
    v_lo, v_hi = q[i - 1, c], q[i, c]
    frac = (u[mid] - l_lo) / (l_hi - l_lo)
    out[mid] = v_lo + (v_hi - v_lo) * frac
    return out


def randomize_biases(model, rng):
    """Move biases off zero so no preactivation sits exactly on a relu kink
    (the generic-position requirement for finite-difference checks)."""
    for name, arr in model.params():
        if name.endswith(".b"):
            arr += rng.uniform(0.01, 0.05, arr.shape) * rng.choice([-1.0, 1.0], arr.shape)


def margin_safe_targets(model, x, rng, lo=0.1, hi=0.5):
    """Targets at least ``lo`` away from every predicted quantile, half the
    pixels above all planes and half below, so no pixel is near a pinball
    kink."""
    y0 = model.forward(x)
    coin = rng.random(y0.shape[:-1]) < 0.5
    delta = rng.uniform(lo, hi, y0.shape[:-1])
    return np.where(coin, y0.max(axis=-1) + delta, y0.min(axis=-1) - delta)


def end_to_end_gradcheck(model: QuantileUNet, x, target, rng, n_coords=100, h=1e-6):
    """Max relative error between analytic and central-FD gradients of
    loss(forward(x)) over ``n_coords`` random parameter coordinates.

    The relative error uses a 1e-8 floor: the loss is O(10), so central
    differences carry ~1e-9 absolute noise and smaller gradients cannot be
    resolved relatively.
    """
    y = model.forward(x, keep=True)
    model.backward(pinball_grad(y, target))
    params, grads = model.params(), model.grads()
    worst = 0.0
    for _ in range(n_coords):
        pi = int(rng.integers(0, len(params)))
        _, arr = params[pi]
        flat = int(rng.integers(0, arr.size))
        orig = arr.flat[flat]
        arr.flat[flat] = orig + h
        lp = pinball_loss(model.forward(x), target)
        arr.flat[flat] = orig - h
        lm = pinball_loss(model.forward(x), target)
        arr.flat[flat] = orig
        fd = (lp - lm) / (2.0 * h)
        an = grads[pi][1].flat[flat]
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
        worst = max(worst, rel)
    return worst
