"""Finite-difference gradient oracle.

Central differences computed directly on numpy arrays, with no knowledge of
the autodiff graph. Tests build a scalar loss twice per perturbed coordinate
and compare the quotient against whatever backward() produced.
"""
import numpy as np


def fd_gradient(loss_fn, array, step=1e-3):
    """Full central-difference gradient of loss_fn() w.r.t. array.

    loss_fn takes no arguments and must re-read `array`, which is perturbed
    in place one coordinate at a time and always restored.
    """
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        up = loss_fn()
        flat[i] = saved - step
        down = loss_fn()
        flat[i] = saved
        out[i] = (up - down) / (2.0 * step)
    return grad


def fd_gradient_sample(loss_fn, array, rng, n_coords, step=1e-3):
    """Sampled variant for big arrays: returns (flat indices, fd values)."""
    flat = array.reshape(-1)
    idx = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
    vals = np.empty(idx.size)
    for j, i in enumerate(idx):
        saved = flat[i]
        flat[i] = saved + step
        up = loss_fn()
        flat[i] = saved - step
        down = loss_fn()
        flat[i] = saved
        vals[j] = (up - down) / (2.0 * step)
    return idx, vals


def relative_errors(analytic, numeric):
    """|a - n| / max(1, |n|) elementwise; the max(1, .) floor keeps tiny
    gradients from blowing up the quotient."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
