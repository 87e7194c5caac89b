"""Shared test helpers: central finite differences against the tape."""

import numpy as np


def finite_diff(loss_fn, array, eps=1e-6):
    """Central finite-difference gradient of loss_fn() w.r.t. `array`.

    loss_fn must re-run the forward pass reading the current contents of
    `array` (mutated in place entry by entry).
    """
    grad = np.zeros_like(array)
    flat = array.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = loss_fn()
        flat[i] = orig - eps
        lo = loss_fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def rel_err(got, want):
    got = np.asarray(got)
    want = np.asarray(want)
    denom = max(np.abs(want).max(), 1e-12)
    return np.abs(got - want).max() / denom
