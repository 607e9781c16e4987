"""Finite-difference oracle shared by the gradient tests."""

import numpy as np

from kwm import tensor as T

FD_STEP = 1e-3
GRAD_RTOL = 1e-3


def rel_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def analytic_grads(fn, tensors, weights):
    """Gradients of ``sum(weights * fn())`` computed by the float32 tape."""
    for t in tensors:
        t.grad = None
    out = fn()
    T.backward(T.sum(T.mul(out, T.Tensor(weights))))
    return [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in tensors]


def fd_grads(fn, tensors, weights, h=FD_STEP, coords=None):
    """Central differences of ``sum(weights * fn())``.

    The forward is re-evaluated in float64 at the same (float32-representable)
    point, so the quotient is not dominated by float32 rounding. ``coords``
    optionally restricts each tensor to a list of flat indices; unchecked
    entries are returned as NaN.
    """
    w = np.asarray(weights, dtype=np.float64)
    saved = [t.data for t in tensors]
    grads = [np.full(t.shape, np.nan) for t in tensors]
    try:
        with T.precision(np.float64), T.no_grad():
            for t in tensors:
                t.data = t.data.astype(np.float64)
            for k, t in enumerate(tensors):
                flat = t.data.reshape(-1)
                idxs = range(flat.size) if coords is None else coords[k]
                for i in idxs:
                    old = flat[i]
                    flat[i] = old + h
                    fp = fn().data.copy()
                    flat[i] = old - h
                    fm = fn().data.copy()
                    flat[i] = old
                    grads[k].reshape(-1)[i] = float(((fp - fm) * w).sum() / (2 * h))
    finally:
        for t, d in zip(tensors, saved):
            t.data = d
    return grads


def check_grads(fn, tensors, rng, coords_per_tensor=None, h=FD_STEP):
    """Return the worst per-tensor relative error between tape and finite differences."""
    probe = fn()
    weights = rng.normal(size=probe.shape)
    analytic = analytic_grads(fn, tensors, weights)
    coords = None
    if coords_per_tensor is not None:
        coords = [rng.choice(t.size, size=min(t.size, coords_per_tensor), replace=False) for t in tensors]
    numeric = fd_grads(fn, tensors, weights, h=h, coords=coords)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        mask = ~np.isnan(n)
        worst = max(worst, rel_error(a[mask], n[mask]))
    return worst
