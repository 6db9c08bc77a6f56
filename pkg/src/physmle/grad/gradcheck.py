"""Central-difference gradient checking."""
from __future__ import annotations

import numpy as np

from .tensor import backward, no_grad, precision


def check_gradients(f, params, h=1e-3, n_coords=16, seed=0, analytic_dtype=np.float32):
    """Largest relative error between analytic and central-difference gradients.

    ``f`` is a zero-argument callable returning a scalar Tensor; it must be
    deterministic (reseed any randomness inside it). Analytic gradients come
    from one backward pass in ``analytic_dtype`` (float64 isolates formula
    errors from float32 rounding in deep graphs). The finite differences are
    the oracle and are evaluated in float64 so step roundoff does not swamp
    the comparison.
    Up to ``n_coords`` coordinates per parameter are sampled. Any non-finite
    value makes the check fail (returns ``inf``).
    """
    params = list(params)
    originals = [p.data for p in params]
    for p in params:
        p.grad = None
        p.data = p.data.astype(analytic_dtype)
    try:
        with precision(analytic_dtype):
            loss = f()
            if not np.all(np.isfinite(loss.data)):
                return float("inf")
            backward(loss)
    finally:
        for p, orig in zip(params, originals):
            p.data = orig
    rng = np.random.default_rng(seed)
    worst = 0.0
    try:
        for p, orig in zip(params, originals):
            analytic = p.grad if p.grad is not None else np.zeros_like(orig)
            if not np.all(np.isfinite(analytic)):
                return float("inf")
            flat = orig.reshape(-1)
            k = min(n_coords, flat.size)
            coords = rng.choice(flat.size, size=k, replace=False)
            base = orig.astype(np.float64)
            for c in coords:
                vals = []
                for step in (h, -h):
                    pert = base.copy().reshape(-1)
                    pert[c] += step
                    p.data = pert.reshape(orig.shape)
                    with precision(np.float64), no_grad():
                        vals.append(float(np.asarray(f().data).reshape(-1)[0]))
                    p.data = base
                numeric = (vals[0] - vals[1]) / (2 * h)
                a = float(analytic.reshape(-1)[c])
                if not (np.isfinite(numeric) and np.isfinite(a)):
                    return float("inf")
                err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-8)
                worst = max(worst, err)
            p.data = orig
    finally:
        for p, orig in zip(params, originals):
            p.data = orig
    return worst
