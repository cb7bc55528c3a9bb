"""Central finite-difference gradient oracle shared by the test modules."""

import numpy as np

from patchmi import autodiff as ad


def numeric_grad(fn, x, step=1e-5):
    """Central differences of the scalar ``fn(x)`` w.r.t. the array ``x``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(x)
        flat[i] = orig - step
        lo = fn(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * step)
    return g


def rel_err(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_grads(build_loss, tensors, step=1e-5, tol=1e-4):
    """Assert analytic grads of ``build_loss(*tensors)`` match central
    finite differences for every tensor, at relative error < ``tol``.

    ``build_loss`` must rebuild the graph from scratch on each call so the
    finite-difference perturbations flow through a fresh forward pass.
    """
    loss = build_loss(*tensors)
    for t in tensors:
        t.grad = None
    ad.backward(loss)
    worst = 0.0
    for t in tensors:
        if not t.requires_grad:
            continue

        def scalar(arr, t=t):
            saved = t.data
            t.data = arr
            try:
                return build_loss(*tensors).item()
            finally:
                t.data = saved

        num = numeric_grad(scalar, t.data.copy(), step=step)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, rel_err(ana, num))
    assert worst < tol, f"gradient mismatch: max relative error {worst:.3e}"
    return worst
