"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor


def numeric_grad(fn, tensors, step=1e-4):
    """Central differences of scalar ``fn()`` w.r.t. each tensor's data."""
    out = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(fn().data)
            flat[i] = orig - step
            down = float(fn().data)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        out.append(g)
    return out


def relative_error(analytic, numeric, floor=1e-7):
    """||a - n|| / max(||a||, ||n||, floor).

    The floor keeps identically-zero gradients (e.g. an attention key bias,
    which softmax cancels) from turning round-off into a relative error of 1.
    """
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


def check_grad(fn, tensors, step=1e-4):
    """Compare autodiff against central differences.

    ``fn`` must rebuild the graph from ``tensors`` on every call and return a
    scalar Tensor. Returns one relative error per tensor.
    """
    for t in tensors:
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    numeric = numeric_grad(fn, tensors, step)
    return [relative_error(a, n) for a, n in zip(analytic, numeric)]


def random_tensor(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)
