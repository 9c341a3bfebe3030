"""Shared test utilities: finite differences and parameter conversion."""

from __future__ import annotations

import numpy as np

from dccn import tensor as T
from dccn.rng import stream


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (mutated in place, restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        up = f()
        flat[k] = old - h
        down = f()
        flat[k] = old
        gflat[k] = (up - down) / (2 * h)
    return g


def rel_error(a, b):
    """||a - b|| / max(||a||, ||b||), with a floor so exact zeros compare as 0."""
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return num / den


def grad_check(build, leaves, h=1e-5, seed=0):
    """Compare autodiff against central differences for every tensor in ``leaves``.

    ``build()`` returns a tensor; it is projected onto a fixed random
    direction so every output component contributes.  Returns a dict of
    relative errors keyed like ``leaves``.
    """
    with T.no_grad():
        shape = build().shape
    weights = stream(seed, "gradcheck").normal(size=shape)

    def scalar():
        with T.no_grad():
            return float((build().data * weights).sum())

    for t in leaves.values():
        t.requires_grad = True
        t.grad = None
    out = build()
    T.sum_(out * weights).backward()
    errors = {}
    for name, t in leaves.items():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        errors[name] = rel_error(analytic, numeric_grad(scalar, t.data, h))
    return errors


def dccn_lists(net):
    """A DCCN module's parameters as the nested lists the oracle expects."""
    return {
        "W_u": net.W_u.data.tolist(),
        "W_m": net.W_m.data.tolist(),
        "W_v": net.effective_W_v.tolist(),
        "W_f": net.W_f.data.tolist(),
        "b_f": net.b_f.data.tolist(),
    }
