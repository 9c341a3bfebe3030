"""Numpy backend of the forward-only routing kernel (see ``kernels``)."""

from __future__ import annotations

import numpy as np

PCC_EPS = 1e-12


def _standardize(x):
    centered = x - x.mean(axis=-1, keepdims=True)
    return centered, np.sqrt((centered * centered).mean(axis=-1))


def _rho(Uc, su, z):
    zc, sz = _standardize(z)
    cov = zc @ Uc.T / Uc.shape[1]
    denom = sz[:, None] * su[None, :]
    ok = denom > PCC_EPS
    return np.tanh(np.where(ok, cov / np.where(ok, denom, 1.0), 0.0))


def route_forward(context, I, present, W_u, W_m, W_v, W_f, b_f, n_itr, trace=None):
    """Route one instance whose rows are already in canonical order.

    ``present`` is a float 0/1 vector over rows.  Trace arrays are indexed
    ``[j, i]`` in the given row order.
    """
    n_v = W_u.shape[0]
    Uc, su = _standardize(I)
    m = np.tile(context, (n_v, 1))
    rho = _rho(Uc, su, m @ W_m.T)
    b = np.zeros((n_v, I.shape[0]))
    for _ in range(n_itr):
        shifted = np.exp(b - b.max(axis=0, keepdims=True))
        c = shifted / shifted.sum(axis=0, keepdims=True)
        pooled = ((c + rho) * present) @ I
        v = np.einsum("jkl,jl->jk", W_u, pooled)
        m = m * (v @ W_v.T)
        rho = _rho(Uc, su, m @ W_m.T)
        probe = np.einsum("jkl,jk->jl", W_u, v)
        b = b + rho * (probe @ I.T)
        if trace is not None:
            trace.append({"b": b.copy(), "c": c, "rho": rho.copy(),
                          "v_norm": np.sqrt((v * v).sum(axis=1)), "m_norm": np.sqrt((m * m).sum(axis=1))})
    return W_f @ m.reshape(-1) + b_f
