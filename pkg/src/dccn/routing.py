"""Context-guided dynamic routing between visual and multimodal capsules.

Shapes, batched form (single-instance calls add and drop the leading axes):

    context   [B, T, d_w]      source-side context vector per target step
    I         [B, N_u, d_c]    visual feature rows = low-level capsules
    mask      [B, N_u]         true for rows that exist (padding excluded)
    b, c, rho [B, T, N_v, N_u]
    m         [B, T, N_v, d_w]

Every target step routes independently.  Because one ``W_u[j]`` serves all
low-level capsules, ``u_hat`` is never materialized: a weighted sum of
predictions equals ``W_u[j]`` applied to the weighted sum of rows, and an
agreement ``u_hat[j, i] . v_j`` equals ``u_i . (W_u[j]^T v_j)``.  This moves
the d_c x d_c products from N_u rows to T rows.  Before any
reduction over low-level capsules the rows of ``I`` are put in a canonical
(lexicographic) order, so permuting the rows gives a bit-identical result.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError, NumericError
from .nn import Module, init_rng
from .rng import glorot_uniform

PCC_EPS = 1e-12
RHO_BOUND = float(np.tanh(1.0))


class DCCN(Module):
    """Parameters of one dynamic context-guided capsule network.

    ``W_u[j]`` transforms every low-level capsule into its prediction for
    high-level capsule ``j``; the same matrix serves all low-level capsules.
    The buffer ``v_scale`` is an untrained multiplier on ``W_v`` set by
    data-dependent calibration; the effective map is ``v_scale * W_v``.
    Calls made with gradients enabled record ``last_stats`` (root mean
    square of the final ``m`` and of the context) for that calibration.
    """

    def __init__(self, d_model, d_caps, n_v, n_itr, seed, name):
        super().__init__()
        if n_v < 1 or n_itr < 1:
            raise ConfigError("n_v and n_itr must be >= 1")
        self.d_model, self.d_caps, self.n_v, self.n_itr = d_model, d_caps, n_v, n_itr
        rng = init_rng(seed, name)
        self.W_u = self.add_param("W_u", glorot_uniform(rng, (n_v, d_caps, d_caps), d_caps, d_caps))
        self.W_m = self.add_param("W_m", glorot_uniform(rng, (d_caps, d_model), d_model, d_caps))
        self.W_v = self.add_param("W_v", glorot_uniform(rng, (d_model, d_caps), d_caps, d_model))
        self.W_f = self.add_param("W_f", glorot_uniform(rng, (d_model, n_v * d_model), n_v * d_model, d_model))
        self.b_f = self.add_param("b_f", np.zeros(d_model))
        self.v_scale = self.add_buffer("v_scale", np.ones(1))
        self.last_stats = None

    @property
    def effective_W_v(self):
        return self.W_v.data * self.v_scale[0]

    def __call__(self, context, I, mask=None, trace=None, n_itr=None):
        stats = {} if T.grad_enabled() else None
        out = route(context, I, self, mask=mask, n_itr=n_itr, trace=trace, stats=stats)
        if stats is not None:
            self.last_stats = stats
        return out

    def rescale(self, stats=None):
        """Multiply ``v_scale`` so the final ``m`` of ``stats`` (default: the
        last training call) would have had the context's root mean square.
        Returns the factor, or None when there is nothing to correct."""
        stats = self.last_stats if stats is None else stats
        if not stats or not stats["m_rms"] > 0 or not np.isfinite(stats["m_rms"]):
            return None
        factor = (stats["context_rms"] / stats["m_rms"]) ** (1.0 / stats["n_itr"])
        self.v_scale[0] *= factor
        return factor


def _promote(context, I, mask):
    I = T.as_tensor(I)
    single = I.ndim == 2
    if single:
        I = T.reshape(I, (1,) + I.shape)
        if context is not None:
            context = T.reshape(T.as_tensor(context), (1, 1, -1))
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)[None, :]
    elif context is not None:
        context = T.as_tensor(context)
        if context.ndim == 2:
            context = T.reshape(context, (context.shape[0], 1, context.shape[1]))
    return context, I, mask, single


_LEAD_KEYS = 4


def _row_order(rows, present):
    """Lexicographic row order with absent rows last.

    Sorting on a few leading columns settles almost every instance; the full
    key is used only when two different rows tie on them.
    """
    absent = None if present is None else ~present
    for n_keys in (min(_LEAD_KEYS, rows.shape[1]), rows.shape[1]):
        keys = [rows[:, k] for k in range(n_keys - 1, -1, -1)]
        if absent is not None:
            keys.append(absent)
        order = np.lexsort(keys) if keys else np.arange(rows.shape[0])
        s = rows[order]
        tied = np.all(s[1:, :n_keys] == s[:-1, :n_keys], axis=1)
        if absent is not None:
            tied &= absent[order][1:] == absent[order][:-1]
        if not np.any(tied & np.any(s[1:] != s[:-1], axis=1)):
            return order
    return order


def canonical_order(I, mask=None):
    """Per-batch row permutation sorting present rows first, then lexicographically."""
    data = I.data
    order = np.empty(data.shape[:2], dtype=np.int64)
    for bi in range(data.shape[0]):
        order[bi] = _row_order(data[bi], None if mask is None else mask[bi])
    return order


def _reorder(I, mask):
    order = canonical_order(I, mask)
    if np.array_equal(order, np.broadcast_to(np.arange(order.shape[1]), order.shape)):
        return I, mask, order
    rows = np.arange(order.shape[0])[:, None]
    I = T.getitem(I, (rows, order))
    if mask is not None:
        mask = mask[rows, order]
    return I, mask, order


def _per_capsule(x, W):
    """y[b, j, t] = x[b, j, t] @ W[j] for x [B, N_v, T, d] and W [N_v, d, e]."""
    B, n_v, n_t, d = x.shape
    if n_v == 1:
        y = T.reshape(x, (B * n_t, d)) @ T.reshape(W, W.shape[1:])
        return T.reshape(y, (B, 1, n_t, -1))
    y = T.transpose(x, (1, 0, 2, 3))
    y = T.reshape(y, (n_v, B * n_t, d)) @ W
    return T.transpose(T.reshape(y, (n_v, B, n_t, -1)), (1, 0, 2, 3))


def _standardize_rows(x):
    centered = x - T.mean(x, axis=-1, keepdims=True)
    return centered, T.sqrt(T.mean(centered * centered, axis=-1))


def _guarded_ratio(num, denom):
    ok = denom.data > PCC_EPS
    return T.where(ok, num / T.where(ok, denom, 1.0), 0.0)


def pcc(u, w):
    """Population Pearson correlation of two vectors; 0 if either is constant."""
    u, w = T.as_tensor(u), T.as_tensor(w)
    uc, su = _standardize_rows(u)
    wc, sw = _standardize_rows(w)
    cov = T.mean(uc * wc, axis=-1)
    return _guarded_ratio(cov, su * sw)


class _Correlator:
    """rho = tanh(PCC(u_i, W_m m_j)) for all (t, j, i) at once."""

    def __init__(self, I, W_m):
        self.Uc, self.su = _standardize_rows(I)
        self.UcT = T.transpose(self.Uc, (0, 2, 1))
        self.W_mT = T.transpose(W_m)
        self.d_c = I.shape[-1]

    def __call__(self, m):
        B, n_t, n_v, _ = m.shape
        zc, sz = _standardize_rows(m @ self.W_mT)
        cov = T.scale(T.reshape(zc, (B, n_t * n_v, self.d_c)) @ self.UcT, 1.0 / self.d_c)
        cov = T.reshape(cov, (B, n_t, n_v, -1))
        denom = T.reshape(sz, (B, n_t, n_v, 1)) * T.reshape(self.su, (B, 1, 1, -1))
        return T.tanh(_guarded_ratio(cov, denom))


def _v_map(params):
    """``W_v^T`` with the calibration multiplier applied (absent on plain holders)."""
    W_vT = T.transpose(params.W_v)
    scale = getattr(params, "v_scale", None)
    return W_vT if scale is None or scale[0] == 1.0 else T.scale(W_vT, float(scale[0]))


def _check_finite(name, x, iteration):
    if not np.all(np.isfinite(x.data)):
        raise NumericError(f"non-finite {name} in routing iteration {iteration}", iteration=iteration, name=name)


def _unsort(x, order):
    """Map the last axis (low-level capsule index) back to input order."""
    inverse = np.argsort(order, axis=1)
    return np.take_along_axis(x, inverse[:, None, None, :], axis=-1)


def route(context, I, params, mask=None, n_itr=None, trace=None, stats=None):
    """Run context-guided dynamic routing and return the fused context vector.

    ``trace``, when a list, receives one dict per iteration with ``b``,
    ``c``, ``rho`` (indexed in input row order), ``v_norm``, ``m_norm`` and
    ``m_rms``, the root mean square of ``m`` over the whole batch.
    ``stats``, when a dict, receives ``m_rms`` of the final ``m``,
    ``context_rms`` and ``n_itr``.
    """
    n_itr = params.n_itr if n_itr is None else n_itr
    context, I, mask, single = _promote(context, I, mask)
    if not np.all(np.isfinite(context.data)):
        raise InputError("routing context contains non-finite values")
    d_caps = getattr(params, "d_caps", I.shape[-1])
    if I.shape[-1] != d_caps:
        raise InputError(f"visual rows have width {I.shape[-1]} but the capsule width is {d_caps}")
    I, mask, order = _reorder(I, mask)
    B, n_u, _ = I.shape
    n_t, d_w = context.shape[1], context.shape[2]
    n_v = params.n_v

    I_t = T.transpose(I, (0, 2, 1))
    W_uT = T.transpose(params.W_u, (0, 2, 1))
    correlate = _Correlator(I, params.W_m)
    present = None if mask is None else mask.astype(np.float64)[:, None, None, :]
    W_vT = _v_map(params)

    m = T.stack([context] * n_v, axis=2)
    rho = correlate(m)
    b = T.Tensor(np.zeros((B, n_t, n_v, n_u)))
    for it in range(1, n_itr + 1):
        c = T.softmax(b, axis=2)
        weights = c + rho
        if present is not None:
            weights = weights * present
        weights = T.reshape(T.transpose(weights, (0, 2, 1, 3)), (B, n_v * n_t, n_u))
        pooled = T.reshape(weights @ I, (B, n_v, n_t, -1))
        v = _per_capsule(pooled, W_uT)                            # [B, N_v, T, d_c]
        m = m * (T.transpose(v, (0, 2, 1, 3)) @ W_vT)
        _check_finite("high-level capsules", v, it)
        _check_finite("multimodal context capsules", m, it)
        rho = correlate(m)
        probe = T.reshape(_per_capsule(v, params.W_u), (B, n_v * n_t, -1))
        agreement = T.transpose(T.reshape(probe @ I_t, (B, n_v, n_t, n_u)), (0, 2, 1, 3))
        b = b + rho * agreement
        _check_finite("routing logits", b, it)
        if trace is not None:
            trace.append({
                "b": _unsort(b.data, order),
                "c": _unsort(c.data, order),
                "rho": _unsort(rho.data, order),
                "v_norm": np.linalg.norm(v.data, axis=-1).transpose(0, 2, 1),
                "m_norm": np.linalg.norm(m.data, axis=-1),
                "m_rms": float(np.sqrt(np.mean(m.data ** 2))),
            })

    if stats is not None:
        stats.update(m_rms=float(np.sqrt(np.mean(m.data ** 2))),
                     context_rms=float(np.sqrt(np.mean(context.data ** 2))), n_itr=n_itr)
    fused = T.reshape(m, (B, n_t, n_v * d_w)) @ T.transpose(params.W_f) + params.b_f
    return T.reshape(fused, (d_w,)) if single else fused


def squash(s, axis=-1):
    """(|s|^2 / (1 + |s|^2)) * s / |s|, written as s * |s| / (1 + |s|^2)."""
    sq = T.sum_(s * s, axis=axis, keepdims=True)
    return s * (T.sqrt(sq) / (sq + 1.0))


def route_conventional(I, params, mask=None, n_itr=None, trace=None):
    """Routing-by-agreement with squashing and no context guidance.

    Returns ``[B, d_w]`` (or ``[d_w]`` for one instance): the fusion map
    applied to ``W_v v_j``.
    """
    n_itr = params.n_itr if n_itr is None else n_itr
    _, I, mask, single = _promote(None, I, mask)
    I, mask, order = _reorder(I, mask)
    B, n_u, _ = I.shape
    n_v, d_w = params.n_v, params.d_model
    I_t = T.transpose(I, (0, 2, 1))
    W_uT = T.transpose(params.W_u, (0, 2, 1))
    present = None if mask is None else mask.astype(np.float64)[:, None, :]

    b = T.Tensor(np.zeros((B, n_v, n_u)))
    for it in range(1, n_itr + 1):
        c = T.softmax(b, axis=1)
        weights = c if present is None else c * present
        s = _per_capsule(T.reshape(weights @ I, (B, n_v, 1, -1)), W_uT)   # [B, N_v, 1, d_c]
        v = squash(s)
        _check_finite("high-level capsules", v, it)
        probe = T.reshape(_per_capsule(v, params.W_u), (B, n_v, -1))
        b = b + probe @ I_t
        if trace is not None:
            trace.append({
                "b": _unsort(b.data[:, None], order),
                "c": _unsort(c.data[:, None], order),
                "v_norm": np.linalg.norm(v.data, axis=-1).reshape(B, 1, n_v),
            })

    mapped = T.reshape(T.reshape(v, (B, n_v, -1)) @ _v_map(params), (B, n_v * d_w))
    fused = mapped @ T.transpose(params.W_f) + params.b_f
    return T.reshape(fused, (d_w,)) if single else fused


class VisualAttention(Module):
    """Single-head dot-product attention over feature rows, query = context.

    Stands in for a routing network in the attention-substitution variants.
    """

    def __init__(self, d_model, d_caps, seed, name):
        super().__init__()
        rng = init_rng(seed, name)
        self.d_model = d_model
        self.WQ = self.add_param("WQ", glorot_uniform(rng, (d_model, d_model), d_model, d_model))
        self.WK = self.add_param("WK", glorot_uniform(rng, (d_caps, d_model), d_caps, d_model))
        self.WV = self.add_param("WV", glorot_uniform(rng, (d_caps, d_model), d_caps, d_model))

    def __call__(self, context, I, mask=None, trace=None):
        context, I, mask, single = _promote(context, I, mask)
        q = context @ self.WQ
        k = I @ self.WK
        v = I @ self.WV
        scores = T.scale(q @ T.transpose(k, (0, 2, 1)), 1.0 / np.sqrt(self.d_model))
        if mask is not None:
            # a large finite fill keeps fully padded inputs finite: the weights
            # become uniform over all-zero rows and the output is zero
            scores = T.masked_fill(scores, ~mask[:, None, :], -1e30)
        out = T.softmax(scores, axis=-1) @ v
        return T.reshape(out, (self.d_model,)) if single else out
