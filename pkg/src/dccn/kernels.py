"""Forward-only routing for one instance, with a compiled and a numpy backend.

Inference-time tools (``dccn inspect``, benchmarks) route one sentence and
one target step at a time with no gradient bookkeeping.  The compiled
extension is used for capsule widths up to ``COMPILED_MAX_WIDTH`` when it
was built; wider capsules go to numpy, whose BLAS matrix-vector products
beat the compiled scalar loops there (see benchmarks/bench_routing.py).
``DCCN_KERNEL=python`` or ``DCCN_KERNEL=cython`` pins one backend.  Both
see rows in the same canonical order as the differentiable ``route``, so
all three agree to rounding.
"""

from __future__ import annotations

import os

import numpy as np

from . import _routing_py
from .errors import ConfigError

try:
    from . import _routing_ext
except ImportError:  # extension not built
    _routing_ext = None

BACKENDS = ("cython", "python") if _routing_ext is not None else ("python",)
DEFAULT_BACKEND = os.environ.get("DCCN_KERNEL") or "auto"
COMPILED_MAX_WIDTH = 128


def choose_backend(d_caps, backend=None):
    backend = backend or DEFAULT_BACKEND
    if backend == "auto":
        return "cython" if _routing_ext is not None and d_caps <= COMPILED_MAX_WIDTH else "python"
    return backend


def _impl(backend):
    if backend == "cython" and _routing_ext is not None:
        return _routing_ext.route_forward
    if backend == "python":
        return _routing_py.route_forward
    raise ConfigError(f"routing backend {backend!r} is not available (have {', '.join(BACKENDS)})")


def _f64(x):
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


def route_instance(context, I, params, mask=None, n_itr=None, trace=None, backend=None):
    """Route one context vector ``[d_w]`` over feature rows ``I`` ``[N_u, d_c]``.

    ``params`` is a ``DCCN`` module.  With ``trace`` a list, one dict per
    iteration is appended holding ``b``, ``c``, ``rho`` as ``[N_v, N_u]``
    arrays in input row order, plus ``v_norm`` and ``m_norm`` per capsule.
    """
    from .routing import _row_order

    I = _f64(I)
    fn = _impl(choose_backend(I.shape[-1], backend))
    present = None if mask is None else np.asarray(mask, dtype=bool)
    order = _row_order(I, present)
    weights = np.ones(I.shape[0]) if present is None else present[order].astype(np.float64)
    n_itr = params.n_itr if n_itr is None else n_itr
    raw = [] if trace is not None else None
    W_v = getattr(params, "effective_W_v", params.W_v.data)
    out = fn(_f64(context), _f64(I[order]), weights, _f64(params.W_u.data), _f64(params.W_m.data),
             _f64(W_v), _f64(params.W_f.data), _f64(params.b_f.data), int(n_itr), raw)
    if trace is not None:
        inverse = np.argsort(order)
        for rec in raw:
            trace.append({k: (v[:, inverse] if v.ndim == 2 else v) for k, v in rec.items()})
    return np.asarray(out)
