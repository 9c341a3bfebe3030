# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled backend of the forward-only routing kernel (see ``kernels``)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, tanh

cnp.import_array()

cdef double PCC_EPS = 1e-12


cdef void _rho(const double[:, ::1] Uc, const double[::1] su, double[:, ::1] z,
               double[:, ::1] rho) noexcept nogil:
    """rho[j, i] = tanh(PCC(u_i, z_j)) from pre-centred rows of I; centres z in place."""
    cdef Py_ssize_t n_v = z.shape[0], n_u = Uc.shape[0], d = Uc.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double mean, var, sz, cov, denom
    for j in range(n_v):
        mean = 0.0
        for k in range(d):
            mean += z[j, k]
        mean /= d
        var = 0.0
        for k in range(d):
            z[j, k] -= mean
            var += z[j, k] * z[j, k]
        sz = sqrt(var / d)
        for i in range(n_u):
            cov = 0.0
            for k in range(d):
                cov += z[j, k] * Uc[i, k]
            cov /= d
            denom = sz * su[i]
            rho[j, i] = tanh(cov / denom) if denom > PCC_EPS else 0.0


def route_forward(const double[::1] context, const double[:, ::1] I, const double[::1] present,
                  const double[:, :, ::1] W_u, const double[:, ::1] W_m, const double[:, ::1] W_v,
                  const double[:, ::1] W_f, const double[::1] b_f, int n_itr, trace=None):
    """Route one instance whose rows are already in canonical order."""
    cdef Py_ssize_t n_u = I.shape[0], d_c = I.shape[1], n_v = W_u.shape[0], d_w = context.shape[0]
    cdef Py_ssize_t i, j, k, l, it
    cdef double acc, mx, total, w

    Uc_arr = np.empty((n_u, d_c))
    su_arr = np.empty(n_u)
    cdef double[:, ::1] Uc = Uc_arr
    cdef double[::1] su = su_arr
    cdef double mean, var
    for i in range(n_u):
        mean = 0.0
        for k in range(d_c):
            mean += I[i, k]
        mean /= d_c
        var = 0.0
        for k in range(d_c):
            Uc[i, k] = I[i, k] - mean
            var += Uc[i, k] * Uc[i, k]
        su[i] = sqrt(var / d_c)

    m_arr = np.empty((n_v, d_w))
    z_arr = np.empty((n_v, d_c))
    rho_arr = np.empty((n_v, n_u))
    b_arr = np.zeros((n_v, n_u))
    c_arr = np.empty((n_v, n_u))
    pooled_arr = np.empty((n_v, d_c))
    v_arr = np.empty((n_v, d_c))
    probe_arr = np.empty((n_v, d_c))
    cdef double[:, ::1] m = m_arr, z = z_arr, rho = rho_arr, b = b_arr, c = c_arr
    cdef double[:, ::1] pooled = pooled_arr, v = v_arr, probe = probe_arr

    for j in range(n_v):
        for l in range(d_w):
            m[j, l] = context[l]

    with nogil:
        _project(W_m, m, z)
        _rho(Uc, su, z, rho)

    for it in range(n_itr):
        with nogil:
            # coupling coefficients: softmax over high-level capsules j
            for i in range(n_u):
                mx = b[0, i]
                for j in range(1, n_v):
                    if b[j, i] > mx:
                        mx = b[j, i]
                total = 0.0
                for j in range(n_v):
                    c[j, i] = exp(b[j, i] - mx)
                    total += c[j, i]
                for j in range(n_v):
                    c[j, i] /= total
            # v_j = W_u[j] sum_i (c_ij + rho_ij) u_i
            for j in range(n_v):
                for k in range(d_c):
                    pooled[j, k] = 0.0
                for i in range(n_u):
                    w = (c[j, i] + rho[j, i]) * present[i]
                    if w != 0.0:
                        for k in range(d_c):
                            pooled[j, k] += w * I[i, k]
                for k in range(d_c):
                    acc = 0.0
                    for l in range(d_c):
                        acc += W_u[j, k, l] * pooled[j, l]
                    v[j, k] = acc
            # m_j <- m_j * (W_v v_j)
            for j in range(n_v):
                for l in range(d_w):
                    acc = 0.0
                    for k in range(d_c):
                        acc += W_v[l, k] * v[j, k]
                    m[j, l] *= acc
            _project(W_m, m, z)
            _rho(Uc, su, z, rho)
            # b_ij += rho_ij * (u_i . W_u[j]^T v_j)
            for j in range(n_v):
                for l in range(d_c):
                    probe[j, l] = 0.0
                for k in range(d_c):
                    for l in range(d_c):
                        probe[j, l] += W_u[j, k, l] * v[j, k]
                for i in range(n_u):
                    acc = 0.0
                    for l in range(d_c):
                        acc += I[i, l] * probe[j, l]
                    b[j, i] += rho[j, i] * acc
        if trace is not None:
            trace.append({"b": b_arr.copy(), "c": c_arr.copy(), "rho": rho_arr.copy(),
                          "v_norm": np.sqrt((v_arr * v_arr).sum(axis=1)),
                          "m_norm": np.sqrt((m_arr * m_arr).sum(axis=1))})

    out = np.empty(d_w)
    cdef double[::1] o = out
    for l in range(d_w):
        acc = b_f[l]
        for j in range(n_v):
            for k in range(d_w):
                acc += W_f[l, j * d_w + k] * m[j, k]
        o[l] = acc
    return out


cdef void _project(const double[:, ::1] W_m, const double[:, ::1] m, double[:, ::1] z) noexcept nogil:
    """z_j = W_m m_j."""
    cdef Py_ssize_t j, k, l
    cdef double acc
    for j in range(m.shape[0]):
        for k in range(W_m.shape[0]):
            acc = 0.0
            for l in range(W_m.shape[1]):
                acc += W_m[k, l] * m[j, l]
            z[j, k] = acc
