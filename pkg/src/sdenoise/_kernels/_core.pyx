# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled implementations of the hot per-step kernels.

Same call surface as ``_numpy``. Matrix products go through BLAS (via
scipy's cython_blas), elementwise work is fused into single C loops, so a
full MLP forward or vjp is one Python call instead of one per array op.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

ACT_TANH = 0
ACT_SILU = 1

cdef extern from "math.h" nogil:
    double tanh(double)


# Row-major GEMM wrappers. A row-major (r, c) array occupies the same
# memory as its Fortran-order transpose, so each product is issued as the
# transposed Fortran problem.

cdef void _gemm_nt(double[:, ::1] a, double[:, ::1] b, double[:, ::1] c) noexcept nogil:
    # c (M,N) = a (M,K) @ b (N,K)^T
    cdef int m = a.shape[0], k = a.shape[1], n = b.shape[0]
    cdef double one = 1.0, zero = 0.0
    dgemm("T", "N", &n, &m, &k, &one, &b[0, 0], &k, &a[0, 0], &k, &zero, &c[0, 0], &n)


cdef void _gemm_nn(double[:, ::1] a, double[:, ::1] b, double[:, ::1] c) noexcept nogil:
    # c (M,N) = a (M,K) @ b (K,N)
    cdef int m = a.shape[0], k = a.shape[1], n = b.shape[1]
    cdef double one = 1.0, zero = 0.0
    dgemm("N", "N", &n, &m, &k, &one, &b[0, 0], &n, &a[0, 0], &k, &zero, &c[0, 0], &n)


cdef void _gemm_tn(double[:, ::1] a, double[:, ::1] b, double[:, ::1] c) noexcept nogil:
    # c (M,N) = a (K,M)^T @ b (K,N)
    cdef int k = a.shape[0], m = a.shape[1], n = b.shape[1]
    cdef double one = 1.0, zero = 0.0
    dgemm("N", "T", &n, &m, &k, &one, &b[0, 0], &n, &a[0, 0], &m, &zero, &c[0, 0], &n)


cdef void _bias_act(double[:, ::1] z, double[:] b, double[:, ::1] h, int act) noexcept nogil:
    # h = act(z + b); z is the raw GEMM output, updated in place to z + b
    cdef Py_ssize_t i, j
    cdef double v, s
    for i in range(z.shape[0]):
        for j in range(z.shape[1]):
            v = z[i, j] + b[j]
            z[i, j] = v
            if act == 0:
                h[i, j] = tanh(v)
            else:
                s = 1.0 / (1.0 + exp(-v))
                h[i, j] = v * s


cdef void _bias_only(double[:, ::1] z, double[:] b) noexcept nogil:
    cdef Py_ssize_t i, j
    for i in range(z.shape[0]):
        for j in range(z.shape[1]):
            z[i, j] = z[i, j] + b[j]


cdef void _scale_by_dact(double[:, ::1] d, double[:, ::1] z, double[:, ::1] h, int act) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double s
    for i in range(d.shape[0]):
        for j in range(d.shape[1]):
            if act == 0:
                d[i, j] = d[i, j] * (1.0 - h[i, j] * h[i, j])
            else:
                s = 1.0 / (1.0 + exp(-z[i, j]))
                d[i, j] = d[i, j] * (s * (1.0 + z[i, j] * (1.0 - s)))


def mlp_forward(x, weights, biases, int act):
    """Forward pass; returns (out, hs, zs) exactly like the numpy backend."""
    h = x
    hs = [h]
    zs = []
    n_layers = len(weights)
    for l in range(n_layers - 1):
        z = np.empty((h.shape[0], weights[l].shape[0]))
        _gemm_nt(h, weights[l], z)
        hn = np.empty_like(z)
        _bias_act(z, biases[l], hn, act)
        zs.append(z)
        hs.append(hn)
        h = hn
    out = np.empty((h.shape[0], weights[n_layers - 1].shape[0]))
    _gemm_nt(h, weights[n_layers - 1], out)
    _bias_only(out, biases[n_layers - 1])
    return out, hs, zs


def mlp_input_vjp(v, weights, hs, zs, int act):
    """Rows of v^T (d out / d input)."""
    n_layers = len(weights)
    d = np.empty((v.shape[0], weights[n_layers - 1].shape[1]))
    _gemm_nn(v, weights[n_layers - 1], d)
    for l in range(n_layers - 2, -1, -1):
        _scale_by_dact(d, zs[l], hs[l + 1], act)
        dn = np.empty((d.shape[0], weights[l].shape[1]))
        _gemm_nn(d, weights[l], dn)
        d = dn
    return d


def mlp_param_grads(dout, weights, hs, zs, int act):
    """Per-parameter gradients given d loss / d out."""
    n_layers = len(weights)
    dws = [None] * n_layers
    dbs = [None] * n_layers
    g = dout
    dw = np.empty_like(weights[n_layers - 1])
    _gemm_tn(g, hs[n_layers - 1], dw)
    dws[n_layers - 1] = dw
    dbs[n_layers - 1] = np.asarray(g).sum(axis=0)
    d = np.empty((g.shape[0], weights[n_layers - 1].shape[1]))
    _gemm_nn(g, weights[n_layers - 1], d)
    for l in range(n_layers - 2, -1, -1):
        _scale_by_dact(d, zs[l], hs[l + 1], act)
        g = d
        dw = np.empty_like(weights[l])
        _gemm_tn(g, hs[l], dw)
        dws[l] = dw
        dbs[l] = np.asarray(g).sum(axis=0)
        if l > 0:
            dn = np.empty((g.shape[0], weights[l].shape[1]))
            _gemm_nn(g, weights[l], dn)
            d = dn
    return dws, dbs


def em_update(double[:, ::1] state, double[:, ::1] score, double[:, ::1] z,
              double f_coeff, double g_coeff, double dt, double noise_scale):
    """state - f*state*dt + g^2*score*dt + noise_scale*z, fused."""
    out = np.empty((state.shape[0], state.shape[1]))
    cdef double[:, ::1] o = out
    cdef double fdt = f_coeff * dt
    cdef double g2dt = g_coeff * g_coeff * dt
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(o.shape[0]):
            for j in range(o.shape[1]):
                o[i, j] = state[i, j] - fdt * state[i, j] + g2dt * score[i, j] \
                    + noise_scale * z[i, j]
    return out


def tweedie_combine(double[:, ::1] x, double[:, ::1] score, double beta2, double alpha):
    """(x + beta^2 * score) / alpha, fused."""
    out = np.empty((x.shape[0], x.shape[1]))
    cdef double[:, ::1] o = out
    cdef double inv_alpha = 1.0 / alpha
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(o.shape[0]):
            for j in range(o.shape[1]):
                o[i, j] = (x[i, j] + beta2 * score[i, j]) * inv_alpha
    return out


def diag_gaussian_score(double[:, ::1] x, double[:] mean, double[:] inv_var):
    """-(x - mean) * inv_var with mean/inv_var broadcast over rows."""
    out = np.empty((x.shape[0], x.shape[1]))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(o.shape[0]):
            for j in range(o.shape[1]):
                o[i, j] = (mean[j] - x[i, j]) * inv_var[j]
    return out
