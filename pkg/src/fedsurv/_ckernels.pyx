# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled training kernels: fused loops beat numpy call overhead on the
small matrices this package trains on (batches of ~64, widths of ~32).

Contract mirrors fedsurv._pykernels exactly.
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


cdef void _dense_forward(double[:, ::1] h, double[:] params, Py_ssize_t off,
                         Py_ssize_t nin, Py_ssize_t nout,
                         double[:, ::1] out, bint relu) noexcept nogil:
    cdef Py_ssize_t r, c, k
    cdef double acc
    cdef Py_ssize_t rows = h.shape[0]
    cdef Py_ssize_t boff = off + nin * nout
    for r in range(rows):
        for c in range(nout):
            acc = params[boff + c]
            for k in range(nin):
                acc += h[r, k] * params[off + k * nout + c]
            if relu and acc < 0.0:
                acc = 0.0
            out[r, c] = acc


def mlp_forward(sizes, double[:] params, double[:, ::1] x):
    out, _ = _forward_impl(sizes, params, x, False)
    return out


def mlp_forward_cached(sizes, double[:] params, double[:, ::1] x):
    return _forward_impl(sizes, params, x, True)


cdef _forward_impl(sizes, double[:] params, double[:, ::1] x, bint keep):
    cdef Py_ssize_t n_layers = len(sizes) - 1
    cdef Py_ssize_t off = 0, layer, nin, nout
    cdef Py_ssize_t rows = x.shape[0]
    hidden = []
    cdef double[:, ::1] h = x
    cdef double[:, ::1] nxt
    for layer in range(n_layers):
        nin = sizes[layer]
        nout = sizes[layer + 1]
        nxt_arr = np.empty((rows, nout))
        nxt = nxt_arr
        _dense_forward(h, params, off, nin, nout, nxt, layer < n_layers - 1)
        off += nin * nout + nout
        h = nxt
        if keep and layer < n_layers - 1:
            hidden.append(nxt_arr)
    return np.asarray(h), hidden


def mlp_backward(sizes, double[:] params, double[:, ::1] x, hidden,
                 double[:, ::1] dout):
    cdef Py_ssize_t n_layers = len(sizes) - 1
    cdef Py_ssize_t total = 0, layer
    offsets = []
    for layer in range(n_layers):
        offsets.append(total)
        total += sizes[layer] * sizes[layer + 1] + sizes[layer + 1]
    grad_arr = np.zeros(total)
    cdef double[:] grad = grad_arr
    cdef double[:, ::1] d = dout
    cdef double[:, ::1] h_in, dprev
    cdef Py_ssize_t off, nin, nout, r, c, k
    cdef Py_ssize_t rows = x.shape[0]
    cdef double dv, acc
    for layer in range(n_layers - 1, -1, -1):
        off = offsets[layer]
        nin = sizes[layer]
        nout = sizes[layer + 1]
        h_in = x if layer == 0 else hidden[layer - 1]
        with nogil:
            for r in range(rows):
                for c in range(nout):
                    dv = d[r, c]
                    if dv != 0.0:
                        for k in range(nin):
                            grad[off + k * nout + c] += h_in[r, k] * dv
                        grad[off + nin * nout + c] += dv
        if layer > 0:
            dprev_arr = np.empty((rows, nin))
            dprev = dprev_arr
            with nogil:
                for r in range(rows):
                    for k in range(nin):
                        if h_in[r, k] > 0.0:
                            acc = 0.0
                            for c in range(nout):
                                acc += d[r, c] * params[off + k * nout + c]
                            dprev[r, k] = acc
                        else:
                            dprev[r, k] = 0.0
            d = dprev
    return grad_arr


def adam_update(double[:] params, double[:] grad, double[:] m, double[:] v,
                long t, double lr, double beta1, double beta2, double eps):
    cdef Py_ssize_t n = params.shape[0]
    p2_arr = np.empty(n)
    m2_arr = np.empty(n)
    v2_arr = np.empty(n)
    cdef double[:] p2 = p2_arr
    cdef double[:] m2 = m2_arr
    cdef double[:] v2 = v2_arr
    cdef double bc1 = 1.0 - beta1 ** t
    cdef double bc2 = 1.0 - beta2 ** t
    cdef Py_ssize_t i
    cdef double g, mi, vi
    with nogil:
        for i in range(n):
            g = grad[i]
            mi = beta1 * m[i] + (1.0 - beta1) * g
            vi = beta2 * v[i] + (1.0 - beta2) * g * g
            m2[i] = mi
            v2[i] = vi
            p2[i] = params[i] - lr * (mi / bc1) / (sqrt(vi / bc2) + eps)
    return p2_arr, m2_arr, v2_arr
