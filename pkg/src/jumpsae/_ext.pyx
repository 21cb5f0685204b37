# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled elementwise kernels; numpy twins live in ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs
from libc.stdint cimport uint32_t

cnp.import_array()

ctypedef fused real:
    float
    double


def jumprelu_forward(real[:, ::1] z, real[::1] theta):
    cdef Py_ssize_t rows = z.shape[0], cols = z.shape[1], b, i
    if theta.shape[0] != cols:
        raise ValueError("theta has %d entries, pre-activations have %d" % (theta.shape[0], cols))
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((rows, cols), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    with nogil:
        for b in range(rows):
            for i in range(cols):
                if z[b, i] > theta[i]:
                    out[b, i] = z[b, i]
    return out_arr


def jumprelu_backward(double[:, ::1] z, double[::1] theta, double[:, ::1] grad_f,
                      double epsilon, double lam_per_row):
    """Return (grad_z, grad_theta) for a batch; grad_theta is summed over rows."""
    cdef Py_ssize_t rows = z.shape[0], cols = z.shape[1], b, i
    cdef double half = 0.5 * epsilon, inv_eps = 1.0 / epsilon, d
    if theta.shape[0] != cols or grad_f.shape[0] != rows or grad_f.shape[1] != cols:
        raise ValueError("shape mismatch between pre-activations, thresholds and upstream gradient")
    grad_z_arr = np.zeros((rows, cols), dtype=np.float64)
    grad_theta_arr = np.zeros(cols, dtype=np.float64)
    cdef double[:, ::1] grad_z = grad_z_arr
    cdef double[::1] grad_theta = grad_theta_arr
    with nogil:
        for b in range(rows):
            for i in range(cols):
                d = z[b, i] - theta[i]
                if d > 0:
                    grad_z[b, i] = grad_f[b, i]
                if fabs(d) <= half:
                    grad_theta[i] += -(grad_f[b, i] * theta[i] + lam_per_row) * inv_eps
    return grad_z_arr, grad_theta_arr


def bf16_round_bits(uint32_t[::1] bits):
    cdef Py_ssize_t n = bits.shape[0], k
    out_arr = np.empty(n, dtype=np.uint32)
    cdef uint32_t[::1] out = out_arr
    cdef uint32_t u
    with nogil:
        for k in range(n):
            u = bits[k]
            if (u & 0x7F800000u) == 0x7F800000u and (u & 0x007FFFFFu) != 0:
                out[k] = (u & 0xFFFF0000u) | 0x00400000u
            else:
                out[k] = (u + 0x7FFFu + ((u >> 16) & 1u)) & 0xFFFF0000u
    return out_arr
