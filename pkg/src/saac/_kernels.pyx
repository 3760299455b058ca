# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: BLAS-backed dense layers, fused optimizer updates and
the quantile Huber loss. Semantics mirror ``_kernels_py``."""

from libc.math cimport sqrt, pow, fabs
from scipy.linalg.cython_blas cimport dgemm

import numpy as np


def dense_forward(double[:, ::1] x, double[:, ::1] W, double[::1] b,
                  out_arr, bint apply_tanh):
    cdef double[:, ::1] out = out_arr
    cdef int B = x.shape[0], n_in = x.shape[1], n_out = W.shape[1]
    cdef int i, j
    cdef double one = 1.0
    cdef char trans = b'N'
    if x.shape[1] != W.shape[0] or out.shape[0] != B or out.shape[1] != n_out:
        raise ValueError("dense_forward: shape mismatch")
    for i in range(B):
        for j in range(n_out):
            out[i, j] = b[j]
    if B > 0 and n_in > 0:
        # row-major out = x @ W  <=>  column-major out^T = W^T x^T
        dgemm(&trans, &trans, &n_out, &B, &n_in, &one, &W[0, 0], &n_out,
              &x[0, 0], &n_in, &one, &out[0, 0], &n_out)
    if apply_tanh:
        # numpy's vectorized tanh beats a scalar libm loop by a wide margin
        np.tanh(out_arr, out=out_arr)


def dense_backward(double[:, ::1] x, double[:, ::1] W, double[:, ::1] y,
                   double[:, ::1] dy, double[:, ::1] dW, double[::1] db,
                   dx, bint apply_tanh):
    cdef int B = x.shape[0], n_in = x.shape[1], n_out = W.shape[1]
    cdef int i, j
    cdef double one = 1.0, zero = 0.0
    cdef char tn = b'N', tt = b'T'
    cdef double[:, ::1] dz
    cdef double[:, ::1] dxv
    if apply_tanh:
        dz = dy.copy()
        for i in range(B):
            for j in range(n_out):
                dz[i, j] = dy[i, j] * (1.0 - y[i, j] * y[i, j])
    else:
        dz = dy
    for j in range(n_out):
        db[j] = 0.0
    for i in range(B):
        for j in range(n_out):
            db[j] += dz[i, j]
    if B == 0:
        dW[:, :] = 0.0
        return
    # dW^T (n_out x n_in) = dz^T (n_out x B) . x (B x n_in)
    dgemm(&tn, &tt, &n_out, &n_in, &B, &one, &dz[0, 0], &n_out,
          &x[0, 0], &n_in, &zero, &dW[0, 0], &n_out)
    if dx is not None:
        dxv = dx
        # dx^T (n_in x B) = W (n_in x n_out) . dz^T (n_out x B)
        dgemm(&tt, &tn, &n_in, &B, &n_out, &one, &W[0, 0], &n_out,
              &dz[0, 0], &n_out, &zero, &dxv[0, 0], &n_in)


def adam_update(double[::1] p, double[::1] g, double[::1] m, double[::1] v,
                double lr, double beta1, double beta2, double eps, long t):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double c1 = 1.0 - pow(beta1, <double>t)
    cdef double c2 = 1.0 - pow(beta2, <double>t)
    cdef double gi
    for i in range(n):
        gi = g[i]
        m[i] = m[i] * beta1 + (1.0 - beta1) * gi
        v[i] = v[i] * beta2 + (1.0 - beta2) * (gi * gi)
        p[i] = p[i] - lr * (m[i] / c1) / (sqrt(v[i] / c2) + eps)


def polyak(double[::1] target, double[::1] online, double tau):
    cdef Py_ssize_t i, n = target.shape[0]
    cdef double keep = 1.0 - tau
    for i in range(n):
        target[i] = target[i] * keep + tau * online[i]


def quantile_huber(double[:, ::1] pred, double[:, ::1] target,
                   double[::1] taus, double kappa, double[:, ::1] grad):
    cdef int B = pred.shape[0], N = pred.shape[1], M = target.shape[1]
    cdef int b, i, j
    cdef double u, au, w, h, dh, acc, total = 0.0
    cdef double scale = 1.0 / (<double>B * N * M)
    for b in range(B):
        for i in range(N):
            acc = 0.0
            for j in range(M):
                u = target[b, j] - pred[b, i]
                au = fabs(u)
                if au <= kappa:
                    h = 0.5 * u * u
                    dh = u
                else:
                    h = kappa * (au - 0.5 * kappa)
                    dh = kappa if u > 0 else -kappa
                w = fabs(taus[i] - (1.0 if u < 0.0 else 0.0))
                total += w * h
                acc += w * dh
            grad[b, i] = -acc / kappa * scale
    return total / kappa * scale
