# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled training hot kernels.

Mirrors the API of ``fogsim._kernels_py``. The fused gradient-descent loop
avoids per-step array allocation, which dominates runtime at the small
matrix sizes typical for one device's shard.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()

BACKEND_NAME = "cython"


cdef double _loss_grad_inner(const double[::1] w, const double[:, ::1] X,
                             const cnp.int64_t[::1] y, double[::1] grad,
                             double[::1] logits) noexcept nogil:
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t d = X.shape[1]
    cdef Py_ssize_t C = logits.shape[0]
    cdef Py_ssize_t i, j, c
    cdef double zmax, sumexp, loss, p, coef, inv_n
    loss = 0.0
    inv_n = 1.0 / n
    for j in range(C * d):
        grad[j] = 0.0
    for i in range(n):
        zmax = -1e308
        for c in range(C):
            logits[c] = 0.0
            for j in range(d):
                logits[c] += w[c * d + j] * X[i, j]
            if logits[c] > zmax:
                zmax = logits[c]
        sumexp = 0.0
        for c in range(C):
            logits[c] = exp(logits[c] - zmax)
            sumexp += logits[c]
        loss += log(sumexp) - log(logits[y[i]])
        for c in range(C):
            p = logits[c] / sumexp
            if c == y[i]:
                p -= 1.0
            coef = p * inv_n
            for j in range(d):
                grad[c * d + j] += coef * X[i, j]
    return loss * inv_n


def softmax_loss_grad(double[::1] w, double[:, ::1] X, cnp.int64_t[::1] y):
    """Mean cross-entropy (nats) and its gradient over the batch."""
    cdef Py_ssize_t d = X.shape[1]
    cdef Py_ssize_t C = w.shape[0] // d
    grad_arr = np.empty(C * d, dtype=np.float64)
    logit_arr = np.empty(C, dtype=np.float64)
    cdef double[::1] grad = grad_arr
    cdef double[::1] logits = logit_arr
    cdef double loss
    with nogil:
        loss = _loss_grad_inner(w, X, y, grad, logits)
    return loss, grad_arr


def gd_steps(double[::1] w, double[:, ::1] X, cnp.int64_t[::1] y, int steps, double lr):
    """Run full-batch gradient descent steps; returns the updated vector."""
    cdef Py_ssize_t d = X.shape[1]
    cdef Py_ssize_t C = w.shape[0] // d
    cdef Py_ssize_t j, s
    out_arr = np.array(w, dtype=np.float64, copy=True)
    grad_arr = np.empty(C * d, dtype=np.float64)
    logit_arr = np.empty(C, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double[::1] grad = grad_arr
    cdef double[::1] logits = logit_arr
    with nogil:
        for s in range(steps):
            _loss_grad_inner(out, X, y, grad, logits)
            for j in range(C * d):
                out[j] -= lr * grad[j]
    return out_arr


def eval_loss_correct(double[::1] w, double[:, ::1] X, cnp.int64_t[::1] y):
    """Mean cross-entropy and number of argmax-correct predictions.

    Argmax ties resolve to the lowest class index.
    """
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t d = X.shape[1]
    cdef Py_ssize_t C = w.shape[0] // d
    cdef Py_ssize_t i, j, c, best
    cdef double zmax, sumexp, loss, z
    logit_arr = np.empty(C, dtype=np.float64)
    cdef double[::1] logits = logit_arr
    cdef cnp.int64_t correct = 0
    loss = 0.0
    with nogil:
        for i in range(n):
            zmax = -1e308
            best = 0
            for c in range(C):
                z = 0.0
                for j in range(d):
                    z += w[c * d + j] * X[i, j]
                logits[c] = z
                if z > zmax:
                    zmax = z
                    best = c
            sumexp = 0.0
            for c in range(C):
                sumexp += exp(logits[c] - zmax)
            loss += log(sumexp) - (logits[y[i]] - zmax)
            if best == y[i]:
                correct += 1
    return loss / n, int(correct)
