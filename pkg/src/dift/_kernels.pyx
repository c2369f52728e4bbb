# cython: language_level=3
"""Compiled kernels: the hot per-step arithmetic of the decode loop.

Semantics mirror `dift._kernels_py` exactly; `dift.kernels` picks whichever
backend imported successfully.
"""

from libc.math cimport exp, log, sqrt, INFINITY

import numpy as np

KIND_LOW_CONFIDENCE = 0
KIND_ENTROPY = 1
KIND_MARGIN = 2


def softmax_rows(logits):
    """Row-wise softmax with max-shift for stability."""
    cdef double[:, ::1] x = np.ascontiguousarray(logits, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], v = x.shape[1]
    out_arr = np.empty((n, v), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double m, s
    for i in range(n):
        m = x[i, 0]
        for j in range(1, v):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(v):
            out[i, j] = exp(x[i, j] - m)
            s += out[i, j]
        for j in range(v):
            out[i, j] /= s
    return out_arr


def score_rows(probs, int kind):
    """Greedy token and strategy score per row.

    Returns (tokens, scores): the argmax token id (first maximum wins) and
    the [0, 1] score. kind 0: max probability; kind 1: 1 - H(p)/ln(V);
    kind 2: top-1 minus top-2 probability.
    """
    cdef double[:, ::1] p = np.ascontiguousarray(probs, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0], v = p.shape[1]
    if kind == KIND_ENTROPY and v < 2:
        raise ValueError("entropy scoring needs a vocabulary of at least 2")
    if kind not in (KIND_LOW_CONFIDENCE, KIND_ENTROPY, KIND_MARGIN):
        raise ValueError(f"unknown score kind {kind}")
    tokens_arr = np.empty(n, dtype=np.int64)
    scores_arr = np.empty(n, dtype=np.float64)
    cdef long long[::1] tokens = tokens_arr
    cdef double[::1] scores = scores_arr
    cdef Py_ssize_t i, j, best
    cdef double top1, top2, h, s, logv
    logv = log(<double> v) if v > 1 else 1.0
    for i in range(n):
        best = 0
        top1 = p[i, 0]
        for j in range(1, v):
            if p[i, j] > top1:
                top1 = p[i, j]
                best = j
        tokens[i] = best
        if kind == KIND_LOW_CONFIDENCE:
            scores[i] = top1
        elif kind == KIND_ENTROPY:
            h = 0.0
            for j in range(v):
                if p[i, j] > 0.0:
                    h -= p[i, j] * log(p[i, j])
            s = 1.0 - h / logv
            if s < 0.0:
                s = 0.0
            elif s > 1.0:
                s = 1.0
            scores[i] = s
        else:
            if v == 1:
                s = top1
            else:
                top2 = -INFINITY
                for j in range(v):
                    if j != best and p[i, j] > top2:
                        top2 = p[i, j]
                s = top1 - top2
            if s < 0.0:
                s = 0.0
            elif s > 1.0:
                s = 1.0
            scores[i] = s
    return tokens_arr, scores_arr


def vrg_rows(cond, uncond, double scale):
    """u + (s+1)(c - u) per element; scale 0 returns an exact copy of cond.

    The short-circuit matters: u + 1*(c - u) is not bit-stable in floating
    point, and the scale-0 identity must be exact.
    """
    cond_arr = np.ascontiguousarray(cond, dtype=np.float64)
    if scale == 0.0:
        return cond_arr.copy()
    cdef double[:, ::1] c = cond_arr
    cdef double[:, ::1] u = np.ascontiguousarray(uncond, dtype=np.float64)
    cdef Py_ssize_t n = c.shape[0], v = c.shape[1]
    out_arr = np.empty((n, v), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double w = scale + 1.0
    cdef Py_ssize_t i, j
    for i in range(n):
        for j in range(v):
            out[i, j] = u[i, j] + w * (c[i, j] - u[i, j])
    return out_arr


def hellinger_rows(p, q):
    """Hellinger distance per row, normalized to [0, 1] by 1/sqrt(2)."""
    cdef double[:, ::1] a = np.ascontiguousarray(p, dtype=np.float64)
    cdef double[:, ::1] b = np.ascontiguousarray(q, dtype=np.float64)
    cdef Py_ssize_t n = a.shape[0], v = a.shape[1]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double acc, d
    for i in range(n):
        acc = 0.0
        for j in range(v):
            d = sqrt(a[i, j]) - sqrt(b[i, j])
            acc += d * d
        out[i] = sqrt(acc) / sqrt(2.0)
    return out_arr
