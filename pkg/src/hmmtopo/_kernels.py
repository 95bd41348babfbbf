"""Compiled inner loops over sparse edge lists (log domain).

Edges are given in CSR form: for the forward/Viterbi passes the edges
entering state j are ``in_ptr[j]:in_ptr[j+1]``; for the backward pass the
edges leaving state i are ``out_ptr[i]:out_ptr[i+1]``.
"""
import numpy as np
from numba import njit

NEG_INF = -np.inf


@njit(cache=True, nogil=True)
def forward(log_b, init, in_ptr, in_src, in_lp):
    T, S = log_b.shape
    alpha = np.full((T, S), NEG_INF)
    for j in range(S):
        alpha[0, j] = init[j] + log_b[0, j]
    for t in range(1, T):
        for j in range(S):
            m = NEG_INF
            for k in range(in_ptr[j], in_ptr[j + 1]):
                v = alpha[t - 1, in_src[k]] + in_lp[k]
                if v > m:
                    m = v
            if m == NEG_INF:
                continue
            acc = 0.0
            for k in range(in_ptr[j], in_ptr[j + 1]):
                acc += np.exp(alpha[t - 1, in_src[k]] + in_lp[k] - m)
            alpha[t, j] = m + np.log(acc) + log_b[t, j]
    return alpha


@njit(cache=True, nogil=True)
def backward(log_b, fin, out_ptr, out_dst, out_lp):
    T, S = log_b.shape
    beta = np.full((T, S), NEG_INF)
    for i in range(S):
        beta[T - 1, i] = fin[i]
    for t in range(T - 2, -1, -1):
        for i in range(S):
            m = NEG_INF
            for k in range(out_ptr[i], out_ptr[i + 1]):
                j = out_dst[k]
                v = out_lp[k] + log_b[t + 1, j] + beta[t + 1, j]
                if v > m:
                    m = v
            if m == NEG_INF:
                continue
            acc = 0.0
            for k in range(out_ptr[i], out_ptr[i + 1]):
                j = out_dst[k]
                acc += np.exp(out_lp[k] + log_b[t + 1, j] + beta[t + 1, j] - m)
            beta[t, i] = m + np.log(acc)
    return beta


@njit(cache=True, nogil=True)
def viterbi(log_b, init, fin, in_ptr, in_src, in_lp):
    """Max-product pass; returns (best final score, final state, backpointers).

    Backpointers hold the winning in-edge index per (t, j), -1 at t=0 or when
    unreachable.  Ties keep the first in-edge in CSR order.
    """
    T, S = log_b.shape
    delta = np.full(S, NEG_INF)
    prev = np.empty(S)
    bp = np.full((T, S), -1, dtype=np.int64)
    for j in range(S):
        delta[j] = init[j] + log_b[0, j]
    for t in range(1, T):
        for j in range(S):
            prev[j] = delta[j]
        for j in range(S):
            best = NEG_INF
            arg = -1
            for k in range(in_ptr[j], in_ptr[j + 1]):
                v = prev[in_src[k]] + in_lp[k]
                if v > best:
                    best = v
                    arg = k
            bp[t, j] = arg
            delta[j] = best + log_b[t, j] if arg >= 0 else NEG_INF
    best = NEG_INF
    last = -1
    for j in range(S):
        v = delta[j] + fin[j]
        if v > best:
            best = v
            last = j
    return best, last, bp


@njit(cache=True, nogil=True)
def edit_counts(codes, n):
    """Unit-cost Levenshtein table and traceback between ``codes[:n]``
    (reference) and ``codes[n:]`` (hypothesis).  Returns (substitutions,
    deletions, insertions)."""
    ref, hyp = codes[:n], codes[n:]
    m = len(hyp)
    d = np.empty((n + 1, m + 1), dtype=np.int64)
    for i in range(n + 1):
        d[i, 0] = i
    for j in range(m + 1):
        d[0, j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            best = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            if d[i, j - 1] + 1 < best:
                best = d[i, j - 1] + 1
            if d[i - 1, j] + 1 < best:
                best = d[i - 1, j] + 1
            d[i, j] = best
    s = dl = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            c = ref[i - 1] != hyp[j - 1]
            if d[i, j] == d[i - 1, j - 1] + c:
                s += c
                i -= 1
                j -= 1
                continue
        if j > 0 and d[i, j] == d[i, j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dl += 1
            i -= 1
    return s, dl, ins
