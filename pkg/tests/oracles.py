"""Brute-force references for the expected-attention calculus."""

import math

import numpy as np


def enumerate_alignment(p):
    """Expected boundaries by walking every attend/skip outcome of the hard process."""
    I, U = p.shape
    alpha = np.zeros((I, U))

    def walk(i, start, prob):
        if i == I or prob == 0.0:
            return
        skip = prob
        for u in range(start, U):
            hit = skip * p[i, u]
            alpha[i, u] += hit
            walk(i + 1, u, hit)
            skip *= 1.0 - p[i, u]
        # remaining ``skip`` escapes past the end; later steps receive nothing

    walk(0, 0, 1.0)
    return alpha


def double_loop_beta(alpha, d, W):
    U = len(alpha)
    beta = np.zeros(U)
    for u in range(U):
        for k in range(u, min(U, u + W)):
            lo = max(0, k - W + 1)
            beta[u] += alpha[k] * math.exp(d[u]) / sum(math.exp(d[l]) for l in range(lo, k + 1))
    return beta
