"""Independent numpy reference implementations used as test oracles.

Everything here is written against the math, not against the package
code: plain loops and log-sum-exp, no torch.  The finite-difference
helper treats the function under test as a black box.
"""
from __future__ import annotations

import numpy as np


def kl_margin_ref(mu: np.ndarray, sigma: np.ndarray, margin: float) -> float:
    mu = np.atleast_2d(mu)
    sigma = np.atleast_2d(sigma)
    vals = []
    for m, s in zip(mu, sigma):
        kl = 0.0
        for mi, si in zip(m, s):
            kl += 0.5 * (mi ** 2 + si ** 2 - 1.0 - np.log(si ** 2))
        vals.append(max(0.0, kl - margin))
    return float(np.mean(vals))


def gram_ref(ga: np.ndarray, gb: np.ndarray) -> float:
    d = ga.shape[1]
    diff = ga.T @ ga - gb.T @ gb
    total = 0.0
    for i in range(d):
        for j in range(d):
            total += diff[i, j] ** 2
    return float(total / (d * d))


def _log_softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def contrastive_ref(s: np.ndarray, p: np.ndarray, tau: float) -> float:
    scores = tau * (s @ p.T)
    n = scores.shape[0]
    row = -np.mean([_log_softmax_rows(scores)[i, i] for i in range(n)])
    col = -np.mean([_log_softmax_rows(scores.T)[i, i] for i in range(n)])
    return float(0.5 * (row + col))


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Gradient of scalar f at x by central differences, one coordinate at
    a time.  x is flattened; the result has x's shape."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(got: np.ndarray, want: np.ndarray) -> float:
    got = np.asarray(got, dtype=np.float64).reshape(-1)
    want = np.asarray(want, dtype=np.float64).reshape(-1)
    denom = max(float(np.linalg.norm(want)), 1e-12)
    return float(np.linalg.norm(got - want) / denom)
