"""Numpy implementations of the row-wise hot kernels.

These are the reference versions; ``_ckernels.pyx`` must agree with them to
within a few ulps. All inputs are 2-D float64 arrays with one distribution
(or logit vector) per row.
"""
import numpy as np

LOG_FLOOR = 1e-30
_LN_FLOOR = np.log(LOG_FLOOR)


def softmax_rows(z):
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_vjp(s, g):
    return s * (g - (g * s).sum(axis=1, keepdims=True))


def _safe_log(v):
    return np.log(np.maximum(v, LOG_FLOOR))


def kl_rows(p, q):
    # p == 0 gives 0 * ln(1e-30) == 0, which realizes 0 ln 0 = 0.
    return (p * (_safe_log(p) - _safe_log(q))).sum(axis=1)


def kl_rows_vjp(p, q, g):
    """Gradients of ``kl_rows`` w.r.t. ``p`` and ``q`` given row cotangents ``g``."""
    gcol = g[:, None]
    gp = gcol * (_safe_log(p) - _safe_log(q) + (p > LOG_FLOOR))
    gq = np.where(q > LOG_FLOOR, -gcol * p / np.maximum(q, LOG_FLOOR), 0.0)
    return gp, gq


def entropy_rows(p):
    return -(p * _safe_log(p)).sum(axis=1)


def entropy_rows_vjp(p, g):
    return -g[:, None] * (_safe_log(p) + (p > LOG_FLOOR))


def bias_act_(z, b, relu):
    """In place: z <- act(z + b). Returns z."""
    z += b
    if relu:
        np.maximum(z, 0.0, out=z)
    return z


def bias_act_vjp(out, g, relu):
    """Cotangent of the pre-activation and of the bias."""
    gz = np.where(out > 0, g, 0.0) if relu else g
    return gz, gz.sum(axis=0)
