"""Fused single-pass kernels for the training hot path.

These mirror the reference numpy implementations in losses.py and trainer.py
exactly (same formulas, same tie handling) but evaluate value and gradient in
one sweep to cut memory traffic.  All accumulation is sequential in pixel
order, so results are deterministic across runs.  Everything here is optional:
callers fall back to the numpy route when numba is unavailable.
"""
from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


_LN2 = math.log(2.0)
_EXP_CLAMP = 500.0


@njit(cache=True)
def margin_loss_kernel(scores, labels, ignore_index, rho_0k, rho_k0, grad):
    """Calibrated log-loss value, gradient and per-class parts, one pass."""
    n, k_cls = scores.shape
    per_fg = np.zeros(k_cls)
    per_bg = np.zeros(k_cls)
    n_valid = 0
    for i in range(n):
        if labels[i] != ignore_index:
            n_valid += 1
    if n_valid == 0:
        return 0.0, per_fg, per_bg, 0
    inv = 1.0 / n_valid

    for i in range(n):
        lab = labels[i]
        if lab == ignore_index:
            for k in range(k_cls):
                grad[i, k] = 0.0
            continue
        j1 = 0
        m1 = scores[i, 0]
        for k in range(1, k_cls):
            if scores[i, k] > m1:
                m1 = scores[i, k]
                j1 = k
        j2 = -1
        m2 = -np.inf
        for k in range(k_cls):
            if k != j1 and scores[i, k] > m2:
                m2 = scores[i, k]
                j2 = k
        gsum = 0.0
        gj1 = 0.0
        for k in range(k_cls):
            best_other = m2 if k == j1 else m1
            lam = scores[i, k] - best_other
            if k == lab:
                x = -(lam - rho_k0[k])
            else:
                x = lam + rho_0k[k]
            ax = abs(x)
            if ax > _EXP_CLAMP:
                ax = _EXP_CLAMP
            t = math.pow(2.0, -ax)  # 2^-|x|, also 2^x for negative x
            term = (x if x > 0.0 else 0.0) + math.log1p(t) / _LN2
            sig = 1.0 / (1.0 + t) if x >= 0.0 else t / (1.0 + t)
            if k == lab:
                per_fg[k] += term
                g = -sig * inv
            else:
                per_bg[k] += term
                g = sig * inv
            grad[i, k] = g
            gsum += g
            if k == j1:
                gj1 = g
        grad[i, j1] += gj1 - gsum
        grad[i, j2] -= gj1

    value = 0.0
    for k in range(k_cls):
        per_fg[k] *= inv
        per_bg[k] *= inv
        value += per_fg[k] + per_bg[k]
    return value, per_fg, per_bg, n_valid


@njit(cache=True)
def cross_entropy_kernel(scores, labels, ignore_index, grad):
    """Softmax NLL value, gradient and per-class parts, one pass."""
    n, k_cls = scores.shape
    per_fg = np.zeros(k_cls)
    n_valid = 0
    for i in range(n):
        if labels[i] != ignore_index:
            n_valid += 1
    if n_valid == 0:
        return 0.0, per_fg, 0
    inv = 1.0 / n_valid

    for i in range(n):
        lab = labels[i]
        if lab == ignore_index:
            for k in range(k_cls):
                grad[i, k] = 0.0
            continue
        m = scores[i, 0]
        for k in range(1, k_cls):
            if scores[i, k] > m:
                m = scores[i, k]
        denom = 0.0
        for k in range(k_cls):
            denom += math.exp(scores[i, k] - m)
        log_denom = math.log(denom)
        per_fg[lab] += log_denom - (scores[i, lab] - m)
        for k in range(k_cls):
            p = math.exp(scores[i, k] - m) / denom
            grad[i, k] = (p - (1.0 if k == lab else 0.0)) * inv

    value = 0.0
    for k in range(k_cls):
        per_fg[k] *= inv
        value += per_fg[k]
    return value, per_fg, n_valid


@njit(cache=True)
def mlp_forward_kernel(x, w1, b1, w2, b2, act, scores):
    """scores = relu(x @ w1 + b1) @ w2 + b2 without materializing the pre-activation."""
    n, d = x.shape
    hidden = w1.shape[1]
    k_cls = w2.shape[1]
    for i in range(n):
        for h in range(hidden):
            acc = b1[h]
            for j in range(d):
                acc += x[i, j] * w1[j, h]
            act[i, h] = acc if acc > 0.0 else 0.0
        for k in range(k_cls):
            acc = b2[k]
            for h in range(hidden):
                acc += act[i, h] * w2[h, k]
            scores[i, k] = acc


@njit(cache=True)
def mlp_backward_kernel(x, act, w2, grad_scores, gw1, gb1, gw2, gb2):
    """Parameter gradients; the hidden relu mask is recovered from act > 0."""
    n, d = x.shape
    hidden = act.shape[1]
    k_cls = grad_scores.shape[1]
    gw1[:] = 0.0
    gb1[:] = 0.0
    gw2[:] = 0.0
    gb2[:] = 0.0
    for i in range(n):
        for k in range(k_cls):
            g = grad_scores[i, k]
            gb2[k] += g
            for h in range(hidden):
                gw2[h, k] += act[i, h] * g
        for h in range(hidden):
            if act[i, h] > 0.0:
                acc = 0.0
                for k in range(k_cls):
                    acc += grad_scores[i, k] * w2[h, k]
                gb1[h] += acc
                for j in range(d):
                    gw1[j, h] += x[i, j] * acc
