"""Numpy implementations of the hot numerical kernels.

This module is the reference and the fallback: ``fedlog._ckernels`` exposes
the same functions with the same signatures and is preferred when compiled.
"""

import math

import numpy as np

IDENTITY = 0
RELU = 1
CLAMP = 2


def _activate(z, act, bound):
    if act == RELU:
        np.maximum(z, 0.0, out=z)
    elif act == CLAMP:
        np.clip(z, -bound, bound, out=z)
    return z


def _backprop_mask(out, act, bound):
    # The derivative is recoverable from the activation output alone.
    if act == RELU:
        return out > 0.0
    if act == CLAMP:
        return np.abs(out) < bound
    return None


def _layer_outputs(weights, biases, acts, bounds, x):
    outs = [x]
    h = x
    for w, b, act, bound in zip(weights, biases, acts, bounds):
        h = _activate(h @ w.T + b, act, bound)
        outs.append(h)
    return outs


def _with_constant(h):
    phi = np.empty((h.shape[0], h.shape[1] + 1))
    phi[:, :-1] = h
    phi[:, -1] = 1.0
    return phi


def body_features(weights, biases, acts, bounds, x):
    return _with_constant(_layer_outputs(weights, biases, acts, bounds, x)[-1])


def loss_and_grads(weights, biases, acts, bounds, x, labels, head, head_grad):
    n = x.shape[0]
    if n == 0:
        return (
            0.0,
            [np.zeros_like(w) for w in weights],
            [np.zeros_like(b) for b in biases],
            np.zeros_like(head) if head_grad else None,
        )
    outs = _layer_outputs(weights, biases, acts, bounds, x)
    phi = _with_constant(outs[-1])
    rows = np.arange(n)

    logits = phi @ head.T
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.sum(lse - shifted[rows, labels]))

    dlogits = np.exp(shifted - lse[:, None])
    dlogits[rows, labels] -= 1.0
    ghead = dlogits.T @ phi if head_grad else None

    delta = dlogits @ head[:, :-1]
    gws = [None] * len(weights)
    gbs = [None] * len(weights)
    for li in range(len(weights) - 1, -1, -1):
        mask = _backprop_mask(outs[li + 1], acts[li], bounds[li])
        if mask is not None:
            delta = delta * mask
        gws[li] = delta.T @ outs[li]
        gbs[li] = delta.sum(axis=0)
        if li > 0:
            delta = delta @ weights[li]
    return loss, gws, gbs, ghead


def adam_update(p, g, m, v, lr, beta1, beta2, eps, t):
    """In-place bias-corrected Adam update on flat float64 arrays."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    p -= lr * mhat / (np.sqrt(vhat) + eps)


def sgd_update(p, g, lr):
    p -= lr * g


# --- MAP ascent on the conjugate posterior kernel -------------------------


def _expm1_minus_x(d):
    small = np.abs(d) < 1e-2
    out = np.expm1(d) - d
    ds = d[small]
    out[small] = ds * ds * 0.5 * (1.0 + ds / 3.0 * (1.0 + ds / 4.0 * (1.0 + ds / 5.0)))
    return out


def _log1p_minus_x(s):
    if abs(s) < 1e-2:
        acc = 0.0
        for k in range(9, 1, -1):
            acc = s * (((-1.0) ** (k + 1)) / k + acc)
        return s * acc
    return math.log1p(s) - s


def _cumulant_remainder(eta, grad, a, lse, t):
    """Second-order remainder of A(eta + t*grad) - A(eta) - t*grad.dA.

    The first-order term cancels analytically, so the remainder keeps full
    relative accuracy even when it is far below the rounding level of A.
    Returns inf when the step overflows.
    """
    logw = a - lse
    w = np.exp(logw)
    d1 = 0.5 * t * np.einsum("ij,ij->i", eta, grad)
    d2 = 0.25 * t * t * np.einsum("ij,ij->i", grad, grad)
    d = d1 + d2
    if d.max() > 30.0:
        total = np.logaddexp.reduce(logw + d)
        if not np.isfinite(total):
            return math.inf
        return float(total - np.dot(w, d1))
    s = float(np.dot(w, np.expm1(d)))
    return float(np.dot(w, d2)) + float(np.dot(w, _expm1_minus_x(d))) + _log1p_minus_x(s)


def _cumulant_parts(eta):
    a = 0.25 * np.einsum("ij,ij->i", eta, eta)
    amax = a.max()
    return a, amax + math.log(np.exp(a - amax).sum())


def map_ascent(eta0, stat, nu, tol, max_iters, armijo):
    """Gradient ascent with halving backtracking on eta.stat - nu*A(eta).

    ``eta0`` and ``stat`` are (n_class, m) arrays. The Armijo test uses the
    exact increase t*|g|^2 - nu*remainder. Returns
    ``(eta, iterations, converged, grad_inf_norm)``.
    """
    eta = np.array(eta0, dtype=np.float64, copy=True)
    it = 0
    converged = False
    while True:
        a, lse = _cumulant_parts(eta)
        grad = stat - (0.5 * nu) * np.exp(a - lse)[:, None] * eta
        gnorm = float(np.abs(grad).max())
        if gnorm < tol:
            converged = True
            break
        if it >= max_iters:
            break
        gsq = float(np.sum(grad * grad))
        t = 1.0
        while t > 1e-300:
            gain = t * gsq - nu * _cumulant_remainder(eta, grad, a, lse, t)
            if gain >= armijo * t * gsq:
                break
            t *= 0.5
        else:
            # line search exhausted; iterate is as good as floating point allows
            break
        eta += t * grad
        it += 1
    return eta, it, converged, gnorm
