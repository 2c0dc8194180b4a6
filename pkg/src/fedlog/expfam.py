"""Exponential-family model behind the global head.

A data point is a feature vector ``phi`` (last entry the constant 1) with a
class label ``y``. Its sufficient statistic places ``phi`` in block ``y`` of
an (n_class, m) array; flattened row-major this is the class-major layout in
which block y occupies entries [y*m, (y+1)*m). With the Gaussian base measure
the cumulant is A(eta) = log sum_y exp(|eta_y|^2 / 4) and the conditional
p(y | phi, eta) is the softmax of eta_y . phi.

Heads, statistics and prior parameters are plain ``(n_class, m)`` float
arrays. Labels are 0-based class ids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedlog import _backend

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITERS = 10_000
ARMIJO = 1e-4


class ProtocolError(ValueError):
    """Raised when aggregated messages disagree in shape."""


def _logsumexp(a, axis=None):
    a = np.asarray(a, dtype=np.float64)
    mx = np.max(a, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(a - mx), axis=axis, keepdims=True)) + mx
    return np.squeeze(out, axis=axis) if axis is not None else float(out.reshape(()))


def sufficient_statistic(phi, y, n_class):
    phi = np.asarray(phi, dtype=np.float64)
    if not 0 <= y < n_class:
        raise ValueError(f"label {y} outside [0, {n_class})")
    stat = np.zeros((n_class, phi.size))
    stat[y] = phi
    return stat


def batch_statistic(features, labels, n_class):
    """Sum of per-point statistics over a batch, accumulated in input order."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    if labels.size and (labels.min() < 0 or labels.max() >= n_class):
        raise ValueError(f"labels must lie in [0, {n_class})")
    stat = np.zeros((n_class, features.shape[1]))
    np.add.at(stat, labels, features)
    return stat


def cumulant(eta):
    eta = np.asarray(eta, dtype=np.float64)
    return _logsumexp(0.25 * np.einsum("ij,ij->i", eta, eta))


def block_weights(eta):
    """Softmax over the block energies |eta_y|^2 / 4 (the gradient of A per block)."""
    eta = np.asarray(eta, dtype=np.float64)
    a = 0.25 * np.einsum("ij,ij->i", eta, eta)
    return np.exp(a - _logsumexp(a))


def conditional_log_probs(eta, phi):
    """log p(y | phi, eta) for every class; ``phi`` may be one vector or a batch."""
    logits = np.asarray(phi, dtype=np.float64) @ np.asarray(eta, dtype=np.float64).T
    return logits - np.expand_dims(_logsumexp(logits, axis=-1), -1)


def predict(eta, features):
    """Most probable class per row; ties go to the lowest class id."""
    return np.argmax(np.asarray(features) @ np.asarray(eta).T, axis=1)


def log_posterior_kernel(eta, chi_post, nu_post):
    """eta . chi_post - nu_post * A(eta), the log posterior up to its normalizer."""
    eta = np.asarray(eta, dtype=np.float64)
    return float(np.sum(eta * chi_post)) - nu_post * cumulant(eta)


def kernel_gradient(eta, chi_post, nu_post):
    eta = np.asarray(eta, dtype=np.float64)
    return np.asarray(chi_post, dtype=np.float64) - 0.5 * nu_post * block_weights(eta)[:, None] * eta


@dataclass
class PriorParams:
    chi: np.ndarray
    nu: float = 1.0

    def __post_init__(self):
        self.chi = np.asarray(self.chi, dtype=np.float64)
        if self.chi.ndim != 2:
            raise ValueError("chi must be an (n_class, m) array")
        if self.nu < 1:
            raise ValueError(f"nu must be >= 1, got {self.nu}")

    @classmethod
    def uninformative(cls, n_class, m):
        """chi = 0, nu = 1: the prior peaks at eta = 0."""
        return cls(np.zeros((n_class, m)), 1.0)


@dataclass
class PosteriorParams:
    chi: np.ndarray
    nu: float


def posterior_update(prior, messages):
    """Add statistics and counts to the prior.

    ``messages`` is a sequence of ``(stat, count)`` pairs, summed in the
    order given; callers that need order independence sort first.
    """
    chi = prior.chi.copy()
    nu = float(prior.nu)
    for stat, count in messages:
        stat = np.asarray(stat, dtype=np.float64)
        if stat.shape != chi.shape:
            raise ProtocolError(f"statistic shape {stat.shape} != prior shape {chi.shape}")
        chi += stat
        nu += count
    return PosteriorParams(chi, nu)


@dataclass
class MapResult:
    eta: np.ndarray
    iterations: int
    converged: bool
    grad_norm: float


def map_solve(posterior, init=None, tol=DEFAULT_TOL, max_iters=DEFAULT_MAX_ITERS):
    """Maximize the posterior kernel by gradient ascent with backtracking.

    Each iteration tries step 1.0 and halves until the Armijo condition
    (constant 1e-4) holds; stops once the gradient's max-norm drops below
    ``tol`` or after ``max_iters`` iterations. The objective is strictly
    concave, so a converged result is the unique MAP head.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    chi = np.ascontiguousarray(posterior.chi, dtype=np.float64)
    eta0 = np.zeros_like(chi) if init is None else np.array(init, dtype=np.float64)
    if eta0.shape != chi.shape:
        raise ValueError(f"init shape {eta0.shape} != statistic shape {chi.shape}")
    eta, iters, converged, gnorm = _backend.kernels.map_ascent(
        eta0, chi, float(posterior.nu), float(tol), int(max_iters), ARMIJO
    )
    return MapResult(np.asarray(eta), int(iters), bool(converged), float(gnorm))
