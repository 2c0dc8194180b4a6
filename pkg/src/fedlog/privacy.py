"""Gaussian-mechanism differential privacy for summed-statistic messages.

Clients clamp every learned feature to [-b, b]; the constant feature stays
exactly 1. One record then moves a summed statistic by at most
sqrt(1 + (m-1) b^2) in L2, and Gaussian noise with

    sigma = sqrt(2 (1 + (m-1) b^2) ln(1.25 / delta)) / epsilon

makes each message (epsilon, delta)-DP. The guarantee is per message:
repeated rounds are not composed here.

Noise comes from ``numpy.random.Generator`` over PCG64 with the ziggurat
standard-normal transform. Seeding exists for tests and reproducible
simulations; :func:`noise_generator` without a seed draws OS entropy.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

DEFAULT_DELTA = 0.01
DEFAULT_CLIP_BOUND = 2.0


@dataclass(frozen=True)
class PrivacyParams:
    epsilon: float
    delta: float = DEFAULT_DELTA
    clip_bound: float = DEFAULT_CLIP_BOUND

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if not self.clip_bound > 0:
            raise ValueError(f"clip_bound must be > 0, got {self.clip_bound}")


def l2_sensitivity(m, b):
    if m < 2:
        raise ValueError("m must be >= 2: one feature is the constant 1")
    if b < 0:
        raise ValueError("b must be non-negative")
    return math.sqrt(1.0 + (m - 1) * b * b)


def noise_sigma(privacy, m):
    sens = l2_sensitivity(m, privacy.clip_bound)
    return sens * math.sqrt(2.0 * math.log(1.25 / privacy.delta)) / privacy.epsilon


def noise_generator(seed=None):
    return np.random.Generator(np.random.PCG64(seed))


def privatize(message, sigma, rng):
    """Copy of ``message`` with N(0, sigma^2) added to every statistic entry.

    The count passes through untouched.
    """
    if sigma == 0:
        return message
    stat = message.stat_sum + rng.standard_normal(message.stat_sum.shape) * sigma
    return dataclasses.replace(message, stat_sum=stat)
