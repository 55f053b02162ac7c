"""Barron's general robust loss and its IRLS weight.

``rho`` is applied to the L2 norm of a whole descriptor residual, so one
feature gets one weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BarronParams:
    alpha: float = -5.0
    c: float = 0.5

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("scale c must be positive")
        if math.isnan(self.alpha) or self.alpha == math.inf:
            raise ValueError("alpha must be finite or -inf")

    @property
    def saturation(self) -> float:
        """``sup_r rho(r)``; finite only for negative alpha."""
        if self.alpha == -math.inf:
            return 1.0
        if self.alpha < 0:
            return abs(self.alpha - 2.0) / abs(self.alpha)
        return math.inf


def rho(r, p: BarronParams):
    x2 = (np.asarray(r, dtype=float) / p.c) ** 2
    a = p.alpha
    if a == 2.0:
        return 0.5 * x2
    if a == 0.0:
        return np.log1p(0.5 * x2)
    if a == -math.inf:
        return -np.expm1(-0.5 * x2)
    b = abs(a - 2.0)
    return (b / a) * np.expm1(0.5 * a * np.log1p(x2 / b))


def rho_weight(r, p: BarronParams):
    """``rho'(r) / r``, with its limit ``1 / c**2`` at ``r = 0``."""
    x2 = (np.asarray(r, dtype=float) / p.c) ** 2
    a = p.alpha
    inv_c2 = 1.0 / (p.c * p.c)
    if a == 2.0:
        return np.full_like(x2, inv_c2)
    if a == 0.0:
        return inv_c2 / (0.5 * x2 + 1.0)
    if a == -math.inf:
        return inv_c2 * np.exp(-0.5 * x2)
    b = abs(a - 2.0)
    return inv_c2 * np.exp((0.5 * a - 1.0) * np.log1p(x2 / b))
