"""Spike-and-exponential relaxation of binary latent variables.

A binary unit with posterior mass q on z=1 is smoothed into a variable
zeta on [0,1] distributed as a point mass at 0 (weight 1-q) plus a
truncated exponential beta*exp(beta*zeta)/(e^beta - 1) on (0,1] (weight q).
Inverse-CDF sampling of that mixture gives

    zeta(rho, q) = (1/beta) * log( max(rho + q - 1, 0)/q * (e^beta - 1) + 1 )

for rho uniform on (0,1).  The map is the exact quantile function of the
mixture: rho <= 1-q lands on the spike (zeta = 0, i.e. z = 0), larger rho
on the exponential branch, so P(zeta > 0) = q and gradients can flow
through q while the sampled sign stays discrete.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ReparamConfig:
    beta: float = 0.5
    q_clamp_epsilon: float = 1e-6

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not 0 < self.q_clamp_epsilon < 0.5:
            raise ValueError("q_clamp_epsilon must lie in (0, 0.5)")


DEFAULT_CONFIG = ReparamConfig()


def clamp_q(q, cfg: ReparamConfig = DEFAULT_CONFIG) -> np.ndarray:
    eps = cfg.q_clamp_epsilon
    return np.clip(np.asarray(q, dtype=np.float64), eps, 1.0 - eps)


def zeta(rho, q, cfg: ReparamConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Quantile transform; elementwise over broadcast inputs, output in [0,1]."""
    rho = np.asarray(rho, dtype=np.float64)
    q = clamp_q(q, cfg)
    em1 = np.expm1(cfg.beta)
    # log1p of the excess term = log(arg) with better accuracy near the spike
    return np.log1p(np.maximum(rho + q - 1.0, 0.0) / q * em1) / cfg.beta


def zeta_cdf(z_val, q, cfg: ReparamConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Mixture CDF: rho = q*(e^{beta*z} - 1)/(e^beta - 1) + (1 - q)."""
    z_val = np.asarray(z_val, dtype=np.float64)
    q = clamp_q(q, cfg)
    return q * np.expm1(cfg.beta * z_val) / np.expm1(cfg.beta) + (1.0 - q)


def zeta_grad_q(rho, q, cfg: ReparamConfig = DEFAULT_CONFIG) -> np.ndarray:
    """d zeta / d q at fixed rho; 0 on the spike branch and at the kink.

    On the smooth branch (rho + q - 1 > 0), differentiating the log gives
    (1/beta) * (e^beta - 1) * (1 - rho) / q^2 / [ ((rho+q-1)/q)(e^beta-1) + 1 ].
    The subgradient 0 at rho + q - 1 <= 0 keeps gradients bounded; the kink
    itself has measure zero under the uniform draw.
    """
    rho = np.asarray(rho, dtype=np.float64)
    q = clamp_q(q, cfg)
    em1 = np.expm1(cfg.beta)
    excess = rho + q - 1.0
    smooth = excess > 0.0
    denom = np.where(smooth, excess, 0.0) / q * em1 + 1.0
    grad = em1 * (1.0 - rho) / (q * q) / (cfg.beta * denom)
    return np.where(smooth, grad, 0.0)


def bernoulli_entropy(q, cfg: ReparamConfig = DEFAULT_CONFIG) -> float:
    """Closed-form factorized Bernoulli entropy in nats (summed over units)."""
    q = clamp_q(q, cfg)
    return float(-np.sum(q * np.log(q) + (1.0 - q) * np.log(1.0 - q)))


def binarize(zeta_or_q, mode: str = "spike") -> np.ndarray:
    """spike: z = 1 iff zeta > 0 (zeta = 0 means z = 0); threshold: q > 0.5."""
    v = np.asarray(zeta_or_q, dtype=np.float64)
    if np.any(v < 0.0) or np.any(v > 1.0):
        raise ValueError("binarize expects entries in [0,1]")
    if mode == "spike":
        return (v > 0.0).astype(np.int8)
    if mode == "threshold":
        return (v > 0.5).astype(np.int8)
    raise ValueError(f"unknown binarize mode {mode!r}")
