"""Training objective: soft-Dice segmentation loss, the three domain
regularization losses, and their weighted combination.

All losses return scalar Tensors wired into the autodiff graph, so the
regularization term backpropagates through the head and into the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import ShapeError, Tensor

DEFAULT_EPSILON = 1e-7

REG_VARIANTS = ("PC", "RAND", "DU")


@dataclass
class LossConfig:
    variant: str = "NONE"  # PC | RAND | DU | NONE
    lam: float = 0.0
    epsilon: float = DEFAULT_EPSILON
    rng_seed: int = 0
    abs_pearson: bool = False  # minimize |corr| instead of raw corr

    def __post_init__(self):
        if self.variant not in REG_VARIANTS + ("NONE",):
            raise ValueError(f"unknown loss variant {self.variant!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")


def one_hot(n: int, j: int) -> np.ndarray:
    h = np.zeros(n)
    h[j] = 1.0
    return h


def uniform_target(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def soft_dice(s: Tensor, g: np.ndarray, epsilon: float = DEFAULT_EPSILON) -> Tensor:
    """1 - 2*sum(s*g) / (sum(s^2) + sum(g^2) + eps) on the lesion channel."""
    g = np.asarray(g)
    if s.shape != g.shape:
        raise ShapeError(f"soft_dice: shapes {s.shape} vs {g.shape}")
    gt = Tensor(g.astype(s.values.dtype))
    num = (s * gt).sum() * 2.0
    den = (s * s).sum() + float(np.sum(g * g)) + epsilon
    return 1.0 - num / den


def pearson_loss(c: Tensor, h: np.ndarray,
                 epsilon: float = DEFAULT_EPSILON,
                 use_abs: bool = False) -> Tensor:
    """Pearson correlation between domain prediction and one-hot target.

    Epsilon is added under the square root of each variance term, so a
    zero-variance (uniform) prediction yields ~0 instead of dividing by 0.
    """
    h = np.asarray(h, dtype=np.float64)
    n = h.size
    if c.size != n:
        raise ShapeError(f"pearson_loss: lengths {c.size} vs {n}")
    if n < 2:
        raise ValueError("pearson_loss: needs at least 2 domains")
    dc = c - c.mean()
    dh = h - h.mean()
    dht = Tensor(dh.astype(c.values.dtype))
    num = (dc * dht).sum()
    den = (((dc * dc).sum() + epsilon) * (float(np.sum(dh * dh)) + epsilon)).sqrt()
    corr = num / den
    if use_abs:
        return (corr * corr).sqrt()
    return corr


def _clamped_log(c: Tensor, epsilon: float) -> Tensor:
    return c.clamp(epsilon, 1.0).log()


def randomized_ce_loss(c: Tensor, rng: np.random.Generator,
                       epsilon: float = DEFAULT_EPSILON) -> Tensor:
    """Cross-entropy against a freshly drawn random domain label."""
    n = c.size
    j = int(rng.integers(n))
    return -_clamped_log(c[j], epsilon)


def discrete_uniform_loss(c: Tensor, epsilon: float = DEFAULT_EPSILON) -> Tensor:
    """Cross-entropy against the uniform target; minimum log(n) at uniform c."""
    return -_clamped_log(c, epsilon).mean()


def regularization_loss(c: Tensor, cfg: LossConfig, true_domain: int,
                        rng: Optional[np.random.Generator] = None) -> Tensor:
    """Dispatch on the configured variant."""
    if cfg.variant == "PC":
        h = one_hot(c.size, true_domain)
        return pearson_loss(c, h, cfg.epsilon, use_abs=cfg.abs_pearson)
    if cfg.variant == "RAND":
        if rng is None:
            rng = np.random.default_rng(cfg.rng_seed)
        return randomized_ce_loss(c, rng, cfg.epsilon)
    if cfg.variant == "DU":
        return discrete_uniform_loss(c, cfg.epsilon)
    raise ValueError(f"no regularization loss for variant {cfg.variant!r}")


def combined_loss(l_seg: Tensor, l_reg: Optional[Tensor],
                  cfg: LossConfig) -> Tensor:
    """l_seg + lambda * l_reg; plain l_seg for the unregularized variants."""
    if cfg.variant == "NONE":
        return l_seg
    if l_reg is None:
        raise ValueError(f"variant {cfg.variant} requires a regularization term")
    return l_seg + cfg.lam * l_reg
