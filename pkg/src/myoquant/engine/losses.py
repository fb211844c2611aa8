from __future__ import annotations

from dataclasses import dataclass

from .ops import mse, soft_dice_loss, triplet_loss
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    """Weights of the combined embedding loss.

    beta scales the triplet term, lam each reconstruction term, alpha is the
    triplet margin.
    """

    beta: float = 0.5
    lam: float = 1.0 / 6.0
    alpha: float = 1.0

    def __post_init__(self):
        if self.beta < 0 or self.lam < 0:
            raise ValueError(f"loss weights must be non-negative, got beta={self.beta}, lambda={self.lam}")
        if self.alpha <= 0:
            raise ValueError(f"triplet margin must be positive, got {self.alpha}")


def combined_loss(triplet: Tensor, mse_a: Tensor, mse_p: Tensor, mse_n: Tensor,
                  weights: LossWeights = LossWeights()) -> Tensor:
    """beta * triplet + lambda * (mse_a + mse_p + mse_n)."""
    return triplet * weights.beta + (mse_a + mse_p + mse_n) * weights.lam


__all__ = ["LossWeights", "combined_loss", "mse", "soft_dice_loss", "triplet_loss"]
