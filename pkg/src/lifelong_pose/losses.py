"""Training objectives of the adaptation game and the 2D pose critic.

Batched torch: 3D poses ``(B, J, 3)``, 2D poses ``(B, J, 2)``.
Reductions are means over joints and coordinates per sample, then over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .substrate import MLP, register

PENALTY_MODES = ("standard-gp", "as-written")


class SkeletonMismatch(ValueError):
    pass


class ZeroNormPose(ValueError):
    pass


@dataclass
class LossWeights:
    alpha: float = 0.35
    beta: float = 2.5
    gamma: float = 2.5
    penalty_mode: str = "standard-gp"
    swap_critic_sign: bool = False

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.penalty_mode not in PENALTY_MODES:
            raise ValueError(f"penalty_mode must be one of {PENALTY_MODES}")


@register("discriminator")
class Discriminator(MLP):
    """Flattened 2D pose -> scalar critic score."""

    def __init__(self, joints=16, hidden=(128, 128), activation="leaky_relu", gen=None, zero_last=False):
        super().__init__([joints * 2, *hidden, 1], activation, gen=gen, zero_last=zero_last)
        self.descriptor = {"kind": "discriminator", "joints": joints, "hidden": list(hidden), "activation": activation}

    def forward(self, x):
        return super().forward(x.flatten(-2)).squeeze(-1)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise SkeletonMismatch(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_3d(y_hat, y_tilde):
    """MSE plus the feedback term |1 - exp(mean |y_hat - y_tilde|)|."""
    _same_shape(y_hat, y_tilde)
    diff = y_hat - y_tilde
    mse = torch.mean(diff**2)
    l1 = diff.abs().flatten(1).mean(dim=1)
    return mse + torch.mean(torch.abs(1.0 - torch.exp(l1)))


def loss_2d(x, x_tilde):
    """MSE plus the l1 distance between Frobenius-normalised poses."""
    _same_shape(x, x_tilde)
    nx = torch.linalg.vector_norm(x.flatten(1), dim=1)
    nt = torch.linalg.vector_norm(x_tilde.flatten(1), dim=1)
    if torch.any(nx == 0) or torch.any(nt == 0):
        raise ZeroNormPose("2D pose with zero norm")
    mse = torch.mean((x - x_tilde) ** 2)
    shape = (-1,) + (1,) * (x.ndim - 1)
    normed = (x / nx.reshape(shape) - x_tilde / nt.reshape(shape)).abs().flatten(1).mean(dim=1)
    return mse + normed.mean()


def interpolation_weights(batch: int, gen: torch.Generator | None, dtype=torch.float64):
    return torch.rand(batch, generator=gen, dtype=dtype)


def loss_dis(x, x_tilde, critic, weights: LossWeights, gen: torch.Generator | None = None, eps=None):
    """Critic gap on real vs augmented 2D poses plus the gradient penalty at interpolates.

    ``eps`` (one weight per batch element) overrides the draw from ``gen``.
    """
    _same_shape(x, x_tilde)
    gap = critic(x).mean() - critic(x_tilde).mean()
    if weights.swap_critic_sign:
        gap = -gap
    if eps is None:
        eps = interpolation_weights(x.shape[0], gen, x.dtype)
    e = eps.reshape((-1,) + (1,) * (x.ndim - 1))
    k = e * x + (1 - e) * x_tilde
    if not k.requires_grad:
        k = k.detach().requires_grad_(True)
    (grad_k,) = torch.autograd.grad(critic(k).sum(), k, create_graph=True, allow_unused=True)
    if grad_k is None:
        grad_k = torch.zeros_like(k)
    norm = torch.linalg.vector_norm(grad_k.flatten(1), dim=1)
    if weights.penalty_mode == "as-written":
        penalty = torch.mean(1.0 - norm)
    else:
        penalty = torch.mean((norm - 1.0) ** 2)
    return gap + weights.alpha * penalty


def loss_generator(y_hat, y_tilde, x, x_tilde, critic, weights: LossWeights, gen=None, eps=None):
    return loss_3d(y_hat, y_tilde) - weights.beta * loss_dis(x, x_tilde, critic, weights, gen, eps)


def loss_estimator_discriminator(x, x_tilde, critic, weights: LossWeights, gen=None, eps=None):
    return loss_2d(x, x_tilde) + weights.gamma * loss_dis(x, x_tilde, critic, weights, gen, eps)
