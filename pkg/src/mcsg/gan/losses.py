"""Adversarial objectives and regularizers."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F


def minimax_value(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """Literal two-player value ``E[log D(real)] + E[log(1 - D(fake))]`` with D = sigmoid(logit)."""
    return F.logsigmoid(real_logits).mean() + F.logsigmoid(-fake_logits).mean()


def gan_losses(real_logits, fake_logits, mode: str = "nonsaturating"):
    """Return ``(loss_d, loss_g)``.

    ``nonsaturating`` (the training default) is the logistic loss with the
    non-saturating generator term.  ``minimax`` returns ``(-V, V)`` for the
    literal value ``V`` and is meant for verification only.
    """
    real_logits = torch.as_tensor(real_logits)
    fake_logits = torch.as_tensor(fake_logits)
    if mode == "nonsaturating":
        loss_d = F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()
        loss_g = F.softplus(-fake_logits).mean()
        return loss_d, loss_g
    if mode == "minimax":
        v = minimax_value(real_logits, fake_logits)
        return -v, v
    raise ValueError(f"unknown loss mode {mode!r}")


def r1_penalty(discriminator, real: torch.Tensor, gamma: float, cond=None, return_logits=False):
    """``gamma / 2`` times the batch-mean squared gradient norm of the logit w.r.t. real inputs."""
    real = real.detach().requires_grad_(True)
    logits = discriminator(real, cond) if cond is not None else discriminator(real)
    if gamma == 0:
        penalty = logits.new_zeros([])
    else:
        (grad,) = torch.autograd.grad(logits.sum(), real, create_graph=True, allow_unused=True)
        if grad is None:
            penalty = logits.new_zeros([])
        else:
            penalty = grad.square().flatten(1).sum(1).mean() * (gamma / 2)
    return (penalty, logits) if return_logits else penalty


def path_length_penalty(generator, z, cond, pl_mean: torch.Tensor, decay=0.01, generator_rng=None):
    """Path-length regularizer; returns ``(penalty, new_pl_mean)``."""
    img, ws = generator(z, cond, return_ws=True, generator=generator_rng)
    noise = torch.randn(img.shape, generator=generator_rng, dtype=img.dtype) / math.sqrt(
        img.shape[2] * img.shape[3]
    )
    (grad,) = torch.autograd.grad((img * noise).sum(), ws, create_graph=True)
    lengths = grad.square().sum(2).mean(1).sqrt()
    new_mean = pl_mean.lerp(lengths.mean().detach(), decay)
    return (lengths - new_mean).square().mean(), new_mean
