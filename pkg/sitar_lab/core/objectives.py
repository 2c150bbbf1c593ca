"""
Loss terms of the joint objective.

``total_loss`` runs one step of the training procedure on a batch:

    encode -> reparameterize -> decode -> ELBO terms
    -> stop-grad mu -> shortcut scores v -> z̄ = z + alpha * v ⊙ e
    -> CE on f(z̄) + lambda * ||f(z) - f(z̄)||²

Every term is a per-batch mean. The reconstruction error is summed over pixels
and the KL divergence over latent dimensions before averaging.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.typing import ArrayLike

from ..config.settings import ExperimentConfig
from .errors import DatasetError, ShapeError
from .networks import LatentBatch, SitarModel, reparameterize
from .shortcut_proxy import ShortcutTracker, ShortcutWeights, correlation_weights, perturb
from .tensor import Array, Tensor, log_softmax, stop_gradient

logger = logging.getLogger(__name__)


class VaeTerms(NamedTuple):
    recon: Tensor
    kl: Tensor
    beta: float = 1.0

    @property
    def weighted(self) -> Tensor:
        """recon + beta * kl, the negative beta-ELBO."""
        return self.recon + self.kl * self.beta


@dataclass
class Batch:
    images: Array
    y: Array

    def __post_init__(self) -> None:
        if self.images.shape[0] != self.y.shape[0]:
            raise ShapeError("Batch", self.images.shape, self.y.shape)

    def __len__(self) -> int:
        return int(self.y.shape[0])


@dataclass
class LossBreakdown:
    """All terms of one evaluation of the joint objective."""

    recon: Tensor
    kl: Tensor
    robust_ce: Tensor
    consistency: Tensor
    total: Tensor
    beta: float
    lambda_cons: float
    weights: ShortcutWeights
    latents: LatentBatch

    def as_floats(self) -> dict[str, float]:
        return {
            "recon": self.recon.item(),
            "kl": self.kl.item(),
            "robust_ce": self.robust_ce.item(),
            "consistency": self.consistency.item(),
            "total": self.total.item(),
        }


def vae_loss(
    x: Tensor, x_hat: Tensor, mu: Tensor, log_var: Tensor, beta: float = 1.0
) -> VaeTerms:
    """Squared reconstruction error and KL(N(mu, diag σ²) || N(0, I)).

    Both terms are returned unweighted; ``beta`` is carried for ``weighted``.
    """
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    if x.shape != x_hat.shape:
        raise ShapeError("vae_loss", x.shape, x_hat.shape, detail="reconstruction")
    if mu.shape != log_var.shape:
        raise ShapeError("vae_loss", mu.shape, log_var.shape, detail="posterior")
    n = x.shape[0]
    recon = (x - x_hat).square().reshape(n, -1).sum(axis=1).mean()
    kl_per_dim = mu.square() + log_var.exp() - 1.0 - log_var
    kl = (kl_per_dim.sum(axis=1) * 0.5).mean()
    return VaeTerms(recon, kl, beta)


def one_hot(y: ArrayLike, num_classes: int) -> Array:
    labels = np.asarray(y).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DatasetError(
            f"labels must lie in [0, {num_classes - 1}], got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    if not np.array_equal(labels, np.round(labels)):
        raise DatasetError("labels must be integers")
    return np.eye(num_classes)[labels.astype(np.int64)]


def robust_ce(logits_bar: Tensor, y: ArrayLike) -> Tensor:
    """Mean softmax cross-entropy of the logits at the perturbed latent."""
    logits = logits_bar if logits_bar.ndim == 2 else logits_bar.reshape(1, -1)
    targets = one_hot(y, logits.shape[1])
    if targets.shape[0] != logits.shape[0]:
        raise ShapeError("robust_ce", logits.shape, targets.shape)
    return -(Tensor(targets) * log_softmax(logits)).sum(axis=1).mean()


def consistency_loss(logits_clean: Tensor, logits_bar: Tensor) -> Tensor:
    """Mean squared L2 distance between logit vectors; gradients reach both."""
    if logits_clean.shape != logits_bar.shape:
        raise ShapeError("consistency_loss", logits_clean.shape, logits_bar.shape)
    diff = logits_clean - logits_bar
    if diff.ndim == 1:
        return diff.square().sum()
    return diff.square().sum(axis=-1).mean()


def total_loss(
    batch: Batch,
    model: SitarModel,
    config: ExperimentConfig,
    rng: np.random.Generator,
    tracker: ShortcutTracker | None = None,
) -> LossBreakdown:
    """Joint VAE + classifier objective on one batch.

    Draws the reparameterisation noise first, then the perturbation noise.
    """
    x = Tensor(batch.images)
    mu, log_var = model.encode(x)
    latents = reparameterize(mu, log_var, rng)
    x_hat = model.decode(latents.z)
    vae = vae_loss(x, x_hat, mu, log_var, config.beta)

    mu_sg = stop_gradient(mu)
    if tracker is not None:
        weights = tracker.update(mu_sg, batch.y)
    else:
        weights = correlation_weights(
            mu_sg, batch.y, balanced=config.balanced_correlation
        )
    z_bar = perturb(latents.z, weights, config.alpha, rng, config.isotropic)

    logits_clean = model.classify(latents.z)
    logits_bar = model.classify(z_bar)
    ce = robust_ce(logits_bar, batch.y)
    cons = consistency_loss(logits_clean, logits_bar)
    total = vae.weighted + ce + cons * config.lambda_cons
    return LossBreakdown(
        recon=vae.recon,
        kl=vae.kl,
        robust_ce=ce,
        consistency=cons,
        total=total,
        beta=config.beta,
        lambda_cons=config.lambda_cons,
        weights=weights,
        latents=latents,
    )
