"""Per-dimension shortcut scores and the anisotropic latent perturbation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Final

import numpy as np
from numpy.typing import ArrayLike

from .errors import DatasetError, ShapeError
from .tensor import Array, Tensor

logger = logging.getLogger(__name__)

PEARSON_EPS: Final[float] = 1e-8


@dataclass(frozen=True)
class ShortcutWeights:
    """Absolute latent/label correlations ``v``, one per latent dimension.

    ``v`` is a plain array: it never takes part in differentiation.
    ``degenerate`` marks batches that contained a single label.
    """

    v: Array
    batch_size: int
    eps: float = PEARSON_EPS
    degenerate: bool = False

    @property
    def latent_dim(self) -> int:
        return int(self.v.shape[0])

    def as_tensor(self) -> Tensor:
        return Tensor(self.v)


def _example_weights(y: Array, balanced: bool) -> Array:
    n = y.shape[0]
    if not balanced:
        return np.full(n, 1.0 / n)
    ones = float(y.sum())
    zeros = n - ones
    if ones == 0 or zeros == 0:
        return np.full(n, 1.0 / n)
    # each class carries half of the total weight
    return np.where(y == 1.0, 0.5 / ones, 0.5 / zeros)


def correlation_weights(
    mu: Tensor | ArrayLike,
    y: ArrayLike,
    balanced: bool = False,
    eps: float = PEARSON_EPS,
) -> ShortcutWeights:
    """|Pearson(mu_j, y)| per latent column, from a detached copy of ``mu``.

    Population moments; the latent variance is floored at ``eps`` and the label
    variance is damped by ``eps``. With ``balanced`` every example is weighted by
    1 / (2 * frequency of its class in the batch).
    """
    values = mu.data if isinstance(mu, Tensor) else np.asarray(mu, dtype=np.float64)
    labels = np.asarray(y, dtype=np.float64).reshape(-1)
    if values.ndim != 2 or values.shape[0] != labels.shape[0]:
        raise ShapeError("correlation_weights", values.shape, labels.shape)
    n = values.shape[0]
    if n < 2:
        raise DatasetError(f"correlation_weights needs a batch of at least 2, got {n}")
    if not np.isin(labels, (0.0, 1.0)).all():
        raise DatasetError("correlation_weights expects binary labels in {0, 1}")

    w = _example_weights(labels, balanced)
    mu_c = values - w @ values
    y_c = labels - w @ labels
    cov_xy = w @ (mu_c * y_c[:, None])
    var_x = w @ (mu_c * mu_c)
    var_y = float(w @ (y_c * y_c))
    r = cov_xy / (np.sqrt(np.maximum(var_x, eps)) * np.sqrt(var_y + eps))

    degenerate = bool(labels.min() == labels.max())
    if degenerate:
        logger.warning(
            "Single-label batch of %d examples: shortcut scores collapse to 0", n
        )
    return ShortcutWeights(v=np.abs(r), batch_size=n, eps=eps, degenerate=degenerate)


class ShortcutTracker:
    """Exponential moving average of batch scores; momentum 0 keeps the batch value."""

    def __init__(self, momentum: float = 0.0, balanced: bool = False) -> None:
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        self.momentum = momentum
        self.balanced = balanced
        self.current: Array | None = None

    def update(self, mu: Tensor | ArrayLike, y: ArrayLike) -> ShortcutWeights:
        batch = correlation_weights(mu, y, balanced=self.balanced)
        if self.current is None or self.momentum == 0.0:
            self.current = batch.v
        else:
            self.current = self.momentum * self.current + (1.0 - self.momentum) * batch.v
        return ShortcutWeights(
            v=self.current.copy(),
            batch_size=batch.batch_size,
            eps=batch.eps,
            degenerate=batch.degenerate,
        )


def perturb(
    z: Tensor,
    v: ShortcutWeights | ArrayLike,
    alpha: float,
    rng: np.random.Generator,
    isotropic: bool = False,
) -> Tensor:
    """z̄ = z + alpha * (v ⊙ e), e ~ N(0, I); ``isotropic`` replaces v by ones.

    Noise is always drawn, so the stream advances identically for every alpha.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    scores = v.v if isinstance(v, ShortcutWeights) else np.asarray(v, dtype=np.float64)
    if scores.shape != (z.shape[-1],):
        raise ShapeError("perturb", z.shape, scores.shape)
    if isotropic:
        scores = np.ones_like(scores)
    e = rng.standard_normal(z.shape)
    return z + Tensor(alpha * scores * e)


def append_v_trajectory(path: str | Path, epoch: int, v: ArrayLike) -> None:
    """Append one ``epoch,v1..vm`` row, writing the header on first use."""
    target = Path(path)
    values = np.asarray(v, dtype=np.float64).reshape(-1)
    new_file = not target.exists()
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(["epoch", *(f"v{j + 1}" for j in range(values.size))])
        writer.writerow([epoch, *(f"{x:.6f}" for x in values)])
