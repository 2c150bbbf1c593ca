"""
Encoder, decoder and classifier of the shortcut-invariant VAE.

The default stack matches the small ColorMNIST model: two strided convolutions
(kernel 4, stride 2, padding 1) with ReLU, then two affine heads for the latent
mean and log-variance. The decoder mirrors it with transposed convolutions and
leaves its output unsquashed. The classifier is a one-hidden-layer MLP.

A deeper backbone is obtained by passing more ``conv_channels``; for example
``(32, 32, 64, 128)`` on 64×64 inputs gives a 4-layer encoder reaching 4×4.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import ContainerFormatError, NonFiniteError, ShapeError
from .tensor import Array, Tensor, conv2d, conv_transpose2d, relu, reshape

logger = logging.getLogger(__name__)

KERNEL = 4
STRIDE = 2
PADDING = 1


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Array:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Affine:
    """``x @ weight + bias`` with weight shaped in×out."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int) -> "Affine":
        return cls(
            Tensor(_he_uniform(rng, (n_in, n_out), n_in), requires_grad=True),
            Tensor(np.zeros(n_out), requires_grad=True),
        )

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


@dataclass
class ConvLayer:
    """One strided convolution; ``transposed`` layers upsample instead."""

    weight: Tensor
    bias: Tensor
    transposed: bool = False

    @classmethod
    def init(
        cls, rng: np.random.Generator, c_in: int, c_out: int, transposed: bool = False
    ) -> "ConvLayer":
        fan_in = c_in * KERNEL * KERNEL
        shape = (c_in, c_out, KERNEL, KERNEL) if transposed else (c_out, c_in, KERNEL, KERNEL)
        return cls(
            Tensor(_he_uniform(rng, shape, fan_in), requires_grad=True),
            Tensor(np.zeros(c_out), requires_grad=True),
            transposed,
        )

    def __call__(self, x: Tensor) -> Tensor:
        op = conv_transpose2d if self.transposed else conv2d
        return op(x, self.weight, self.bias, stride=STRIDE, padding=PADDING)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


@dataclass
class Encoder:
    """Convolutional stack plus mean / log-variance heads."""

    convs: list[ConvLayer]
    mu_head: Affine
    log_var_head: Affine

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = x
        for i, conv in enumerate(self.convs):
            h = relu(conv(h))
            _check_finite(h, f"encoder.conv{i}")
        flat = reshape(h, (h.shape[0], -1))
        mu = self.mu_head(flat)
        _check_finite(mu, "encoder.mu_head")
        log_var = self.log_var_head(flat)
        _check_finite(log_var, "encoder.log_var_head")
        return mu, log_var

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, conv in enumerate(self.convs):
            yield from conv.named_parameters(f"encoder.conv{i}")
        yield from self.mu_head.named_parameters("encoder.mu_head")
        yield from self.log_var_head.named_parameters("encoder.log_var_head")


@dataclass
class Decoder:
    """Affine projection followed by mirrored transposed convolutions."""

    project: Affine
    deconvs: list[ConvLayer]
    seed_shape: tuple[int, int, int]

    def __call__(self, z: Tensor) -> Tensor:
        h = relu(self.project(z))
        h = reshape(h, (z.shape[0], *self.seed_shape))
        last = len(self.deconvs) - 1
        for i, deconv in enumerate(self.deconvs):
            h = deconv(h)
            if i < last:
                h = relu(h)
        return h

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.project.named_parameters("decoder.project")
        for i, deconv in enumerate(self.deconvs):
            yield from deconv.named_parameters(f"decoder.deconv{i}")


@dataclass
class Classifier:
    """affine(m→hidden) → ReLU → affine(hidden→C)."""

    hidden: Affine
    output: Affine

    def __call__(self, z: Tensor) -> Tensor:
        return self.output(relu(self.hidden(z)))

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.hidden.named_parameters("classifier.hidden")
        yield from self.output.named_parameters("classifier.output")


@dataclass
class LatentBatch:
    """Posterior parameters and one reparameterised sample per example."""

    mu: Tensor
    log_var: Tensor
    z: Tensor
    eps: Array


@dataclass
class SitarModel:
    encoder: Encoder
    decoder: Decoder
    classifier: Classifier
    image_shape: tuple[int, int, int]
    latent_dim: int
    num_classes: int = 2

    def encode(self, x: Tensor | Array) -> tuple[Tensor, Tensor]:
        xt = x if isinstance(x, Tensor) else Tensor(x)
        if xt.ndim != 4 or xt.shape[1:] != self.image_shape:
            raise ShapeError("encode", xt.shape, detail=f"expected N×{self.image_shape}")
        return self.encoder(xt)

    def decode(self, z: Tensor | Array) -> Tensor:
        zt = z if isinstance(z, Tensor) else Tensor(z)
        if zt.ndim != 2 or zt.shape[1] != self.latent_dim:
            raise ShapeError("decode", zt.shape, detail=f"latent dim is {self.latent_dim}")
        return self.decoder(zt)

    def classify(self, z: Tensor | Array) -> Tensor:
        zt = z if isinstance(z, Tensor) else Tensor(z)
        if zt.shape[-1] != self.latent_dim:
            raise ShapeError("classify", zt.shape, detail=f"latent dim is {self.latent_dim}")
        return self.classifier(zt)

    def sample_prior(self, n: int, rng: np.random.Generator) -> Tensor:
        """Decode ``n`` codes drawn from the standard normal prior."""
        return self.decode(Tensor(rng.standard_normal((n, self.latent_dim))))

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [
            *self.encoder.named_parameters(),
            *self.decoder.named_parameters(),
            *self.classifier.named_parameters(),
        ]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, Array]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, Array]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise ContainerFormatError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError("load_state_dict", p.shape, value.shape, detail=name)
            p.data = value.copy()


def _check_finite(t: Tensor, layer: str) -> None:
    if not np.isfinite(t.data).all():
        raise NonFiniteError(f"{layer} produced non-finite activations")


def reparameterize(mu: Tensor, log_var: Tensor, rng: np.random.Generator) -> LatentBatch:
    """z = mu + exp(0.5 * log_var) ⊙ eps with eps ~ N(0, I) from ``rng``."""
    if mu.shape != log_var.shape:
        raise ShapeError("reparameterize", mu.shape, log_var.shape)
    eps = rng.standard_normal(mu.shape)
    sigma = (log_var * 0.5).exp()
    z = mu + sigma * Tensor(eps)
    return LatentBatch(mu=mu, log_var=log_var, z=z, eps=eps)


def build_model(
    rng: np.random.Generator,
    image_shape: Sequence[int] = (3, 28, 28),
    latent_dim: int = 10,
    conv_channels: Sequence[int] = (16, 32),
    hidden_units: int = 128,
    num_classes: int = 2,
) -> SitarModel:
    """Randomly initialise a model: He-uniform weights, zero biases."""
    channels, height, width = (int(s) for s in image_shape)
    depth = len(conv_channels)
    if depth < 1:
        raise ValueError("conv_channels must name at least one layer")
    factor = 2**depth
    if height % factor or width % factor:
        raise ShapeError(
            "build_model",
            (channels, height, width),
            detail=f"spatial extent must be divisible by {factor} for {depth} layers",
        )
    widths = [channels, *(int(c) for c in conv_channels)]
    seed_shape = (widths[-1], height // factor, width // factor)
    flat = int(np.prod(seed_shape))

    convs = [ConvLayer.init(rng, widths[i], widths[i + 1]) for i in range(depth)]
    encoder = Encoder(
        convs=convs,
        mu_head=Affine.init(rng, flat, latent_dim),
        log_var_head=Affine.init(rng, flat, latent_dim),
    )
    deconvs = [
        ConvLayer.init(rng, widths[i + 1], widths[i], transposed=True)
        for i in reversed(range(depth))
    ]
    decoder = Decoder(Affine.init(rng, latent_dim, flat), deconvs, seed_shape)
    classifier = Classifier(
        hidden=Affine.init(rng, latent_dim, hidden_units),
        output=Affine.init(rng, hidden_units, num_classes),
    )
    model = SitarModel(
        encoder=encoder,
        decoder=decoder,
        classifier=classifier,
        image_shape=(channels, height, width),
        latent_dim=latent_dim,
        num_classes=num_classes,
    )
    logger.debug(
        "Built model with %d parameter tensors (%d scalars)",
        len(model.named_parameters()),
        sum(p.size for p in model.parameters()),
    )
    return model
