"""Tests for the encoder, decoder, classifier and parameter files."""

from pathlib import Path

import numpy as np
import pytest

from sitar_lab.core.checkpoint import (
    CHECKPOINT_MAGIC,
    load_checkpoint,
    read_checkpoint_header,
    save_checkpoint,
)
from sitar_lab.core.errors import ContainerFormatError, NonFiniteError, ShapeError
from sitar_lab.core.networks import build_model, reparameterize
from sitar_lab.core.tensor import Tensor, backward, fd_gradient


class TestModelShapes:
    """Forward shapes of the three networks."""

    def test_encode_decode_classify(self, tiny_model, rng):
        """Images map to m-dim posteriors and back to images of the input shape."""
        x = rng.random((5, 3, 8, 8))
        mu, log_var = tiny_model.encode(x)
        assert mu.shape == (5, 3)
        assert log_var.shape == (5, 3)
        assert tiny_model.decode(mu).shape == (5, 3, 8, 8)
        assert tiny_model.classify(mu).shape == (5, 2)

    def test_default_colormnist_stack(self):
        """The default model takes 3×28×28 inputs to a 10-dim latent."""
        model = build_model(np.random.default_rng(0))
        mu, _ = model.encode(np.zeros((1, 3, 28, 28)))
        assert mu.shape == (1, 10)
        assert model.decode(mu).shape == (1, 3, 28, 28)

    def test_deeper_backbone(self):
        """More conv widths give a deeper encoder on larger inputs."""
        model = build_model(
            np.random.default_rng(0), image_shape=(3, 16, 16), conv_channels=(4, 4, 8)
        )
        assert len(model.encoder.convs) == 3
        assert model.decode(np.zeros((2, 10))).shape == (2, 3, 16, 16)

    def test_indivisible_image_rejected(self):
        """Spatial size must halve cleanly at every layer."""
        with pytest.raises(ShapeError, match="divisible"):
            build_model(np.random.default_rng(0), image_shape=(3, 10, 10))

    def test_wrong_image_shape_rejected(self, tiny_model):
        """encode checks the per-example shape."""
        with pytest.raises(ShapeError, match="encode"):
            tiny_model.encode(np.zeros((1, 1, 8, 8)))

    def test_non_finite_activation_names_layer(self, tiny_model):
        """A diverged parameter is reported with the first layer it poisons."""
        tiny_model.encoder.convs[0].bias.data[0] = np.inf
        with pytest.raises(NonFiniteError, match="encoder.conv0"):
            tiny_model.encode(np.zeros((1, 3, 8, 8)))

    def test_prior_samples(self, tiny_model, rng):
        """Prior samples decode to image-shaped tensors."""
        assert tiny_model.sample_prior(4, rng).shape == (4, 3, 8, 8)


class TestReparameterize:
    """The reparameterisation trick."""

    def test_sample_formula(self, rng):
        """z = mu + exp(log_var / 2) * eps with the recorded eps."""
        mu = Tensor(rng.standard_normal((4, 3)))
        log_var = Tensor(rng.standard_normal((4, 3)))
        batch = reparameterize(mu, log_var, np.random.default_rng(5))
        np.testing.assert_allclose(
            batch.z.data, mu.data + np.exp(0.5 * log_var.data) * batch.eps
        )
        np.testing.assert_array_equal(
            batch.eps, np.random.default_rng(5).standard_normal((4, 3))
        )

    def test_gradients_reach_mean_and_variance(self, rng):
        """dz/dmu = 1 and dz/dlog_var = 0.5 * sigma * eps."""
        mu = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        log_var = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        batch = reparameterize(mu, log_var, rng)
        backward(batch.z.sum())
        np.testing.assert_allclose(mu.grad, np.ones((2, 3)))
        np.testing.assert_allclose(
            log_var.grad, 0.5 * np.exp(0.5 * log_var.data) * batch.eps
        )


class TestParameters:
    """Named parameters and state round trips."""

    def test_parameter_names(self, tiny_model):
        """Names follow network.layer.kind."""
        names = [name for name, _ in tiny_model.named_parameters()]
        assert names[0] == "encoder.conv0.weight"
        assert "decoder.project.weight" in names
        assert names[-1] == "classifier.output.bias"
        assert len(names) == len(set(names))

    def test_classifier_gradient_matches_finite_difference(self, tiny_model, rng):
        """Backprop through the classifier agrees with finite differences."""
        z = rng.standard_normal((4, 3))
        weight = tiny_model.classifier.hidden.weight

        def loss_at(values):
            original = weight.data
            weight.data = values
            try:
                return tiny_model.classify(z).square().sum().item()
            finally:
                weight.data = original

        tiny_model.zero_grad()
        backward(tiny_model.classify(z).square().sum())
        numeric = fd_gradient(loss_at, weight.data)
        np.testing.assert_allclose(weight.grad, numeric, rtol=1e-5, atol=1e-7)

    def test_state_dict_restores_outputs(self, tiny_model, tiny_config, rng):
        """Loading a state dict into a fresh model reproduces its outputs."""
        x = rng.random((2, 3, 8, 8))
        other = build_model(
            np.random.default_rng(99),
            image_shape=(3, 8, 8),
            latent_dim=3,
            conv_channels=tiny_config.conv_channels,
            hidden_units=tiny_config.hidden_units,
        )
        other.load_state_dict(tiny_model.state_dict())
        np.testing.assert_array_equal(
            other.encode(x)[0].data, tiny_model.encode(x)[0].data
        )

    def test_state_dict_mismatch(self, tiny_model):
        """Missing names and wrong shapes are both rejected."""
        state = tiny_model.state_dict()
        state.pop("classifier.output.bias")
        with pytest.raises(ContainerFormatError, match="missing"):
            tiny_model.load_state_dict(state)
        state = tiny_model.state_dict()
        state["classifier.output.bias"] = np.zeros(5)
        with pytest.raises(ShapeError):
            tiny_model.load_state_dict(state)


def _garble_header(raw: bytes) -> bytes:
    length = int.from_bytes(raw[12:16], "little")
    return raw[:16] + b"{" * length + raw[16 + length :]


class TestCheckpointFile:
    """The binary parameter file."""

    def test_save_and_load(self, tiny_model, tmp_path: Path):
        """Tensors, order and metadata survive a write and read."""
        path = save_checkpoint(
            tmp_path / "ckpt.bin", tiny_model.state_dict(), metadata={"epoch": "3"}
        )
        tensors, metadata = load_checkpoint(path)
        assert list(tensors) == [n for n, _ in tiny_model.named_parameters()]
        for name, value in tiny_model.state_dict().items():
            np.testing.assert_array_equal(tensors[name], value)
        assert metadata == {"epoch": "3"}

    def test_header_layout(self, tmp_path: Path):
        """The file starts with the magic and a JSON header."""
        path = save_checkpoint(tmp_path / "c.bin", {"w": np.ones((2, 2))})
        raw = path.read_bytes()
        assert raw[:8] == CHECKPOINT_MAGIC
        header, offset = read_checkpoint_header(raw)
        assert header.tensors[0].shape == [2, 2]
        assert len(raw) - offset == 4 * 8

    @pytest.mark.parametrize(
        "corrupt, message",
        [
            (lambda raw: b"NOTACKPT" + raw[8:], "magic"),
            (lambda raw: raw[:-8], "truncated"),
            (lambda raw: raw + b"\x00", "trailing"),
            (_garble_header, "invalid checkpoint header"),
        ],
    )
    def test_corrupt_files_rejected(self, tmp_path: Path, corrupt, message):
        """Bad magic, truncation and trailing bytes are format errors."""
        path = save_checkpoint(tmp_path / "c.bin", {"w": np.arange(6.0)})
        path.write_bytes(corrupt(path.read_bytes()))
        with pytest.raises(ContainerFormatError, match=message):
            load_checkpoint(path)
