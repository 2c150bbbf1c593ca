"""Tests for the loss terms and the joint objective."""

import math

import numpy as np
import pytest

from sitar_lab.core.errors import DatasetError, ShapeError
from sitar_lab.core.networks import reparameterize
from sitar_lab.core.objectives import (
    Batch,
    consistency_loss,
    one_hot,
    robust_ce,
    total_loss,
    vae_loss,
)
from sitar_lab.core.tensor import Tensor, backward, fd_gradient


def _batch(splits, n=16):
    train = next(iter(splits.values()))
    index = np.arange(n)
    return Batch(train.batch_images(index), train.y[index].astype(np.float64))


class TestVaeLoss:
    """Reconstruction and KL terms."""

    def test_zero_posterior_has_zero_kl(self):
        """mu = 0 and log_var = 0 is the prior itself."""
        x = Tensor(np.ones((2, 1, 2, 2)))
        terms = vae_loss(x, x, Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
        assert terms.recon.item() == 0.0
        assert terms.kl.item() == 0.0

    def test_values(self):
        """Squared error is summed over pixels and averaged over the batch."""
        x = Tensor(np.zeros((2, 1, 2, 2)))
        x_hat = Tensor(np.ones((2, 1, 2, 2)))
        mu = Tensor(np.array([[1.0, 0.0], [0.0, 0.0]]))
        log_var = Tensor(np.array([[0.0, math.log(2.0)], [0.0, 0.0]]))
        terms = vae_loss(x, x_hat, mu, log_var)
        assert terms.recon.item() == pytest.approx(4.0)
        expected_kl = 0.5 * (1.0 + (2.0 - 1.0 - math.log(2.0))) / 2
        assert terms.kl.item() == pytest.approx(expected_kl)

    def test_beta_weights_only_the_kl(self):
        """Terms stay unweighted; the weighted sum is recon + beta * kl."""
        x = Tensor(np.zeros((1, 1, 2, 2)))
        mu = Tensor(np.array([[1.0, 0.0]]))
        log_var = Tensor(np.zeros((1, 2)))
        terms = vae_loss(x, x, mu, log_var, beta=4.0)
        assert terms.kl.item() == pytest.approx(0.5)
        assert terms.weighted.item() == pytest.approx(2.0)
        with pytest.raises(ValueError):
            vae_loss(x, x, mu, log_var, beta=-1.0)

    def test_kl_matches_monte_carlo(self):
        """The closed form agrees with E_q[log q - log p] over 10^6 samples within 1%."""
        mu = np.array([1.0, -0.5, 0.8, 0.3])
        log_var = np.array([0.2, -0.3, 0.1, -0.5])
        x = Tensor(np.zeros((1, 1, 1, 1)))
        kl = vae_loss(x, x, Tensor(mu[None]), Tensor(log_var[None])).kl.item()

        eps = np.random.default_rng(0).standard_normal((1_000_000, 4))
        z = mu + np.exp(0.5 * log_var) * eps
        log_ratio = 0.5 * (z**2 - eps**2 - log_var)
        assert log_ratio.sum(axis=1).mean() == pytest.approx(kl, rel=0.01)

    def test_shape_mismatch(self):
        """Reconstructions must match the input shape."""
        with pytest.raises(ShapeError, match="reconstruction"):
            vae_loss(
                Tensor(np.zeros((1, 3, 2, 2))),
                Tensor(np.zeros((1, 3, 4, 4))),
                Tensor(np.zeros((1, 2))),
                Tensor(np.zeros((1, 2))),
            )


class TestClassifierTerms:
    """Cross-entropy and the consistency penalty."""

    def test_uniform_logits_cost_log_two(self):
        """Equal logits give CE = log 2 for two classes."""
        ce = robust_ce(Tensor(np.zeros((3, 2))), [0, 1, 1])
        assert ce.item() == pytest.approx(math.log(2.0))

    def test_single_logit_vector(self):
        """A 1-D logit vector is treated as a batch of one."""
        ce = robust_ce(Tensor(np.array([2.0, 0.0])), [0])
        assert ce.item() == pytest.approx(math.log1p(math.exp(-2.0)))

    def test_one_hot_rejects_bad_labels(self):
        """Out-of-range and fractional labels are dataset errors."""
        with pytest.raises(DatasetError, match="lie in"):
            one_hot([0, 2], 2)
        with pytest.raises(DatasetError, match="integers"):
            one_hot([0.5], 2)

    def test_consistency_is_mean_squared_distance(self):
        """Squared L2 per row, averaged over rows; zero for identical logits."""
        a = Tensor(np.array([[1.0, 2.0], [0.0, 0.0]]))
        b = Tensor(np.array([[1.0, 0.0], [3.0, 4.0]]))
        assert consistency_loss(a, b).item() == pytest.approx((4.0 + 25.0) / 2)
        assert consistency_loss(a, a).item() == 0.0

    def test_consistency_gradient_reaches_both_sides(self):
        """The clean logits are not detached."""
        a = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
        b = Tensor(np.array([[0.0, 0.0]]), requires_grad=True)
        backward(consistency_loss(a, b))
        np.testing.assert_allclose(a.grad, [[2.0, 4.0]])
        np.testing.assert_allclose(b.grad, [[-2.0, -4.0]])


class TestTotalLoss:
    """The joint objective on one batch."""

    def test_total_is_weighted_sum(self, tiny_model, tiny_config, tiny_splits):
        """total = recon + beta*kl + ce + lambda*consistency."""
        loss = total_loss(
            _batch(tiny_splits), tiny_model, tiny_config, np.random.default_rng(0)
        )
        values = loss.as_floats()
        expected = (
            values["recon"]
            + tiny_config.beta * values["kl"]
            + values["robust_ce"]
            + tiny_config.lambda_cons * values["consistency"]
        )
        assert values["total"] == pytest.approx(expected)
        assert loss.weights.latent_dim == tiny_config.latent_dim
        assert np.all((loss.weights.v >= 0) & (loss.weights.v <= 1))

    def test_zero_alpha_has_no_consistency_cost(self, tiny_model, tiny_config, tiny_splits):
        """Without noise the perturbed latent equals the clean one."""
        config = tiny_config.model_copy(update={"alpha": 0.0})
        loss = total_loss(_batch(tiny_splits), tiny_model, config, np.random.default_rng(0))
        assert loss.consistency.item() == 0.0

    def test_noise_draw_order(self, tiny_model, tiny_config, tiny_splits):
        """Reparameterisation noise is drawn before the perturbation noise."""
        batch = _batch(tiny_splits)
        loss = total_loss(batch, tiny_model, tiny_config, np.random.default_rng(11))
        expected_eps = np.random.default_rng(11).standard_normal((len(batch), 3))
        np.testing.assert_array_equal(loss.latents.eps, expected_eps)

    def test_classifier_gradient_matches_finite_difference(
        self, tiny_model, tiny_config, tiny_splits
    ):
        """Backprop of the full objective agrees with central differences."""
        batch = _batch(tiny_splits, n=8)
        bias = tiny_model.classifier.output.bias

        def objective(values):
            original = bias.data
            bias.data = values
            try:
                return total_loss(
                    batch, tiny_model, tiny_config, np.random.default_rng(4)
                ).total.item()
            finally:
                bias.data = original

        tiny_model.zero_grad()
        backward(total_loss(batch, tiny_model, tiny_config, np.random.default_rng(4)).total)
        numeric = fd_gradient(objective, bias.data)
        np.testing.assert_allclose(bias.grad, numeric, rtol=1e-5, atol=1e-6)

    def test_every_parameter_receives_gradient(self, tiny_model, tiny_config, tiny_splits):
        """One backward pass reaches the encoder, decoder and classifier."""
        config = tiny_config.model_copy(update={"alpha": 0.0, "lambda_cons": 0.0})
        batch = _batch(tiny_splits)
        loss = total_loss(batch, tiny_model, config, np.random.default_rng(0))
        backward(loss.total)
        assert all(p.grad is not None for p in tiny_model.parameters())

    def test_zero_alpha_gradient_equals_erm_gradient(
        self, tiny_model, tiny_config, tiny_splits
    ):
        """With alpha = 0 and lambda > 0 the gradient is that of ELBO + CE on clean z."""
        config = tiny_config.model_copy(update={"alpha": 0.0, "lambda_cons": 5.0})
        batch = _batch(tiny_splits)

        tiny_model.zero_grad()
        backward(total_loss(batch, tiny_model, config, np.random.default_rng(9)).total)
        joint = {name: p.grad.copy() for name, p in tiny_model.named_parameters()}

        tiny_model.zero_grad()
        x = Tensor(batch.images)
        mu, log_var = tiny_model.encode(x)
        latents = reparameterize(mu, log_var, np.random.default_rng(9))
        vae = vae_loss(x, tiny_model.decode(latents.z), mu, log_var, config.beta)
        backward(vae.weighted + robust_ce(tiny_model.classify(latents.z), batch.y))

        for name, p in tiny_model.named_parameters():
            np.testing.assert_allclose(p.grad, joint[name], rtol=1e-10, atol=1e-12)
