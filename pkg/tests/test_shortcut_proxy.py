"""Tests for shortcut scores and the targeted perturbation."""

import logging
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sitar_lab.core.errors import DatasetError, ShapeError
from sitar_lab.core.shortcut_proxy import (
    ShortcutTracker,
    append_v_trajectory,
    correlation_weights,
    perturb,
)
from sitar_lab.core.tensor import Tensor, backward


class TestCorrelationWeights:
    """|Pearson| per latent dimension."""

    def test_shortcut_dimension_scores_highest(self, rng):
        """A coordinate that copies the label scores near 1, noise near 0."""
        y = np.tile([0.0, 1.0], 500)
        mu = np.stack([y * 3.0 - 1.0, rng.standard_normal(1000)], axis=1)
        weights = correlation_weights(mu, y)
        assert weights.v[0] == pytest.approx(1.0, abs=1e-6)
        assert weights.v[1] < 0.15
        assert not weights.degenerate

    def test_matches_numpy_corrcoef(self, rng):
        """Unweighted scores equal |corrcoef| up to the epsilon damping."""
        y = (rng.random(64) < 0.4).astype(np.float64)
        mu = rng.standard_normal((64, 3)) + y[:, None] * np.array([0.5, 0.0, -2.0])
        expected = [abs(np.corrcoef(mu[:, j], y)[0, 1]) for j in range(3)]
        np.testing.assert_allclose(correlation_weights(mu, y).v, expected, atol=1e-6)

    def test_hand_computed_example(self):
        """Four points with a linear trend and a label-independent column."""
        mu = np.array([[1.0, 0.0], [2.0, 1.0], [3.0, 0.0], [4.0, 1.0]])
        v = correlation_weights(mu, [0, 0, 1, 1]).v
        np.testing.assert_allclose(v, [0.8944, 0.0], atol=1e-4)

    @settings(max_examples=40, deadline=None)
    @given(
        st.integers(min_value=0, max_value=2**32 - 1),
        st.floats(min_value=0.1, max_value=10.0),
        st.floats(min_value=-5.0, max_value=5.0),
        st.booleans(),
    )
    def test_invariances(self, seed, scale, shift, negate):
        """Scores ignore affine rescaling, row order and which class is labelled 1."""
        gen = np.random.default_rng(seed)
        y = gen.permutation(np.arange(24) % 2).astype(np.float64)
        mu = gen.standard_normal((24, 3)) + y[:, None] * np.array([1.5, 0.0, -0.7])
        base = correlation_weights(mu, y).v

        factor = -scale if negate else scale
        np.testing.assert_allclose(
            correlation_weights(mu * factor + shift, y).v, base, rtol=1e-9, atol=1e-12
        )
        order = gen.permutation(24)
        np.testing.assert_allclose(
            correlation_weights(mu[order], y[order]).v, base, rtol=1e-9, atol=1e-12
        )
        np.testing.assert_allclose(
            correlation_weights(mu, 1.0 - y).v, base, rtol=1e-9, atol=1e-12
        )

    def test_scores_are_detached(self):
        """Gradients through a perturbed latent never reach the scores."""
        y = np.array([0.0, 1.0, 0.0, 1.0])
        mu = Tensor(np.c_[y * 2.0, np.array([0.3, -0.1, 0.4, 0.2])], requires_grad=True)
        weights = correlation_weights(mu, y)
        assert isinstance(weights.v, np.ndarray)
        assert not weights.as_tensor().requires_grad
        backward(perturb(mu, weights, 1.0, np.random.default_rng(0)).sum())
        np.testing.assert_array_equal(mu.grad, np.ones((4, 2)))

    def test_constant_column_scores_zero(self):
        """A constant latent coordinate has no correlation."""
        y = np.array([0.0, 1.0, 0.0, 1.0])
        mu = np.array([[2.0, 0.0], [2.0, 1.0], [2.0, 0.1], [2.0, 0.9]])
        assert correlation_weights(mu, y).v[0] == 0.0

    def test_single_label_batch_is_degenerate(self, caplog):
        """All-equal labels give zero scores, a flag and a warning."""
        with caplog.at_level(logging.WARNING):
            weights = correlation_weights(np.arange(6.0).reshape(3, 2), [1, 1, 1])
        np.testing.assert_array_equal(weights.v, [0.0, 0.0])
        assert weights.degenerate
        assert "Single-label batch" in caplog.text

    def test_balanced_mode_differs_on_skewed_batches(self, rng):
        """Per-class reweighting changes the score when classes are imbalanced."""
        y = np.r_[np.zeros(90), np.ones(10)]
        mu = rng.standard_normal((100, 1)) + y[:, None]
        plain = correlation_weights(mu, y).v[0]
        balanced = correlation_weights(mu, y, balanced=True).v[0]
        assert balanced > plain

    def test_preconditions(self):
        """Small batches, non-binary labels and bad shapes are rejected."""
        with pytest.raises(DatasetError, match="at least 2"):
            correlation_weights(np.zeros((1, 2)), [1])
        with pytest.raises(DatasetError, match="binary"):
            correlation_weights(np.zeros((3, 2)), [0, 1, 2])
        with pytest.raises(ShapeError):
            correlation_weights(np.zeros((3, 2)), [0, 1])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(min_value=0, max_value=2**32 - 1))
    def test_scores_lie_in_unit_interval(self, seed):
        """Scores are always within [0, 1]."""
        gen = np.random.default_rng(seed)
        y = (gen.random(20) < 0.5).astype(np.float64)
        v = correlation_weights(gen.standard_normal((20, 4)) * 10, y).v
        assert np.all((v >= 0.0) & (v <= 1.0))


class TestShortcutTracker:
    """Moving-average scores across batches."""

    def test_zero_momentum_keeps_batch_value(self):
        """Momentum 0 returns each batch's own scores."""
        tracker = ShortcutTracker()
        y = np.array([0.0, 1.0, 0.0, 1.0])
        first = tracker.update(np.c_[y, np.zeros(4)], y).v
        second = tracker.update(np.c_[np.zeros(4), y], y).v
        np.testing.assert_allclose(first, [1.0, 0.0], atol=1e-6)
        np.testing.assert_allclose(second, [0.0, 1.0], atol=1e-6)

    def test_momentum_blends(self):
        """v <- momentum * v + (1 - momentum) * batch."""
        tracker = ShortcutTracker(momentum=0.5)
        y = np.array([0.0, 1.0, 0.0, 1.0])
        tracker.update(np.c_[y, np.zeros(4)], y)
        blended = tracker.update(np.c_[np.zeros(4), y], y).v
        np.testing.assert_allclose(blended, [0.5, 0.5], atol=1e-6)

    def test_invalid_momentum(self):
        """Momentum must lie in [0, 1)."""
        with pytest.raises(ValueError):
            ShortcutTracker(momentum=1.0)


class TestPerturb:
    """z̄ = z + alpha * v ⊙ e."""

    def test_noise_scale_follows_scores(self):
        """Per-dimension spread is alpha * v_j."""
        z = Tensor(np.zeros((20000, 3)))
        out = perturb(z, np.array([1.0, 0.5, 0.0]), 2.0, np.random.default_rng(0))
        np.testing.assert_allclose(out.data.std(axis=0), [2.0, 1.0, 0.0], atol=0.05)

    def test_noise_covariance(self):
        """Cov(z̄ - z) is alpha² diag(v²), off-diagonal terms included."""
        alpha, v = 1.5, np.array([0.9, 0.4, 0.1])
        z = Tensor(np.ones((100_000, 3)))
        delta = perturb(z, v, alpha, np.random.default_rng(2)).data - z.data
        cov = np.cov(delta, rowvar=False)
        expected = alpha**2 * np.diag(v**2)
        np.testing.assert_allclose(np.diag(cov), np.diag(expected), rtol=0.03)
        off_diagonal = cov - np.diag(np.diag(cov))
        np.testing.assert_allclose(off_diagonal, 0.0, atol=0.01)

    def test_isotropic_ignores_scores(self):
        """The isotropic ablation uses unit scales in every dimension."""
        z = Tensor(np.zeros((20000, 2)))
        out = perturb(z, [0.0, 0.0], 1.0, np.random.default_rng(0), isotropic=True)
        np.testing.assert_allclose(out.data.std(axis=0), [1.0, 1.0], atol=0.05)

    def test_zero_alpha_still_draws(self):
        """alpha = 0 leaves z unchanged but advances the stream."""
        gen = np.random.default_rng(3)
        z = Tensor(np.ones((2, 2)))
        out = perturb(z, [1.0, 1.0], 0.0, gen)
        np.testing.assert_array_equal(out.data, z.data)
        reference = np.random.default_rng(3)
        reference.standard_normal((2, 2))
        assert gen.random() == reference.random()

    def test_gradient_passes_to_z(self):
        """The perturbed latent stays differentiable in z."""
        z = Tensor(np.zeros((2, 2)), requires_grad=True)
        out = perturb(z, [1.0, 1.0], 1.0, np.random.default_rng(0))
        assert out.requires_grad

    def test_rejects_negative_alpha_and_bad_shape(self):
        """alpha must be non-negative and v must have one entry per dimension."""
        z = Tensor(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            perturb(z, [1.0, 1.0, 1.0], -0.1, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            perturb(z, [1.0, 1.0], 0.1, np.random.default_rng(0))


class TestTrajectoryFile:
    """Per-epoch score log."""

    def test_header_written_once(self, tmp_path: Path):
        """The first append writes the header; later ones only rows."""
        path = tmp_path / "v.csv"
        append_v_trajectory(path, 1, [0.1, 0.2])
        append_v_trajectory(path, 2, [0.3, 0.4])
        lines = path.read_text().splitlines()
        assert lines == ["epoch,v1,v2", "1,0.100000,0.200000", "2,0.300000,0.400000"]
