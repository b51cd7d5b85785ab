"""
Unit tests for the autoencoder forward pass, loss and gradients.
"""

import json
import math

import numpy as np
import pytest
from scipy import integrate, stats

from src.exceptions import ArtifactParseError, NumericError, ShapeMismatchError
from src.vae_core import (
    LAYER_NAMES,
    LayerParams,
    PosteriorParams,
    VaeParams,
    _tree_sum,
    decode,
    encode,
    kl_term,
    load_params,
    loss,
    loss_and_gradients,
    loss_gradients,
    params_from_dict,
    params_to_dict,
    reconstruct,
    recon_term,
    reparameterize,
    save_params,
)

LN2 = math.log(2.0)


def random_params(rng, latent_dim=3, hidden_dim=8, scale=0.5):
    params = VaeParams.zeros(latent_dim, hidden_dim)
    for name in LAYER_NAMES:
        layer = getattr(params, name)
        layer.weights[...] = rng.normal(0.0, scale, layer.weights.shape)
        layer.bias[...] = rng.normal(0.0, scale, layer.bias.shape)
    return params


def loop_affine(weights, bias, inputs):
    """Straightforward per-entry affine map used as an independent oracle."""
    out = []
    for i in range(weights.shape[0]):
        total = bias[i]
        for k in range(weights.shape[1]):
            total += weights[i, k] * inputs[k]
        out.append(total)
    return np.array(out)


def loop_encode(params, x):
    h = np.maximum(loop_affine(params.enc_hidden.weights, params.enc_hidden.bias, x), 0.0)
    head = loop_affine(params.enc_head.weights, params.enc_head.bias, h)
    j = params.latent_dim
    return head[:j], np.clip(head[j:], -20.0, 20.0)


def loop_decode(params, z):
    h = np.maximum(loop_affine(params.dec_hidden.weights, params.dec_hidden.bias, z), 0.0)
    logits = loop_affine(params.dec_out.weights, params.dec_out.bias, h)
    return np.array([1.0 / (1.0 + math.exp(-v)) for v in logits])


class TestVaeParams:
    """Test parameter containers."""

    def test_zeros_shapes(self):
        """Test layer shapes for J=3 and the default hidden size."""
        params = VaeParams.zeros(3)

        assert params.enc_hidden.shape == (512, 6)
        assert params.enc_head.shape == (6, 512)
        assert params.dec_hidden.shape == (512, 3)
        assert params.dec_out.shape == (6, 512)

    def test_inconsistent_shapes(self):
        """Test mismatched layers are rejected on construction."""
        good = VaeParams.zeros(2, 4)

        with pytest.raises(ShapeMismatchError, match="dec_hidden"):
            VaeParams(
                enc_hidden=good.enc_hidden,
                enc_head=good.enc_head,
                dec_hidden=LayerParams(np.zeros((4, 3)), np.zeros(4)),
                dec_out=good.dec_out,
                latent_dim=2,
                hidden_dim=4,
            )

    def test_copy_is_deep(self):
        """Test copies do not share arrays."""
        params = VaeParams.zeros(2, 4)
        clone = params.copy()
        clone.dec_out.bias[0] = 1.0

        assert params.dec_out.bias[0] == 0.0

    def test_norm(self):
        """Test the Euclidean norm over all entries."""
        params = VaeParams.zeros(1, 1)
        params.dec_out.bias[:] = [3.0, 4.0, 0, 0, 0, 0]

        assert params.norm() == 5.0


class TestEncode:
    """Test encode."""

    def test_zero_network(self):
        """Test all-zero params give mu = 0 and log_var = 0."""
        post = encode(VaeParams.zeros(3, 8), [0.2, 0.4, 1, 0, 1, 0])

        assert post.mu.tolist() == [0.0, 0.0, 0.0]
        assert post.log_var.tolist() == [0.0, 0.0, 0.0]

    def test_hand_wired_identity(self):
        """Test a single path wired so mu_1 = x_1."""
        params = VaeParams.zeros(2, 4)
        params.enc_hidden.weights[0, 0] = 1.0
        params.enc_head.weights[0, 0] = 1.0

        for x0 in (0.0, 0.25, 0.75, 1.0):
            assert encode(params, [x0, 0.3, 1, 1, 0, 0]).mu[0] == x0

    def test_matches_loop_oracle(self):
        """Test against the per-entry re-implementation."""
        rng = np.random.default_rng(0)
        for _ in range(10):
            params = random_params(rng)
            x = rng.random(6)
            mu, log_var = loop_encode(params, x)
            post = encode(params, x)

            np.testing.assert_allclose(post.mu, mu, rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(post.log_var, log_var, rtol=1e-12, atol=1e-12)

    def test_log_var_clamped(self):
        """Test log_var is clamped to [-20, 20]."""
        params = VaeParams.zeros(2, 4)
        params.enc_head.bias[:] = [0.0, 0.0, 35.0, -50.0]

        post = encode(params, np.zeros(6))

        assert post.log_var.tolist() == [20.0, -20.0]

    def test_batch_matches_rows(self):
        """Test a batch encodes like its rows."""
        rng = np.random.default_rng(1)
        params = random_params(rng)
        x = rng.random((4, 6))

        post = encode(params, x)

        for i in range(4):
            np.testing.assert_allclose(post.mu[i], encode(params, x[i]).mu, rtol=1e-14, atol=1e-14)

    def test_nan_params(self):
        """Test NaN parameters raise NumericError."""
        params = VaeParams.zeros(2, 4)
        params.enc_hidden.weights[0, 0] = np.nan

        with pytest.raises(NumericError):
            encode(params, np.zeros(6))

    def test_wrong_input_width(self):
        """Test inputs must have six features."""
        with pytest.raises(ShapeMismatchError):
            encode(VaeParams.zeros(2, 4), np.zeros(5))


class TestReparameterize:
    """Test reparameterize."""

    def test_zero_eps_returns_mu(self):
        """Test eps = 0 gives z = mu exactly."""
        post = PosteriorParams(np.array([0.3, -1.2, 4.0]), np.array([1.0, -3.0, 7.0]))

        assert reparameterize(post, np.zeros(3)).tolist() == [0.3, -1.2, 4.0]

    def test_unit_sigma(self):
        """Test log_var = 0 gives z = mu + eps."""
        post = PosteriorParams(np.array([1.0, 2.0]), np.zeros(2))

        assert reparameterize(post, [0.5, -0.5]).tolist() == [1.5, 1.5]

    def test_sigma_two(self):
        """Test log_var = 2 ln 2 scales eps by 2."""
        post = PosteriorParams(np.zeros(1), np.array([2 * LN2]))

        assert reparameterize(post, [1.0])[0] == pytest.approx(2.0, abs=1e-12)

    def test_shape_mismatch(self):
        """Test eps must match the posterior shape."""
        post = PosteriorParams(np.zeros(2), np.zeros(2))

        with pytest.raises(ShapeMismatchError):
            reparameterize(post, np.zeros(3))


class TestDecode:
    """Test decode."""

    def test_zero_network(self):
        """Test all-zero params give 0.5 everywhere."""
        assert decode(VaeParams.zeros(3, 8), [1.0, -2.0, 0.5]).tolist() == [0.5] * 6

    def test_saturation(self):
        """Test a large positive output bias drives components to 1."""
        params = VaeParams.zeros(3, 8)
        params.dec_out.bias[:] = 50.0

        np.testing.assert_allclose(decode(params, np.zeros(3)), np.ones(6), atol=1e-9)

    def test_matches_loop_oracle(self):
        """Test against the per-entry re-implementation."""
        rng = np.random.default_rng(2)
        for _ in range(10):
            params = random_params(rng)
            z = rng.normal(size=3)

            np.testing.assert_allclose(
                decode(params, z), loop_decode(params, z), rtol=1e-12, atol=1e-12
            )

    def test_nan_latent(self):
        """Test NaN latents raise NumericError."""
        with pytest.raises(NumericError):
            decode(VaeParams.zeros(2, 4), [np.nan, 0.0])


class TestKlTerm:
    """Test the closed-form KL term."""

    def test_prior_posterior(self):
        """Test KL vanishes when the posterior equals the prior."""
        assert kl_term(PosteriorParams(np.zeros(3), np.zeros(3))) == 0.0

    def test_unit_mean_shift(self):
        """Test mu = [1, 0, 0], log_var = 0 gives 0.5."""
        assert kl_term(PosteriorParams(np.array([1.0, 0, 0]), np.zeros(3))) == pytest.approx(0.5)

    def test_matches_quadrature(self):
        """Test against numerically integrated KL per dimension."""
        rng = np.random.default_rng(3)
        for _ in range(5):
            mu = rng.uniform(-2, 2, 3)
            log_var = rng.uniform(-2, 2, 3)
            expected = 0.0
            for m, lv in zip(mu, log_var):
                sd = math.exp(lv / 2)
                q = stats.norm(m, sd)

                def integrand(z):
                    return q.pdf(z) * (q.logpdf(z) - stats.norm.logpdf(z))

                value, _ = integrate.quad(integrand, m - 12 * sd, m + 12 * sd, epsabs=1e-12)
                expected += value

            assert kl_term(PosteriorParams(mu, log_var)) == pytest.approx(expected, abs=1e-6)

    def test_non_negative(self):
        """Test KL is never negative."""
        rng = np.random.default_rng(4)
        kl = kl_term(PosteriorParams(rng.normal(0, 3, (200, 4)), rng.uniform(-20, 20, (200, 4))))

        assert kl.shape == (200,)
        assert np.all(kl >= 0)

    def test_zero_only_at_prior(self):
        """Test tiny deviations give tiny but non-negative KL."""
        kl = kl_term(PosteriorParams(np.zeros(2), np.array([1e-9, -1e-9])))

        assert 0.0 <= kl < 1e-12


class TestReconTerm:
    """Test the Bernoulli cross-entropy term."""

    def test_half(self):
        """Test x = xhat = 0.5 gives 6 ln 2."""
        assert recon_term([0.5] * 6, [0.5] * 6) == pytest.approx(6 * LN2, abs=1e-12)

    def test_near_perfect(self):
        """Test near-perfect reconstruction of ones."""
        value = recon_term([1.0] * 6, [1.0 - 1e-7] * 6)

        assert value == pytest.approx(6e-7, rel=1e-6)

    def test_clamp_prevents_infinity(self):
        """Test exact 0 / 1 predictions stay finite."""
        value = recon_term([1.0, 0.0, 1, 0, 1, 0], [0.0, 1.0, 0, 1, 0, 1])

        assert math.isfinite(value)
        assert value == pytest.approx(-6 * math.log(1e-7), rel=1e-9)

    def test_matches_summation_oracle(self):
        """Test against an explicit per-dimension sum."""
        rng = np.random.default_rng(5)
        x = rng.random(6)
        xhat = rng.uniform(0.01, 0.99, 6)

        expected = -sum(a * math.log(b) + (1 - a) * math.log(1 - b) for a, b in zip(x, xhat))

        assert recon_term(x, xhat) == pytest.approx(expected, abs=1e-12)

    def test_non_negative(self):
        """Test the term is non-negative for targets in [0, 1]."""
        rng = np.random.default_rng(6)

        assert np.all(recon_term(rng.random((100, 6)), rng.random((100, 6))) >= 0)


class TestLoss:
    """Test the total loss."""

    def test_zero_network(self):
        """Test all-zero params with x = 0.5 and eps = 0."""
        result = loss(VaeParams.zeros(3, 8), [0.5] * 6, np.zeros(3))

        assert result.kl == 0.0
        assert result.recon == pytest.approx(6 * LN2, abs=1e-12)
        assert result.total == pytest.approx(6 * LN2, abs=1e-12)

    def test_additivity(self):
        """Test total = kl + recon on random instances."""
        rng = np.random.default_rng(7)
        for _ in range(100):
            params = random_params(rng, hidden_dim=4)
            result = loss(params, rng.random(6), rng.normal(size=3))

            assert abs(result.total - (result.kl + result.recon)) <= 1e-9

    def test_matches_loop_oracle(self):
        """Test the composed loss against the per-entry re-implementation."""
        rng = np.random.default_rng(8)
        params = random_params(rng)
        x = rng.random(6)
        eps = rng.normal(size=3)

        mu, log_var = loop_encode(params, x)
        z = mu + np.exp(log_var / 2) * eps
        xhat = loop_decode(params, z)
        kl = -0.5 * sum(1 + lv - m * m - math.exp(lv) for m, lv in zip(mu, log_var))
        recon = -sum(a * math.log(b) + (1 - a) * math.log(1 - b) for a, b in zip(x, xhat))

        result = loss(params, x, eps)
        assert result.kl == pytest.approx(kl, abs=1e-12)
        assert result.recon == pytest.approx(recon, abs=1e-12)

    def test_batch_is_mean(self):
        """Test a batch loss is the mean of the per-row losses."""
        rng = np.random.default_rng(9)
        params = random_params(rng)
        x = rng.random((3, 6))
        eps = rng.normal(size=(3, 3))

        rows = [loss(params, x[i], eps[i]).total for i in range(3)]

        assert loss(params, x, eps).total == pytest.approx(np.mean(rows), abs=1e-12)

    def test_latent_permutation_symmetry(self):
        """Test permuting latent coordinates consistently leaves the loss unchanged."""
        rng = np.random.default_rng(10)
        params = random_params(rng, latent_dim=3)
        x = rng.random(6)
        eps = rng.normal(size=3)
        perm = np.array([2, 0, 1])

        permuted = params.copy()
        permuted.enc_head.weights[:] = params.enc_head.weights[np.r_[perm, perm + 3]]
        permuted.enc_head.bias[:] = params.enc_head.bias[np.r_[perm, perm + 3]]
        permuted.dec_hidden.weights[:] = params.dec_hidden.weights[:, perm]

        assert loss(permuted, x, eps[perm]).total == pytest.approx(
            loss(params, x, eps).total, abs=1e-12
        )

    def test_eps_row_mismatch(self):
        """Test eps must have one row per input."""
        with pytest.raises(ShapeMismatchError):
            loss(VaeParams.zeros(2, 4), np.zeros((3, 6)), np.zeros((2, 2)))


def kink_free_instance(rng, margin=1e-3):
    """Random (params, x, eps) whose ReLU pre-activations all clear the kink by margin."""
    while True:
        params = random_params(rng)
        x = rng.random(6)
        eps = rng.normal(size=3)
        a1 = params.enc_hidden.weights @ x + params.enc_hidden.bias
        post = encode(params, x)
        z = post.mu + np.exp(post.log_var / 2) * eps
        a3 = params.dec_hidden.weights @ z + params.dec_hidden.bias
        if np.min(np.abs(a1)) >= margin and np.min(np.abs(a3)) >= margin:
            return params, x, eps


class TestGradients:
    """Test analytic gradients."""

    def test_stationary_at_optimum(self):
        """Test zero gradient when x is reconstructed and the posterior is the prior."""
        rng = np.random.default_rng(11)
        params = VaeParams.zeros(3, 8)
        params.enc_hidden.weights[:] = rng.normal(size=(8, 6))
        params.dec_hidden.weights[:] = rng.normal(size=(8, 3))

        grads = loss_gradients(params, [0.5] * 6, rng.normal(size=3))

        assert grads.norm() < 1e-6

    def test_finite_differences(self):
        """Test every coordinate against central differences on 20 instances."""
        rng = np.random.default_rng(12)
        h = 1e-5
        for _ in range(20):
            params, x, eps = kink_free_instance(rng)
            grads = loss_gradients(params, x, eps).arrays()

            for key, array in params.arrays().items():
                for index in np.ndindex(array.shape):
                    original = array[index]
                    array[index] = original + h
                    plus = loss(params, x, eps).total
                    array[index] = original - h
                    minus = loss(params, x, eps).total
                    array[index] = original

                    numeric = (plus - minus) / (2 * h)
                    analytic = grads[key][index]
                    error = abs(analytic - numeric)
                    assert error <= 1e-4 * max(abs(analytic), abs(numeric)) or error < 1e-8, (
                        key, index, analytic, numeric
                    )

    def test_kl_path_ablation(self):
        """Test the KL path leaves decoder gradients alone and adds its closed form to the head."""
        rng = np.random.default_rng(13)
        params, x, eps = kink_free_instance(rng)

        full = loss_gradients(params, x, eps, include_kl=True)
        recon_only = loss_gradients(params, x, eps, include_kl=False)

        np.testing.assert_array_equal(full.dec_out.weights, recon_only.dec_out.weights)
        np.testing.assert_array_equal(full.dec_hidden.weights, recon_only.dec_hidden.weights)

        post = encode(params, x)
        kl_head = np.concatenate([post.mu, 0.5 * np.expm1(post.log_var)])
        np.testing.assert_allclose(
            full.enc_head.bias - recon_only.enc_head.bias, kl_head, rtol=1e-10, atol=1e-12
        )

    def test_decoder_output_formula(self):
        """Test dec_out gradients equal (xhat - x) times the hidden activations."""
        rng = np.random.default_rng(14)
        params, x, eps = kink_free_instance(rng)

        post = encode(params, x)
        z = reparameterize(post, eps)
        h3 = np.maximum(params.dec_hidden.weights @ z + params.dec_hidden.bias, 0)
        xhat = decode(params, z)

        grads = loss_gradients(params, x, eps, include_kl=False)
        np.testing.assert_allclose(grads.dec_out.weights, np.outer(xhat - x, h3), rtol=1e-10, atol=1e-14)
        np.testing.assert_allclose(grads.dec_out.bias, xhat - x, rtol=1e-10, atol=1e-14)

    def test_reproducible_reduction(self):
        """Test the tree reduction agrees with BLAS and is bitwise repeatable."""
        rng = np.random.default_rng(15)
        params = random_params(rng)
        x = rng.random((37, 6))
        eps = rng.normal(size=(37, 3))

        first = loss_gradients(params, x, eps, reproducible=True).arrays()
        second = loss_gradients(params, x, eps, reproducible=True).arrays()
        fast = loss_gradients(params, x, eps, reproducible=False).arrays()

        for key in first:
            np.testing.assert_array_equal(first[key], second[key])
            np.testing.assert_allclose(first[key], fast[key], rtol=1e-10, atol=1e-13)

    def test_batch_gradient_is_mean(self):
        """Test batch gradients average the per-row gradients."""
        rng = np.random.default_rng(16)
        params = random_params(rng)
        x = rng.random((2, 6))
        eps = rng.normal(size=(2, 3))

        batch = loss_gradients(params, x, eps).arrays()
        rows = [loss_gradients(params, x[i], eps[i]).arrays() for i in range(2)]

        for key in batch:
            np.testing.assert_allclose(batch[key], (rows[0][key] + rows[1][key]) / 2, atol=1e-13)

    def test_loss_and_gradients_pair(self):
        """Test the combined call returns the same loss as loss()."""
        rng = np.random.default_rng(17)
        params = random_params(rng)
        x, eps = rng.random(6), rng.normal(size=3)

        breakdown, _ = loss_and_gradients(params, x, eps)

        assert breakdown == loss(params, x, eps)

    def test_tree_sum(self):
        """Test pairwise reduction on odd and even lengths."""
        for n in (1, 2, 5, 8, 13):
            stack = np.arange(n * 2, dtype=float).reshape(n, 2)
            np.testing.assert_array_equal(_tree_sum(stack), stack.sum(axis=0))


class TestReconstruct:
    """Test reconstruct."""

    def test_uses_posterior_mean(self):
        """Test reconstruct decodes mu without sampling."""
        rng = np.random.default_rng(18)
        params = random_params(rng)
        x = rng.random(6)

        np.testing.assert_array_equal(reconstruct(params, x), decode(params, encode(params, x).mu))


class TestPersistence:
    """Test the weights JSON."""

    def test_round_trip_is_exact(self, tmp_path):
        """Test save/load reproduces every entry bit-for-bit."""
        params = random_params(np.random.default_rng(19), latent_dim=2, hidden_dim=5)

        loaded, age_cap = load_params(save_params(tmp_path / "w.json", params, age_cap=110.0))

        assert age_cap == 110.0
        assert loaded.latent_dim == 2 and loaded.hidden_dim == 5
        for key, array in params.arrays().items():
            np.testing.assert_array_equal(loaded.arrays()[key], array)

    def test_document_layout(self):
        """Test the dims header and layer keys."""
        payload = params_to_dict(VaeParams.zeros(3, 4))

        assert payload["dims"] == {"latent_dim": 3, "hidden_dim": 4, "input_dim": 6}
        assert set(payload["layers"]) == set(LAYER_NAMES)
        assert "encoding" not in payload

    def test_missing_age_cap(self):
        """Test documents without an encoding section load with age_cap None."""
        _, age_cap = params_from_dict(params_to_dict(VaeParams.zeros(1, 2)))

        assert age_cap is None

    def test_missing_layer(self):
        """Test a missing layer is a parse error."""
        payload = params_to_dict(VaeParams.zeros(2, 3))
        del payload["layers"]["dec_out"]

        with pytest.raises(ArtifactParseError):
            params_from_dict(payload)

    def test_wrong_input_dim(self):
        """Test the declared input width must be six."""
        payload = params_to_dict(VaeParams.zeros(2, 3))
        payload["dims"]["input_dim"] = 7

        with pytest.raises(ArtifactParseError, match="input_dim"):
            params_from_dict(payload)

    def test_declared_dims_mismatch(self):
        """Test layers inconsistent with the declared latent_dim."""
        payload = params_to_dict(VaeParams.zeros(2, 3))
        payload["dims"]["latent_dim"] = 3

        with pytest.raises(ShapeMismatchError):
            params_from_dict(payload)

    def test_non_finite_entries(self, tmp_path):
        """Test NaN entries are rejected on load."""
        params = VaeParams.zeros(1, 2)
        params.dec_out.bias[0] = np.nan
        path = tmp_path / "w.json"
        path.write_text(json.dumps(params_to_dict(params)))

        with pytest.raises(NumericError):
            load_params(path)

    def test_invalid_json(self, tmp_path):
        """Test malformed JSON names its line."""
        path = tmp_path / "w.json"
        path.write_text('{\n"dims": \n')

        with pytest.raises(ArtifactParseError) as excinfo:
            load_params(path)

        assert "line" in excinfo.value.context
