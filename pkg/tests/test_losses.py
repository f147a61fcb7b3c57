"""Objective-function tests: closed-form values, brute-force spectral
oracles, blend endpoints, and finite-difference gradient checks."""

import logging
import math

import numpy as np
import pytest

from freqvae import losses
from freqvae.errors import ConfigError, ShapeError, UsageError
from freqvae import spectral

from testutil import brute_force_dft2d, check_grad_at, snap_grid


def binary_image(seed, shape=(2, 1, 8, 8)):
    return np.random.default_rng(seed).integers(0, 2, size=shape).astype(np.float32)


def interior_image(seed, shape=(2, 1, 8, 8)):
    # snapped to the 1/8 grid and kept in [0.25, 0.75]: gradients stay
    # bounded away from zero and the float32 forward is exact on products
    return snap_grid(np.random.default_rng(seed).uniform(0.25, 0.75, size=shape))


class TestLossConfig:
    def test_valid(self):
        cfg = losses.LossConfig(kind="fft", alpha=0.3, beta=2.0)
        assert cfg.alpha == 0.3

    def test_bad_kind(self):
        with pytest.raises(ConfigError):
            losses.LossConfig(kind="mse")

    @pytest.mark.parametrize("alpha", [-0.1, 1.1])
    def test_bad_alpha(self, alpha):
        with pytest.raises(ConfigError):
            losses.LossConfig(kind="fft", alpha=alpha)

    def test_bad_beta(self):
        with pytest.raises(ConfigError):
            losses.LossConfig(kind="fft", beta=-1.0)

    def test_bad_ai_weight(self):
        with pytest.raises(ConfigError):
            losses.LossConfig(kind="ai", ai_weight=-1.0)


class TestBceRecon:
    def test_half_everywhere(self):
        x = np.full((1, 1, 2, 2), 0.5, np.float32)
        loss = losses.bce_recon(x, x).item()
        assert abs(loss - 4 * math.log(2)) < 1e-4

    def test_limit_to_zero(self):
        x = binary_image(0)
        xhat = np.clip(x, 1e-6, 1 - 1e-6)
        loss = losses.bce_recon(x, xhat).item()
        assert 0.0 < loss < 1e-3

    def test_matches_hand_formula(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(size=(3, 1, 4, 4)).astype(np.float32)
        xhat = rng.uniform(0.05, 0.95, size=(3, 1, 4, 4)).astype(np.float32)
        want = -(x * np.log(xhat) + (1 - x) * np.log(1 - xhat)).astype(np.float64).sum() / 3
        got = losses.bce_recon(x, xhat).item()
        assert abs(got - want) < 1e-4 * abs(want)

    def test_endpoint_values_clamped_and_logged(self, caplog):
        losses._clamp_warned = False
        x = np.zeros((1, 1, 2, 2), np.float32)
        xhat = np.array([[[[0.0, 1.0], [0.5, 0.5]]]], np.float32)
        with caplog.at_level(logging.WARNING, logger="freqvae.losses"):
            loss = losses.bce_recon(x, xhat).item()
            assert math.isfinite(loss)
            assert any("clamping" in r.message for r in caplog.records)
            before = len(caplog.records)
            losses.bce_recon(x, xhat)
            assert len(caplog.records) == before

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            losses.bce_recon(np.zeros((1, 1, 2, 2)), np.full((1, 1, 4, 4), 0.5))

    def test_gradient(self):
        x = binary_image(2)
        xhat = interior_image(3)
        check_grad_at(losses.bce_recon, [x, xhat], 1)


class TestKlDiagGaussian:
    def test_standard_normal_is_zero(self):
        z = np.zeros((4, 8), np.float32)
        assert losses.kl_diag_gaussian(z, z).item() == 0.0

    def test_unit_mean_shift(self):
        mu = np.ones((1, 1), np.float32)
        lv = np.zeros((1, 1), np.float32)
        assert abs(losses.kl_diag_gaussian(mu, lv).item() - 0.5) < 1e-6

    def test_variance_four(self):
        mu = np.zeros((1, 1), np.float32)
        lv = np.full((1, 1), math.log(4.0), np.float32)
        want = 0.5 * (4.0 - 1.0 - math.log(4.0))
        assert abs(losses.kl_diag_gaussian(mu, lv).item() - want) < 1e-5

    def test_non_negative_on_random_draws(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            mu = rng.normal(scale=2.0, size=(1, 3)).astype(np.float32)
            lv = rng.normal(scale=2.0, size=(1, 3)).astype(np.float32)
            assert losses.kl_diag_gaussian(mu, lv).item() >= 0.0

    def test_gradients(self):
        mu = snap_grid(np.random.default_rng(5).uniform(0.5, 1.5, size=(2, 4)))
        lv = snap_grid(np.random.default_rng(6).uniform(0.25, 1.0, size=(2, 4)))
        check_grad_at(losses.kl_diag_gaussian, [mu, lv], 0)
        check_grad_at(losses.kl_diag_gaussian, [mu, lv], 1)


class TestFftLoss:
    def test_zero_at_equality(self):
        x = interior_image(7)
        assert losses.fft_loss(x, x).item() == 0.0

    def test_constant_offset_dc_only(self):
        x = np.full((1, 1, 8, 8), 0.25, np.float32)
        xhat = np.full((1, 1, 8, 8), 0.5, np.float32)
        # only the DC coefficient differs: (64 * 0.25)^2 / 64 = 4.0
        assert abs(losses.fft_loss(x, xhat).item() - 4.0) < 1e-4 * 4.0

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(8)
        x = rng.uniform(size=(2, 3, 8, 8)).astype(np.float32)
        xhat = rng.uniform(size=(2, 3, 8, 8)).astype(np.float32)
        want = 0.0
        for n in range(2):
            for c in range(3):
                fx = brute_force_dft2d(x[n, c])
                fh = brute_force_dft2d(xhat[n, c])
                want += (((fx.real - fh.real) ** 2).sum() + ((fx.imag - fh.imag) ** 2).sum()) / 64
        want /= 6
        got = losses.fft_loss(x, xhat).item()
        assert abs(got - want) < 1e-4 * abs(want)

    def test_symmetry(self):
        x = interior_image(9)
        y = interior_image(10)
        a = losses.fft_loss(x, y).item()
        b = losses.fft_loss(y, x).item()
        assert abs(a - b) <= 1e-6 * abs(a)

    def test_circular_shift_invariance(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(size=(1, 1, 8, 8)).astype(np.float32)
        xhat = rng.uniform(size=(1, 1, 8, 8)).astype(np.float32)
        base = losses.fft_loss(x, xhat).item()
        rolled = losses.fft_loss(np.roll(x, (3, 5), axis=(2, 3)),
                                 np.roll(xhat, (3, 5), axis=(2, 3))).item()
        assert abs(base - rolled) < 1e-5 * max(1.0, abs(base))

    def test_rank_check(self):
        with pytest.raises(UsageError):
            losses.fft_loss(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_gradient(self):
        x = binary_image(12)
        xhat = interior_image(13)
        check_grad_at(losses.fft_loss, [x, xhat], 1)


class TestCombinedLoss:
    def test_endpoint_alpha_one_is_bce(self):
        x, xhat = binary_image(14), interior_image(15)
        cfg = losses.LossConfig(kind="fft", alpha=1.0)
        assert losses.combined_loss(x, xhat, cfg).item() == losses.bce_recon(x, xhat).item()

    def test_endpoint_alpha_zero_is_fft(self):
        x, xhat = binary_image(16), interior_image(17)
        cfg = losses.LossConfig(kind="fft", alpha=0.0)
        assert losses.combined_loss(x, xhat, cfg).item() == losses.fft_loss(x, xhat).item()

    def test_midpoint_is_mean(self):
        x, xhat = binary_image(18), interior_image(19)
        cfg = losses.LossConfig(kind="fft", alpha=0.5)
        got = losses.combined_loss(x, xhat, cfg).item()
        want = 0.5 * (losses.bce_recon(x, xhat).item() + losses.fft_loss(x, xhat).item())
        assert abs(got - want) < 1e-5 * abs(want)

    def test_monotone_in_fft_part(self):
        # constructed perturbation: on two pixels where x = 0, replacing
        # reconstruction values (0.5, 0.5) by (0.1, 1 - 0.25/0.9) keeps the
        # product (1-a)(1-b) and hence the BCE sum exactly fixed, while
        # a^2 + b^2 and hence the spectral loss strictly grows
        x = np.zeros((1, 1, 4, 4), np.float32)
        lo = np.full((1, 1, 4, 4), 0.5, np.float32)
        hi = lo.copy()
        hi[0, 0, 0, 0] = 0.1
        hi[0, 0, 0, 1] = 1.0 - 0.25 / 0.9
        b1 = losses.bce_recon(x, lo).item()
        b2 = losses.bce_recon(x, hi).item()
        f1 = losses.fft_loss(x, lo).item()
        f2 = losses.fft_loss(x, hi).item()
        assert abs(b1 - b2) < 1e-5 * abs(b1)
        assert f2 > f1
        for alpha in (0.0, 0.25, 0.75):
            cfg = losses.LossConfig(kind="fft", alpha=alpha)
            assert losses.combined_loss(x, hi, cfg).item() > losses.combined_loss(x, lo, cfg).item()
        cfg = losses.LossConfig(kind="fft", alpha=1.0)
        a, b = losses.combined_loss(x, lo, cfg).item(), losses.combined_loss(x, hi, cfg).item()
        assert abs(a - b) < 1e-5 * abs(a)

    def test_wrong_kind_rejected(self):
        cfg = losses.LossConfig(kind="ai")
        with pytest.raises(UsageError):
            losses.combined_loss(binary_image(0), interior_image(1), cfg)

    def test_mutated_alpha_rejected(self):
        cfg = losses.LossConfig(kind="fft")
        cfg.alpha = 1.5
        with pytest.raises(ConfigError):
            losses.combined_loss(binary_image(0), interior_image(1), cfg)

    def test_gradient(self):
        x, xhat = binary_image(21), interior_image(22)
        cfg = losses.LossConfig(kind="fft", alpha=0.5)
        check_grad_at(lambda a, b: losses.combined_loss(a, b, cfg), [x, xhat], 1)


class TestAiLoss:
    def test_zero_at_equality(self):
        x = interior_image(23)
        assert losses.ai_loss(x, x).item() == 0.0

    def test_distinct_constants_still_zero(self):
        x = np.full((1, 1, 8, 8), 0.25, np.float32)
        xhat = np.full((1, 1, 8, 8), 0.75, np.float32)
        # both normalized spectra are [1, 0, ..., 0]
        assert losses.ai_loss(x, xhat).item() < 1e-8

    def test_matches_spectral_composition(self):
        rng = np.random.default_rng(24)
        x = rng.uniform(size=(2, 1, 8, 8)).astype(np.float32)
        xhat = rng.uniform(size=(2, 1, 8, 8)).astype(np.float32)

        def curve(img):
            spec = spectral.azimuthal_integration(
                spectral.power_spectrum(spectral.dft2d(img)))
            return spec.bins / (spec.bins[0] + 1e-8)

        want = np.mean([((curve(x[n, 0]) - curve(xhat[n, 0])) ** 2).mean() for n in range(2)])
        got = losses.ai_loss(x, xhat).item()
        assert abs(got - want) < 1e-3 * abs(want)

    def test_rgb_equals_precomposed_grayscale(self):
        rng = np.random.default_rng(25)
        x = rng.uniform(size=(2, 3, 8, 8)).astype(np.float32)
        xhat = rng.uniform(size=(2, 3, 8, 8)).astype(np.float32)
        gx = np.stack([spectral.to_grayscale(im) for im in x])[:, None].astype(np.float32)
        gh = np.stack([spectral.to_grayscale(im) for im in xhat])[:, None].astype(np.float32)
        a = losses.ai_loss(x, xhat).item()
        b = losses.ai_loss(gx, gh).item()
        assert abs(a - b) < 1e-3 * max(abs(a), 1e-9)

    def test_bad_channels(self):
        with pytest.raises(UsageError):
            losses.ai_loss(np.zeros((1, 2, 8, 8)), np.zeros((1, 2, 8, 8)))

    def test_gradient(self):
        x, xhat = interior_image(26), interior_image(27)
        check_grad_at(losses.ai_loss, [x, xhat], 1)


class TestTotalObjective:
    def latents(self, seed, n=2, d=4):
        rng = np.random.default_rng(seed)
        mu = snap_grid(rng.uniform(0.5, 1.5, size=(n, d))) * rng.choice([-1.0, 1.0], size=(n, d)).astype(np.float32)
        lv = snap_grid(rng.uniform(0.25, 1.0, size=(n, d)))
        return mu, lv

    def test_beta_zero_is_reconstruction_alone(self):
        x, xhat = binary_image(28), interior_image(29)
        mu, lv = self.latents(30)
        cfg = losses.LossConfig(kind="vanilla_bce", beta=0.0)
        total = losses.total_objective(x, xhat, mu, lv, cfg).item()
        assert total == losses.bce_recon(x, xhat).item()

    @pytest.mark.parametrize("kind", ["vanilla_bce", "fft"])
    def test_composed_zeros_on_binary_input(self, kind):
        x = binary_image(31, shape=(1, 1, 4, 4))
        mu = np.zeros((1, 4), np.float32)
        lv = np.zeros((1, 4), np.float32)
        cfg = losses.LossConfig(kind=kind)
        total = losses.total_objective(x, x, mu, lv, cfg).item()
        assert 0.0 <= total < 1e-4

    def test_parts_recompose_fft(self):
        x, xhat = binary_image(32), interior_image(33)
        mu, lv = self.latents(34)
        cfg = losses.LossConfig(kind="fft", alpha=0.3, beta=0.7)
        parts = losses.objective_parts(x, xhat, mu, lv, cfg)
        want = (0.3 * parts["recon"].item() + 0.7 * parts["spectral"].item()
                + 0.7 * parts["kl"].item())
        assert abs(parts["total"].item() - want) < 1e-5 * abs(want)

    def test_parts_recompose_ai(self):
        x, xhat = binary_image(35), interior_image(36)
        mu, lv = self.latents(37)
        cfg = losses.LossConfig(kind="ai", beta=1.0, ai_weight=100.0)
        parts = losses.objective_parts(x, xhat, mu, lv, cfg)
        want = parts["recon"].item() + 100.0 * parts["spectral"].item() + parts["kl"].item()
        assert abs(parts["total"].item() - want) < 1e-5 * abs(want)

    def test_parts_recompose_vanilla(self):
        x, xhat = binary_image(38), interior_image(39)
        mu, lv = self.latents(40)
        cfg = losses.LossConfig(kind="vanilla_bce", beta=2.0)
        parts = losses.objective_parts(x, xhat, mu, lv, cfg)
        assert parts["spectral"].item() == 0.0
        want = parts["recon"].item() + 2.0 * parts["kl"].item()
        assert abs(parts["total"].item() - want) < 1e-5 * abs(want)

    def test_gradients(self):
        x = binary_image(41, shape=(1, 1, 4, 4))
        xhat = interior_image(42, shape=(1, 1, 4, 4))
        mu, lv = self.latents(43, n=1)
        cfg = losses.LossConfig(kind="fft", alpha=0.5, beta=1.0)
        op = lambda a, b, m, l: losses.total_objective(a, b, m, l, cfg)
        arrays = [x, xhat, mu, lv]
        check_grad_at(op, arrays, 1)
        check_grad_at(op, arrays, 2)
        check_grad_at(op, arrays, 3)
