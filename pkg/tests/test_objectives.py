import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hifi_bbrg.objectives import (
    LossRecord,
    NonFiniteLossError,
    diffusion_loss,
    discriminator_loss,
    fidelity_loss,
    generator_adversarial_loss,
    total_generator_loss,
)

SWEEP = [0.0, 20.0, -20.0, 1000.0, -1000.0]


def _rand(seed, shape=(2, 1, 4, 4)):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


class TestDiffusionLoss:
    def test_exact_prediction(self):
        x_t, x_0 = _rand(0), _rand(1)
        assert float(diffusion_loss(x_t - x_0, x_t, x_0)) == 0.0

    def test_constant_gap(self):
        x_0 = _rand(2)
        assert float(diffusion_loss(torch.zeros_like(x_0), x_0 + 0.5, x_0)) == pytest.approx(0.5, abs=1e-15)

    def test_symmetry(self):
        pred, target = _rand(3), _rand(4)
        zero = torch.zeros_like(pred)
        assert float(diffusion_loss(pred, target, zero)) == float(diffusion_loss(target, pred, zero))

    def test_l2_option(self):
        x_0 = torch.zeros(1, 1, 2, 2, dtype=torch.float64)
        assert float(diffusion_loss(x_0, x_0 + 0.5, x_0, kind="l2")) == pytest.approx(0.25)

    def test_errors(self):
        a = _rand(0)
        with pytest.raises(ValueError):
            diffusion_loss(a, a[:1], a)
        with pytest.raises(NonFiniteLossError):
            diffusion_loss(a * math.nan, a, a)


class TestFidelityLoss:
    def test_identity(self):
        a = _rand(5)
        assert float(fidelity_loss(a, a.clone())) == 0.0

    def test_offset(self):
        a = _rand(6)
        assert float(fidelity_loss(a, a + 0.25)) == pytest.approx(0.25, abs=1e-15)

    def test_pixel_permutation_invariance(self):
        a, b = _rand(7), _rand(8)
        perm = torch.randperm(a.numel(), generator=torch.Generator().manual_seed(0))
        pa = a.reshape(-1)[perm].reshape(a.shape)
        pb = b.reshape(-1)[perm].reshape(b.shape)
        assert float(fidelity_loss(a, b)) == pytest.approx(float(fidelity_loss(pa, pb)), rel=1e-14)

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_non_negative_and_zero_iff_equal(self, seed):
        a, b = _rand(seed), _rand(seed + 1)
        assert float(fidelity_loss(a, b)) > 0
        assert float(diffusion_loss(a, b, torch.zeros_like(a))) > 0


class TestAdversarialLosses:
    def test_discriminator_at_zero(self):
        z = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
        assert float(discriminator_loss(z, z)) == pytest.approx(2 * math.log(2), abs=1e-9)

    def test_discriminator_saturated_correct(self):
        z = torch.ones(1, 1, 4, 4, dtype=torch.float64)
        assert float(discriminator_loss(-20 * z, 20 * z)) <= 1e-7

    def test_discriminator_saturated_wrong(self):
        z = torch.ones(1, 1, 4, 4, dtype=torch.float64)
        val = float(discriminator_loss(20 * z, -20 * z))
        assert math.isfinite(val)
        assert val == pytest.approx(40.0, abs=1e-7)

    def test_generator_values(self):
        z = torch.zeros(3, dtype=torch.float64)
        assert float(generator_adversarial_loss(z)) == pytest.approx(math.log(2), abs=1e-9)
        assert float(generator_adversarial_loss(z + 20)) <= 1e-8
        assert float(generator_adversarial_loss(z - 1)) > float(generator_adversarial_loss(z + 1))

    @pytest.mark.parametrize("d_f", SWEEP)
    @pytest.mark.parametrize("d_r", SWEEP)
    def test_sweep_is_finite(self, d_f, d_r):
        f = torch.full((2, 1, 2, 2), d_f)
        r = torch.full((2, 1, 2, 2), d_r)
        assert math.isfinite(float(discriminator_loss(f, r)))
        assert math.isfinite(float(generator_adversarial_loss(f)))

    def test_gradient_signs(self):
        vals = torch.linspace(-20, 20, 41, dtype=torch.float64)
        d_f = vals.clone().requires_grad_(True)
        d_r = vals.clone().requires_grad_(True)
        discriminator_loss(d_f, d_r).backward()
        assert bool((d_r.grad < 0).all()) and bool((d_f.grad > 0).all())
        g_f = vals.clone().requires_grad_(True)
        generator_adversarial_loss(g_f).backward()
        assert bool((g_f.grad < 0).all())

    def test_matches_direct_formula(self):
        f, r = _rand(10) * 3, _rand(11) * 3
        direct = -(torch.log(1 - torch.sigmoid(f)) + torch.log(torch.sigmoid(r))).mean()
        assert float(discriminator_loss(f, r)) == pytest.approx(float(direct), rel=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteLossError):
            generator_adversarial_loss(torch.tensor([math.inf]))


class TestTotal:
    def test_arithmetic(self):
        assert total_generator_loss(1.0, 2.0, 0.5, 1.0) == 3.5
        assert total_generator_loss(1.0, 2.0, 0.5, 0.0) == 1.5
        assert total_generator_loss(0.5, 0.4, 0.1, 0.5) == pytest.approx(0.8, abs=1e-15)

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            total_generator_loss(1.0, 1.0, 1.0, -0.1)

    def test_record_decomposition(self):
        parts = dict(l_diff=0.3, l_fidelity=0.7, l_adv_d=1.2, l_adv_g=0.9)
        total = total_generator_loss(parts["l_diff"], parts["l_fidelity"], parts["l_adv_g"], 0.5)
        rec = LossRecord(**parts, l_total_gen=total)
        assert rec.l_total_gen == rec.l_diff + 0.5 * rec.l_fidelity + rec.l_adv_g
