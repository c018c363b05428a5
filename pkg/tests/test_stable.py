import math

import numpy as np
import pytest
from scipy import integrate, stats

from mlei.stable import (NoiseParams, SasLogDensity, sample_complex_noise, sample_sas,
                         sample_sas_scalar, sas_pdf_numeric, signal_scale_for_snr)


class TestParams:
    @pytest.mark.parametrize("alpha,sigma", [(0.0, 1.0), (2.1, 1.0), (1.5, 0.0), (1.5, -1.0)])
    def test_invalid(self, alpha, sigma):
        with pytest.raises(ValueError):
            NoiseParams(alpha, sigma)

    def test_dispersion(self):
        assert NoiseParams(1.5, 2.0).dispersion == pytest.approx(2.0 ** 1.5)


class TestSampling:
    def test_cauchy(self, rng):
        x = sample_sas(NoiseParams(1.0), 100_000, rng)
        assert stats.kstest(x, stats.cauchy.cdf).statistic < 0.01

    def test_gaussian(self, rng):
        x = sample_sas(NoiseParams(2.0), 100_000, rng)
        assert stats.kstest(x, stats.norm(scale=math.sqrt(2)).cdf).statistic < 0.01

    @pytest.mark.parametrize("alpha", [1.1, 1.5, 1.9])
    def test_matches_reference_sampler(self, rng, alpha):
        # scipy's levy_stable with beta=0 uses the same characteristic function
        x = sample_sas(NoiseParams(alpha), 20_000, rng)
        ref = stats.levy_stable.rvs(alpha, 0.0, size=20_000, random_state=7)
        assert stats.ks_2samp(x, ref).pvalue > 1e-3

    @pytest.mark.parametrize("alpha", [1.1, 1.5, 1.9])
    def test_symmetry(self, rng, alpha):
        x = sample_sas(NoiseParams(alpha), 100_000, rng)
        y = sample_sas(NoiseParams(alpha), 100_000, rng)
        assert stats.ks_2samp(x, -y).statistic < 0.01
        assert abs(np.median(x)) < 0.02

    @pytest.mark.parametrize("alpha", [1.0, 2.0])
    def test_stability_closure(self, rng, alpha):
        p = NoiseParams(alpha)
        s = sample_sas(p, 100_000, rng) + sample_sas(p, 100_000, rng)
        single = 2 ** (1 / alpha) * sample_sas(p, 100_000, rng)
        assert stats.ks_2samp(s, single).statistic < 0.01

    def test_scale(self, rng):
        x = sample_sas(NoiseParams(1.0, 3.0), 100_000, rng)
        assert stats.kstest(x, stats.cauchy(scale=3.0).cdf).statistic < 0.01

    def test_deterministic(self):
        p = NoiseParams(1.3)
        a = sample_sas(p, 1000, np.random.default_rng(5))
        b = sample_sas(p, 1000, np.random.default_rng(5))
        assert a.tobytes() == b.tobytes()
        assert isinstance(sample_sas_scalar(p, np.random.default_rng(5)), float)

    def test_complex_noise(self, rng):
        z = sample_complex_noise(NoiseParams(2.0), 100_000, rng)
        assert z.shape == (100_000,)
        assert abs(np.corrcoef(z.real, z.imag)[0, 1]) < 0.02
        assert np.var(z.real) == pytest.approx(2.0, rel=0.03)
        with pytest.raises(ValueError):
            sample_complex_noise(NoiseParams(2.0), 0, rng)


class TestDensity:
    def test_cauchy_origin(self):
        assert sas_pdf_numeric(0.0, NoiseParams(1.0)) == pytest.approx(1 / math.pi, abs=1e-6)

    def test_gaussian_origin(self):
        assert sas_pdf_numeric(0.0, NoiseParams(2.0)) == pytest.approx(1 / (2 * math.sqrt(math.pi)), abs=1e-6)

    @pytest.mark.parametrize("x", [0.3, 1.0, 4.0, 25.0])
    def test_closed_forms(self, x):
        assert sas_pdf_numeric(x, NoiseParams(1.0)) == pytest.approx(stats.cauchy.pdf(x), abs=1e-8)
        assert sas_pdf_numeric(x, NoiseParams(2.0)) == pytest.approx(
            stats.norm(scale=math.sqrt(2)).pdf(x), abs=1e-8)

    @pytest.mark.parametrize("alpha", [1.1, 1.5, 1.9])
    def test_normalisation(self, alpha):
        p = NoiseParams(alpha)
        mass, _ = integrate.quad(lambda x: sas_pdf_numeric(x, p), -50, 50, limit=400, points=[0.0])
        tail = 2 * stats.levy_stable.sf(50, alpha, 0.0)
        assert abs(mass - 1.0) < 1e-3 + tail
        assert abs(mass + tail - 1.0) < 1e-3

    def test_even_and_decreasing(self):
        p = NoiseParams(1.5)
        grid = np.linspace(0, 20, 41)
        vals = np.array([sas_pdf_numeric(x, p) for x in grid])
        assert np.all(np.diff(vals) < 0)
        for x in (0.5, 3.0):
            assert sas_pdf_numeric(-x, p) == sas_pdf_numeric(x, p)

    def test_scale_relation(self):
        p, q = NoiseParams(1.5, 2.0), NoiseParams(1.5, 1.0)
        assert sas_pdf_numeric(3.0, p) == pytest.approx(sas_pdf_numeric(1.5, q) / 2, rel=1e-6)


class TestLogDensity:
    def test_cauchy_formula(self):
        f = SasLogDensity(NoiseParams(1.0))
        x = np.array([0.0, 0.7, 5.0, 99.0, 150.0, 1e4])
        np.testing.assert_allclose(f(x), -np.log(np.pi * (1 + x * x)), atol=1e-8)

    def test_gaussian_closed_form(self):
        f = SasLogDensity(NoiseParams(2.0, 1.5))
        x = np.array([0.0, 1.0, 7.0])
        np.testing.assert_allclose(f(x), stats.norm(scale=1.5 * math.sqrt(2)).logpdf(x), rtol=1e-12)

    @pytest.mark.parametrize("alpha", [1.1, 1.9])
    def test_matches_quadrature(self, alpha):
        p = NoiseParams(alpha, 1.3)
        f = SasLogDensity(p)
        for x in (0.0, 0.4, 2.5, 30.0):
            assert f(np.array([x]))[0] == pytest.approx(math.log(sas_pdf_numeric(x, p)), abs=1e-6)

    def test_tail_branch_continuous(self):
        f = SasLogDensity(NoiseParams(1.5))
        inside, outside = f(np.array([100.0 - 1e-9, 100.0 + 1e-9]))
        assert inside == pytest.approx(outside, abs=1e-7)


class TestSnrScale:
    def test_unit(self):
        assert signal_scale_for_snr(0.0, NoiseParams(1.0), 1.0) == pytest.approx(1.0)

    def test_twenty_db(self):
        p = NoiseParams(1.5, 2.0)
        assert signal_scale_for_snr(23.0, p, 2.0) == pytest.approx(10 * signal_scale_for_snr(3.0, p, 2.0))

    def test_gaussian_power_ratio(self, rng):
        p = NoiseParams(2.0)
        c = signal_scale_for_snr(12.0, p, 1.0)
        s = c * rng.choice([-1.0, 1.0], 200_000)
        n = sample_sas(p, 200_000, rng)
        # noise dispersion sigma^alpha equals half the Gaussian variance
        ratio = np.mean(s ** 2) / (np.var(n) / 2)
        assert ratio == pytest.approx(10 ** 1.2, rel=0.01)

    def test_rejects_bad_power(self):
        with pytest.raises(ValueError):
            signal_scale_for_snr(0.0, NoiseParams(1.0), 0.0)
