"""Symmetric alpha-stable (SaS) noise: sampling, density and SNR scaling.

The characteristic function is ``exp(-(sigma * |theta|) ** alpha)``, so
alpha=1 is Cauchy(0, sigma) and alpha=2 is Normal(0, 2 sigma^2).
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.interpolate import CubicSpline
from scipy.special import gammaln


class QuadratureError(ArithmeticError):
    pass


@dataclass(frozen=True)
class NoiseParams:
    alpha: float
    sigma: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 2.0:
            raise ValueError(f"alpha must lie in (0, 2], got {self.alpha}")
        if not self.sigma > 0.0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @property
    def dispersion(self):
        return self.sigma ** self.alpha


def sample_sas(params, size, rng):
    """Chambers-Mallows-Stuck draws of shape ``size``."""
    alpha, sigma = params.alpha, params.sigma
    v = rng.uniform(-np.pi / 2, np.pi / 2, size)
    if alpha == 1.0:
        return sigma * np.tan(v)
    w = rng.standard_exponential(size)
    x = (np.sin(alpha * v) / np.cos(v) ** (1.0 / alpha)
         * (np.cos(v - alpha * v) / w) ** ((1.0 - alpha) / alpha))
    return sigma * x


def sample_sas_scalar(params, rng):
    return float(sample_sas(params, None, rng))


def sample_complex_noise(params, n, rng):
    """Length-``n`` complex vector with independent SaS real and imaginary parts."""
    if n < 1:
        raise ValueError("n must be >= 1")
    parts = sample_sas(params, (2, n), rng)
    return parts[0] + 1j * parts[1]


def _cutoff(params, envelope=1e-12):
    return (-math.log(envelope)) ** (1.0 / params.alpha) / params.sigma


def sas_pdf_numeric(n, params, epsabs=1e-8, envelope_floor=1e-12, epsrel=0.0):
    """Density ``(1/pi) * int_0^Theta cos(theta n) exp(-(sigma theta)^alpha) dtheta``.

    ``Theta`` is where the envelope drops below ``envelope_floor``. Raises
    QuadratureError if the adaptive integrator reports trouble.
    """
    n = abs(float(n))
    a, s = params.alpha, params.sigma
    upper = _cutoff(params, envelope_floor)

    def envelope(theta):
        return math.exp(-((s * theta) ** a))

    kwargs = dict(epsabs=epsabs, epsrel=epsrel, limit=500, full_output=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        if n == 0.0:
            res = integrate.quad(envelope, 0.0, upper, **kwargs)
        else:
            res = integrate.quad(envelope, 0.0, upper, weight="cos", wvar=n, **kwargs)
    value, abserr, info = res[:3]
    # a fourth element is the integrator's failure message
    if len(res) > 3 or not np.isfinite(value) or abserr > 10 * max(epsabs, epsrel * abs(value)):
        msg = res[3] if len(res) > 3 else ""
        raise QuadratureError(
            f"density quadrature failed at n={n}, alpha={a}, sigma={s}: "
            f"abserr={abserr:.3g}, evaluations={info.get('neval')}, {msg}")
    return value / math.pi


def _tail_series(x, alpha, terms=8):
    """Large-|x| expansion of the unit-scale SaS density (alpha < 2)."""
    total = np.zeros_like(x)
    for k in range(1, terms + 1):
        coef = (-1) ** (k + 1) * math.exp(gammaln(alpha * k + 1) - gammaln(k + 1))
        coef *= math.sin(math.pi * alpha * k / 2)
        total = total + coef * x ** (-alpha * k - 1)
    return total / math.pi


class SasLogDensity:
    """Fast log-density for likelihood scoring.

    alpha=2 uses the Gaussian closed form. Otherwise ``log f`` is tabulated
    from the Fourier integral on ``|x| <= tail_start * sigma`` (cubic spline
    in ``log1p|x|``) and taken from the asymptotic series beyond.
    """

    def __init__(self, params, tail_start=100.0, grid_size=600):
        self.params = params
        self.tail_start = tail_start * params.sigma
        if params.alpha == 2.0:
            self._spline = None
            return
        u = np.linspace(0.0, math.log1p(tail_start), grid_size)
        xs = np.expm1(u)
        logf = np.array([math.log(self._unit_pdf(x)) for x in xs])
        self._spline = CubicSpline(u, logf)

    def _unit_pdf(self, x):
        return sas_pdf_numeric(x, NoiseParams(self.params.alpha), epsabs=1e-14,
                               envelope_floor=1e-30, epsrel=1e-10)

    def __call__(self, x):
        x = np.abs(np.asarray(x, dtype=np.float64))
        s = self.params.sigma
        if self._spline is None:
            return -(x / s) ** 2 / 4.0 - math.log(2.0 * s * math.sqrt(math.pi))
        z = x / s
        out = np.empty_like(z)
        inner = z <= self.tail_start / s
        out[inner] = self._spline(np.log1p(z[inner]))
        if np.any(~inner):
            out[~inner] = np.log(_tail_series(z[~inner], self.params.alpha))
        return out - math.log(s)


def signal_scale_for_snr(snr_db, params, unit_signal_power):
    """Symbol amplitude ``c`` giving ``10 log10(c^2 P / sigma^alpha) = snr_db``.

    ``unit_signal_power`` is the mean received power per real dimension
    with unit-energy symbols.
    """
    if unit_signal_power <= 0:
        raise ValueError("unit_signal_power must be positive")
    return math.sqrt(params.dispersion * 10.0 ** (snr_db / 10.0) / unit_signal_power)
