"""Exhaustive-search and linear MIMO detectors.

Every detector works on an effective channel ``H`` (N x M complex) whose
columns already include the transmit amplitude, so symbols are drawn from a
unit-energy constellation. Batched entry points take ``Y`` of shape
(B, N) and ``H`` of shape (B, N, M) or (N, M) and return symbol indices
of shape (B, M).
"""

import enum
import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .channel import realify_vector
from .stable import NoiseParams, SasLogDensity

DEFAULT_MAX_CANDIDATES = 10**6


class CapacityError(ValueError):
    """The exhaustive candidate set would exceed the configured cap."""


class SingularChannelError(np.linalg.LinAlgError):
    pass


class DetectorKind(str, enum.Enum):
    MLE = "mle"
    ZF = "zf"
    MMSE = "mmse"
    DIFFUSION = "diffusion"
    GENIE = "genie"
    MLEI = "mlei"


@dataclass(frozen=True)
class Constellation:
    points: np.ndarray
    bits: np.ndarray

    @classmethod
    def qpsk(cls):
        """Gray-mapped QPSK: bit 0 -> +1/sqrt2, bit 1 -> -1/sqrt2 per quadrature."""
        bits = np.array([[0, 0], [0, 1], [1, 0], [1, 1]])
        amp = 1.0 / np.sqrt(2.0)
        points = (1 - 2 * bits[:, 0]) * amp + 1j * (1 - 2 * bits[:, 1]) * amp
        return cls(points, bits)

    @property
    def order(self):
        return len(self.points)

    @property
    def bits_per_symbol(self):
        return self.bits.shape[1]

    def nearest(self, z):
        """Index of the closest point for every entry of ``z``."""
        z = np.asarray(z)
        return np.argmin(np.abs(z[..., None] - self.points) ** 2, axis=-1)


@dataclass
class CandidateSet:
    indices: np.ndarray  # (K, M) constellation indices
    symbols: np.ndarray  # (K, M) complex
    residuals: np.ndarray  # (K, 2N) real


def candidate_indices(order, m, max_candidates=DEFAULT_MAX_CANDIDATES):
    """All ``order**m`` index vectors, first user varying slowest."""
    if order ** m > max_candidates:
        raise CapacityError(
            f"{order}^{m} = {order ** m} candidates exceeds the cap of {max_candidates}")
    return np.array(list(itertools.product(range(order), repeat=m)), dtype=np.int64).reshape(-1, m)


def _batch(Y, H):
    Y = np.asarray(Y, dtype=np.complex128)
    H = np.asarray(H, dtype=np.complex128)
    if Y.ndim == 1:
        Y = Y[None]
    if H.ndim == 2:
        H = np.broadcast_to(H, (len(Y),) + H.shape)
    if H.shape[:2] != Y.shape:
        raise ValueError(f"channel {H.shape} does not match received {Y.shape}")
    return Y, H


def complex_residuals(Y, H, symbols):
    """``y - H x`` for every candidate: (B, K, N)."""
    return Y[:, None, :] - np.einsum("bnm,km->bkn", H, symbols)


def enumerate_candidates(y, H, constellation, max_candidates=DEFAULT_MAX_CANDIDATES):
    y, H = _batch(y, H)
    idx = candidate_indices(constellation.order, H.shape[2], max_candidates)
    symbols = constellation.points[idx]
    res = realify_vector(complex_residuals(y, H, symbols)[0])
    return CandidateSet(idx, symbols, res)


def _select(primary, secondary):
    """Row-wise argmin of ``primary``; ties go to smaller ``secondary``, then lower index."""
    best = primary.min(axis=1, keepdims=True)
    masked = np.where(primary == best, secondary, np.inf)
    return np.argmin(masked, axis=1)


def error_score(net, schedule, pairs, n0):
    """Mean over pairs ``(t, eps)`` of ``||eps - eps_theta(sqrt(gbar_t) n0 + sqrt(1-gbar_t) eps, t)||^2``.

    ``n0`` is (..., 2N); the result has shape ``n0.shape[:-1]``.
    """
    n0 = np.asarray(n0, dtype=np.float64)
    total = np.zeros(n0.shape[:-1])
    for t, eps in pairs:
        schedule.check_step(t)
        gb = schedule.gamma_bar[t - 1]
        eps = np.asarray(eps, dtype=np.float64)
        n_t = np.sqrt(gb) * n0 + np.sqrt(1.0 - gb) * eps
        diff = eps - net.predict_noise(n_t, t)
        total += np.sum(diff * diff, axis=-1)
    return total / len(pairs)


def zero_pairs(steps, length):
    return [(int(s), np.zeros(length)) for s in steps]


def mle_indices(Y, H, constellation, max_candidates=DEFAULT_MAX_CANDIDATES):
    Y, H = _batch(Y, H)
    idx = candidate_indices(constellation.order, H.shape[2], max_candidates)
    res = complex_residuals(Y, H, constellation.points[idx])
    dist = np.sum(np.abs(res) ** 2, axis=2)
    return idx[np.argmin(dist, axis=1)]


def mlei_indices(Y, H, net, schedule, pairs, constellation,
                 max_candidates=DEFAULT_MAX_CANDIDATES, chunk=16):
    Y, H = _batch(Y, H)
    idx = candidate_indices(constellation.order, H.shape[2], max_candidates)
    symbols = constellation.points[idx]
    out = np.empty((len(Y), H.shape[2]), dtype=np.int64)
    for start in range(0, len(Y), chunk):
        res = complex_residuals(Y[start:start + chunk], H[start:start + chunk], symbols)
        energy = error_score(net, schedule, pairs, realify_vector(res))
        dist = np.sum(np.abs(res) ** 2, axis=2)
        out[start:start + chunk] = idx[_select(energy, dist)]
    return out


def genie_indices(Y, H, constellation, params, log_density=None,
                  max_candidates=DEFAULT_MAX_CANDIDATES):
    """Exact SaS likelihood maximisation (the noise law is assumed known)."""
    Y, H = _batch(Y, H)
    logf = log_density if log_density is not None else SasLogDensity(params)
    idx = candidate_indices(constellation.order, H.shape[2], max_candidates)
    res = complex_residuals(Y, H, constellation.points[idx])
    loglik = np.sum(logf(realify_vector(res)), axis=2)
    dist = np.sum(np.abs(res) ** 2, axis=2)
    return idx[_select(-loglik, dist)]


def _check_rank(H, tol=1e-10):
    s = np.linalg.svd(H, compute_uv=False)
    if s[-1] < tol * s[0]:
        raise SingularChannelError(
            f"channel is rank deficient (singular values {s[0]:.3g} .. {s[-1]:.3g})")


def zf_estimate(y, H):
    """Least-squares ``(H^H H)^-1 H^H y`` via a QR factorisation."""
    H = np.asarray(H, dtype=np.complex128)
    _check_rank(H)
    q, r = np.linalg.qr(H)
    return np.linalg.solve(r, q.conj().T @ np.asarray(y))


def mmse_estimate(y, H, noise_var=1.0):
    """``(H^H H + v I)^-1 H^H y`` as least squares on the augmented system."""
    H = np.asarray(H, dtype=np.complex128)
    m = H.shape[1]
    aug = np.vstack([H, np.sqrt(noise_var) * np.eye(m)])
    q, r = np.linalg.qr(aug)
    rhs = np.concatenate([np.asarray(y, dtype=np.complex128), np.zeros(m)])
    return np.linalg.solve(r, q.conj().T @ rhs)


def zf_indices(Y, H, constellation):
    Y, H = _batch(Y, H)
    return np.stack([constellation.nearest(zf_estimate(y, h)) for y, h in zip(Y, H)])


def mmse_indices(Y, H, constellation, noise_var=1.0):
    Y, H = _batch(Y, H)
    return np.stack([constellation.nearest(mmse_estimate(y, h, noise_var)) for y, h in zip(Y, H)])


def kde_bandwidth(samples):
    """Scott-rule bandwidth ``std * n^(-1/(d+4))``, one per sample set.

    The noise coordinates are exchangeable, so the spread is pooled over all of
    them; per-coordinate estimates from a few heavy-tailed draws are too noisy.
    Returns (..., d). Sets with no spread (including a single sample) get 1.
    """
    samples = np.asarray(samples, dtype=np.float64)
    n, d = samples.shape[-2:]
    if n > 1:
        centered = samples - samples.mean(axis=-2, keepdims=True)
        std = np.sqrt(np.sum(centered ** 2, axis=(-2, -1)) / (d * (n - 1)))
    else:
        std = np.zeros(samples.shape[:-2])
    h = std * n ** (-1.0 / (d + 4))
    h = np.where(h > 1e-12, h, 1.0)
    return np.broadcast_to(h[..., None], samples.shape[:-2] + (d,))


def kde_log_density(points, samples):
    """Gaussian product-kernel log density (up to a constant) of ``points`` (..., K, d)
    under ``samples`` (..., S, d)."""
    h = kde_bandwidth(samples)[..., None, :]
    z = (points[..., :, None, :] - samples[..., None, :, :]) / h[..., None, :]
    return logsumexp(-0.5 * np.sum(z * z, axis=-1), axis=-1)


def diffusion_mc_indices(Y, H, constellation, generated,
                         max_candidates=DEFAULT_MAX_CANDIDATES):
    """Rank candidates by a KDE built from generated residuals (B, S, 2N)."""
    Y, H = _batch(Y, H)
    generated = np.asarray(generated, dtype=np.float64)
    if generated.ndim == 2:
        generated = np.broadcast_to(generated, (len(Y),) + generated.shape)
    idx = candidate_indices(constellation.order, H.shape[2], max_candidates)
    res = complex_residuals(Y, H, constellation.points[idx])
    logp = kde_log_density(realify_vector(res), generated)
    dist = np.sum(np.abs(res) ** 2, axis=2)
    return idx[_select(-logp, dist)]


# Single-trial wrappers returning complex symbol vectors.

def euclidean_mle_detect(y, H, constellation):
    return constellation.points[mle_indices(y, H, constellation)[0]]


def zf_detect(y, H, constellation):
    return constellation.points[constellation.nearest(zf_estimate(y, H))]


def mmse_detect(y, H, constellation, noise_var=1.0):
    return constellation.points[constellation.nearest(mmse_estimate(y, H, noise_var))]


def genie_sas_detect(y, H, constellation, params, log_density=None):
    return constellation.points[genie_indices(y, H, constellation, params, log_density)[0]]


def detect(y, H, net, schedule, pairs, constellation, max_candidates=DEFAULT_MAX_CANDIDATES):
    """MLEI decision: the candidate whose residual has the smallest error score."""
    idx = mlei_indices(y, H, net, schedule, pairs, constellation, max_candidates)
    return constellation.points[idx[0]]


def diffusion_mc_detect(y, H, constellation, net, schedule, rng, n_samples=20):
    from .diffusion import ancestral_sample

    generated = ancestral_sample(net, schedule, rng, n_samples)
    return constellation.points[diffusion_mc_indices(y, H, constellation, generated[None])[0]]


class _Detector(BaseEstimator):
    """Shared predict plumbing: ``predict(Y, H)`` returns complex symbols (B, M)."""

    def fit(self, X=None, y=None):
        return self

    def _constellation(self):
        return Constellation.qpsk()

    def predict(self, Y, H):
        return self._constellation().points[self.predict_indices(Y, H)]


class EuclideanMLEDetector(_Detector):
    def predict_indices(self, Y, H):
        return mle_indices(Y, H, self._constellation())


class ZFDetector(_Detector):
    def predict_indices(self, Y, H):
        return zf_indices(Y, H, self._constellation())


class MMSEDetector(_Detector):
    def __init__(self, noise_var=1.0):
        self.noise_var = noise_var

    def predict_indices(self, Y, H):
        return mmse_indices(Y, H, self._constellation(), self.noise_var)


class GenieSaSDetector(_Detector):
    def __init__(self, alpha=1.5, sigma=1.0):
        self.alpha = alpha
        self.sigma = sigma

    def fit(self, X=None, y=None):
        self.log_density_ = SasLogDensity(NoiseParams(self.alpha, self.sigma))
        return self

    def predict_indices(self, Y, H):
        if not hasattr(self, "log_density_"):
            self.fit()
        return genie_indices(Y, H, self._constellation(), None, self.log_density_)


class MLEIDetector(_Detector):
    """Diffusion error-score detector.

    ``fit`` trains ``noise_model`` (a :class:`~mlei.diffusion.DiffusionNoiseModel`)
    on residual vectors ``y - H x`` in stacked real form.
    """

    def __init__(self, noise_model=None):
        self.noise_model = noise_model

    def fit(self, X, y=None):
        from sklearn.base import clone

        from .diffusion import DiffusionNoiseModel

        base = self.noise_model if self.noise_model is not None else DiffusionNoiseModel()
        self.noise_model_ = clone(base).fit(X)
        return self

    def predict_indices(self, Y, H):
        check_is_fitted(self, "noise_model_")
        m = self.noise_model_
        return mlei_indices(Y, H, m.network_, m.schedule_, m.sampling_pairs(),
                            self._constellation())


class DiffusionSamplingDetector(_Detector):
    """Decides by a KDE over residuals drawn from the fitted diffusion model."""

    def __init__(self, noise_model=None, n_samples=20, random_state=None):
        self.noise_model = noise_model
        self.n_samples = n_samples
        self.random_state = random_state

    def fit(self, X, y=None):
        from sklearn.base import clone

        from .diffusion import DiffusionNoiseModel

        base = self.noise_model if self.noise_model is not None else DiffusionNoiseModel()
        self.noise_model_ = clone(base).fit(X)
        return self

    def predict_indices(self, Y, H):
        from .diffusion import denoise

        check_is_fitted(self, "noise_model_")
        Y, H = _batch(Y, H)
        m = self.noise_model_
        rng = np.random.default_rng(self.random_state)
        noise = rng.standard_normal((m.schedule_.T, len(Y), self.n_samples, m.n_features_in_))
        generated = denoise(m.network_, m.schedule_, noise)
        return diffusion_mc_indices(Y, H, self._constellation(), generated)
