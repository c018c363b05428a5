"""Denoising diffusion model over real residual vectors.

The network predicts the Gaussian noise that was mixed into a residual
vector at step ``t``. It is a stack of same-padded 1-D convolutions over a
single channel of length ``2N`` with feature-wise scale/bias conditioning on
the step.
"""

import logging
import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_array, check_is_fitted

from .kernel import (
    Adam,
    NonFiniteError,
    ParamStore,
    ShapeError,
    Tape,
    _conv_fwd,
    dense_forward,
    film,
)

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"MLEINN1\0"
_HEADER = struct.Struct("<6I")


class ConfigurationError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    """Per-step coefficients; arrays are indexed by ``t - 1``."""

    T: int
    beta: np.ndarray
    gamma: np.ndarray
    gamma_bar: np.ndarray
    sigma2: np.ndarray

    def gbar(self, t):
        return self.gamma_bar[np.asarray(t) - 1]

    def check_step(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"step must lie in 1..{self.T}, got {t}")


def make_linear_schedule(T, beta_start=0.05, beta_end=0.95, max_final_gamma_bar=0.01):
    """Linear noise schedule with ``beta`` spaced from ``beta_start`` to ``beta_end``.

    Raises ConfigurationError when the last cumulative coefficient is not
    close enough to zero for ``n_T`` to be treated as standard normal.
    """
    T = int(T)
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    gamma = 1.0 - beta
    gamma_bar = np.cumprod(gamma)
    if gamma_bar[-1] > max_final_gamma_bar:
        raise ConfigurationError(
            f"T={T} leaves gamma_bar_T={gamma_bar[-1]:.4g} > {max_final_gamma_bar}; "
            "use more steps")
    prev = np.concatenate([[1.0], gamma_bar[:-1]])
    sigma2 = (1.0 - gamma) * (1.0 - prev) / (1.0 - gamma_bar)
    return Schedule(T, beta, gamma, gamma_bar, sigma2)


def perturb(n0, t, eps, schedule):
    """``sqrt(gbar_t) * n0 + sqrt(1 - gbar_t) * eps``; ``t`` may be per-row."""
    schedule.check_step(t)
    gb = np.asarray(schedule.gbar(t), dtype=np.float64)
    if gb.ndim:
        gb = gb.reshape(gb.shape + (1,) * (np.ndim(n0) - gb.ndim))
    return np.sqrt(gb) * np.asarray(n0) + np.sqrt(1.0 - gb) * np.asarray(eps)


def sinusoidal_embedding(t, dim=64):
    """Sin/cos encoding of integer steps, shape (len(t), dim).

    Angular frequencies run geometrically from 1 down to 1e-4.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / max(half - 1, 1))
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class NoiseNetwork:
    """Conv noise predictor ``eps_theta(n_t, t)``.

    Up path 1 -> 16 -> 64 channels (ReLU after each), step conditioning,
    down path 64 -> 16 -> 4 -> 1 (ReLU between, none after the last).
    """

    up_channels = (16, 64)
    down_channels = (16, 4, 1)

    def __init__(self, n_antennas, T, c_init=1, c_max=64, kernel_size=3, embed_dim=64,
                 random_state=None, zero=False):
        if c_init != 1 or c_max != self.up_channels[-1]:
            raise ConfigurationError("only c_init=1, c_max=64 is supported")
        if kernel_size % 2 == 0:
            raise ConfigurationError("kernel_size must be odd")
        self.n_antennas = int(n_antennas)
        self.T = int(T)
        self.c_init = c_init
        self.c_max = c_max
        self.kernel_size = kernel_size
        self.embed_dim = embed_dim
        self.params = ParamStore()
        rng = check_random_state(random_state)
        k = kernel_size

        def conv(name, c_in, c_out):
            bound = np.sqrt(1.0 / (c_in * k))
            w = np.zeros((c_out, c_in, k)) if zero else rng.uniform(-bound, bound, (c_out, c_in, k))
            self.params.add(name + ".weight", w)
            self.params.add(name + ".bias", np.zeros(c_out))

        chans = (c_init,) + self.up_channels
        self.up_layers = []
        for i in range(len(self.up_channels)):
            conv(f"up{i}", chans[i], chans[i + 1])
            self.up_layers.append(f"up{i}")
        bound = np.sqrt(1.0 / embed_dim)
        w = np.zeros((2 * c_max, embed_dim)) if zero else rng.uniform(-bound, bound, (2 * c_max, embed_dim))
        self.params.add("time.weight", w)
        self.params.add("time.bias", np.zeros(2 * c_max))
        chans = (c_max,) + self.down_channels
        self.down_layers = []
        for i in range(len(self.down_channels)):
            conv(f"down{i}", chans[i], chans[i + 1])
            self.down_layers.append(f"down{i}")
        self._embed_cache = sinusoidal_embedding(np.arange(1, self.T + 1), embed_dim)

    @classmethod
    def zeros(cls, n_antennas, T, **kwargs):
        return cls(n_antennas, T, zero=True, **kwargs)

    @property
    def length(self):
        return 2 * self.n_antennas

    def _embed(self, t):
        return self._embed_cache[np.asarray(t) - 1]

    def _prepare(self, n_t, t):
        n_t = np.asarray(n_t, dtype=np.float64)
        if n_t.shape[-1] != self.length:
            raise ShapeError(f"expected vectors of length {self.length}, got {n_t.shape}")
        batch = n_t.reshape(-1, self.length)
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), n_t.shape[:-1]).reshape(-1)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"step must lie in 1..{self.T}")
        return batch, t

    def predict_noise(self, n_t, t):
        """Forward pass with frozen parameters. ``n_t`` is (..., 2N); ``t`` broadcasts."""
        batch, t = self._prepare(n_t, t)
        p = self.params
        h = batch[:, :, None]
        for name in self.up_layers:
            h = _conv_fwd(h, p[name + ".weight"], p[name + ".bias"])[0]
            np.maximum(h, 0.0, out=h)
        steps = np.unique(t)
        if len(steps) == 1:
            # one shared step: fold the scale into the next kernel and the
            # shift into a position-dependent offset (edges see zero padding)
            sb = dense_forward(self._embed(steps), p["time.weight"], p["time.bias"])[0]
            c = self.c_max
            name = self.down_layers[0]
            kernel = p[name + ".weight"] * (1.0 + sb[:c])[None, :, None]
            offset = _conv_fwd(np.broadcast_to(sb[c:], (1, h.shape[1], c)),
                               p[name + ".weight"], p[name + ".bias"])[0]
            h = _conv_fwd(h, kernel, np.zeros(len(kernel)))[0]
            h += offset
            rest = self.down_layers[1:]
        else:
            sb = dense_forward(self._embed(t), p["time.weight"], p["time.bias"])
            h = film(h, sb)
            rest = self.down_layers
            h = _conv_fwd(h, p[rest[0] + ".weight"], p[rest[0] + ".bias"])[0]
            rest = rest[1:]
        for name in rest:
            np.maximum(h, 0.0, out=h)
            h = _conv_fwd(h, p[name + ".weight"], p[name + ".bias"])[0]
        out = h[:, :, 0]
        if not np.all(np.isfinite(out)):
            raise NonFiniteError("network produced non-finite output")
        return out.reshape(np.shape(n_t))

    def record(self, tape, n_t, t):
        """Same forward pass as :meth:`predict_noise`, recorded on ``tape``.

        Returns ``(input_var, output_var)``; the output is (B, 2N, 1).
        """
        batch, t = self._prepare(n_t, t)
        x = tape.input(batch[:, :, None])
        h = x
        for name in self.up_layers:
            h = tape.relu(tape.conv1d(h, tape.param(name + ".weight"), tape.param(name + ".bias")))
        emb = tape.input(self._embed(t))
        sb = tape.dense(emb, tape.param("time.weight"), tape.param("time.bias"))
        h = tape.film(h, sb)
        last = len(self.down_layers) - 1
        for i, name in enumerate(self.down_layers):
            h = tape.conv1d(h, tape.param(name + ".weight"), tape.param(name + ".bias"))
            if i < last:
                h = tape.relu(h)
        return x, h

    def copy(self):
        other = NoiseNetwork.__new__(NoiseNetwork)
        other.__dict__.update(self.__dict__)
        other.params = self.params.copy()
        return other

    def save(self, path):
        header = _HEADER.pack(self.T, self.c_init, self.c_max, self.kernel_size,
                              self.embed_dim, self.n_antennas)
        with open(path, "wb") as fh:
            fh.write(MODEL_MAGIC)
            fh.write(header)
            fh.write(self.params.flat().astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:8] != MODEL_MAGIC:
            raise ModelFormatError(f"{path}: bad magic {blob[:8]!r}")
        T, c_init, c_max, k, embed_dim, n = _HEADER.unpack_from(blob, 8)
        net = cls.zeros(n, T, c_init=c_init, c_max=c_max, kernel_size=k, embed_dim=embed_dim)
        body = blob[8 + _HEADER.size:]
        if len(body) != 8 * net.params.size:
            raise ModelFormatError(
                f"{path}: expected {net.params.size} parameters, found {len(body) / 8:g}")
        net.params.load_flat(np.frombuffer(body, dtype="<f8"))
        return net


def loss_and_grad(net, n_t, t, eps):
    """Mean per-example ``||eps - eps_theta(n_t, t)||^2``; fills the grad buffers."""
    tape = Tape(net.params)
    _, out = net.record(tape, n_t, t)
    loss = tape.sq_error(out, eps[:, :, None])
    tape.backward(loss, np.array(1.0 / len(n_t)))
    return float(loss.value) / len(n_t)


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 128
    learning_rate: float = 1e-3
    patience: int = 20
    validation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ConfigurationError("epochs, batch_size and patience must be positive")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigurationError("validation_fraction must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")


@dataclass
class TrainResult:
    net: NoiseNetwork
    train_loss: list
    val_loss: list
    best_epoch: int


class TrainingDiverged(RuntimeError):
    def __init__(self, message, train_loss):
        super().__init__(message)
        self.train_loss = train_loss


def train(net, data, schedule, cfg, rng=None):
    """Fit ``net`` in place to residual vectors ``data`` (n_samples, 2N).

    Each example gets a fresh uniform step and Gaussian noise per epoch.
    Stops after ``cfg.epochs`` or once the validation loss has not improved
    for ``cfg.patience`` epochs; the best parameters are restored.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or len(data) == 0:
        raise ValueError("training data must be a nonempty (n_samples, 2N) array")
    if schedule.T != net.T:
        raise ConfigurationError(f"schedule has T={schedule.T}, network expects {net.T}")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    n_val = max(1, int(round(cfg.validation_fraction * len(data)))) if len(data) > 1 else 0
    order = rng.permutation(len(data))
    val, fit = data[order[:n_val]], data[order[n_val:]]
    if len(fit) == 0:
        fit, val = data, data[:0]
    # fixed draws so the validation curve is comparable across epochs
    val_t = rng.integers(1, schedule.T + 1, size=len(val))
    val_eps = rng.standard_normal(val.shape)
    val_in = perturb(val, val_t, val_eps, schedule) if len(val) else val

    opt = Adam(net.params, lr=cfg.learning_rate)
    net.params.zero_grad()
    train_trace, val_trace = [], []
    best, best_epoch, best_params = np.inf, 0, net.params.copy()
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(fit))
        total = 0.0
        for start in range(0, len(fit), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            n0 = fit[idx]
            t = rng.integers(1, schedule.T + 1, size=len(idx))
            eps = rng.standard_normal(n0.shape)
            loss = loss_and_grad(net, perturb(n0, t, eps, schedule), t, eps)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch + 1}", train_trace)
            try:
                opt.step()
            except NonFiniteError as exc:
                raise TrainingDiverged(str(exc), train_trace) from exc
            total += loss * len(idx)
        train_trace.append(total / len(fit))
        if len(val):
            v = float(np.mean(np.sum((val_eps - net.predict_noise(val_in, val_t)) ** 2, axis=1)))
        else:
            v = train_trace[-1]
        val_trace.append(v)
        if v < best:
            best, best_epoch = v, epoch
            best_params = net.params.copy()
        elif epoch - best_epoch >= cfg.patience:
            logger.info("early stop at epoch %d (best %d, val %.4f)", epoch + 1, best_epoch + 1, best)
            break
    net.params.load_flat(best_params.flat())
    return TrainResult(net, train_trace, val_trace, best_epoch + 1)


def denoise(net, schedule, noise):
    """Run the reverse chain from pre-drawn Gaussians.

    ``noise`` has shape (T, ..., 2N): ``noise[0]`` is ``n_T`` and
    ``noise[T - t + 1]`` is the fresh draw used when leaving step ``t`` (t > 1).
    """
    noise = np.asarray(noise, dtype=np.float64)
    n = noise[0]
    for i, t in enumerate(range(schedule.T, 0, -1)):
        g, gb = schedule.gamma[t - 1], schedule.gamma_bar[t - 1]
        eps_hat = net.predict_noise(n, t)
        n = (n - (1.0 - g) / np.sqrt(1.0 - gb) * eps_hat) / np.sqrt(g)
        if t > 1:
            n = n + np.sqrt(schedule.sigma2[t - 1]) * noise[i + 1]
    return n


def ancestral_sample(net, schedule, rng, n_samples=None):
    """Draw residual vectors from the learned distribution.

    Returns a single (2N,) vector when ``n_samples`` is None.
    """
    shape = (net.length,) if n_samples is None else (n_samples, net.length)
    return denoise(net, schedule, rng.standard_normal((schedule.T,) + shape))


class DiffusionNoiseModel(BaseEstimator):
    """Learns an unknown noise law from residual vectors.

    ``score_samples`` returns the negated diffusion error score, which ranks
    candidate residuals by approximate log-likelihood (higher is likelier).

    Parameters
    ----------
    steps : int
        Number of diffusion steps ``T``.
    epochs, batch_size, learning_rate, patience, validation_fraction
        Training controls; see :class:`TrainConfig`.
    pairs : sequence of int or None
        Steps used for scoring, each paired with an all-zero noise vector.
        None means every step ``1..T``.
    random_state : int, Generator or None
    """

    def __init__(self, steps=10, epochs=500, batch_size=128, learning_rate=1e-3,
                 patience=20, validation_fraction=0.1, pairs=None, random_state=None):
        self.steps = steps
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.pairs = pairs
        self.random_state = random_state

    def _seed(self):
        rs = self.random_state
        if rs is None or isinstance(rs, (int, np.integer)):
            return rs
        return int(check_random_state(rs).randint(2**31))

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] % 2:
            raise ValueError("residual vectors must have even length 2N")
        self.schedule_ = make_linear_schedule(self.steps)
        seed = self._seed()
        ss = np.random.SeedSequence(seed)
        init_seed, train_seed = ss.spawn(2)
        net = NoiseNetwork(X.shape[1] // 2, self.steps,
                           random_state=np.random.RandomState(init_seed.generate_state(1)[0]))
        cfg = TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.patience,
                          self.validation_fraction, 0)
        result = train(net, X, self.schedule_, cfg, np.random.default_rng(train_seed))
        self.network_ = result.net
        self.loss_curve_ = result.train_loss
        self.validation_curve_ = result.val_loss
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_network(cls, net, pairs=None):
        model = cls(steps=net.T, pairs=pairs)
        model.network_ = net
        model.schedule_ = make_linear_schedule(net.T)
        model.n_features_in_ = net.length
        model.loss_curve_ = []
        model.validation_curve_ = []
        return model

    def sampling_pairs(self):
        check_is_fitted(self, "network_")
        steps = range(1, self.schedule_.T + 1) if self.pairs is None else self.pairs
        return [(int(s), np.zeros(self.n_features_in_)) for s in steps]

    def error_score(self, X):
        from .detectors import error_score

        check_is_fitted(self, "network_")
        X = np.asarray(X, dtype=np.float64)
        return error_score(self.network_, self.schedule_, self.sampling_pairs(), X)

    def score_samples(self, X):
        return -self.error_score(check_array(X, dtype=np.float64))

    def sample(self, n_samples=1, random_state=None):
        check_is_fitted(self, "network_")
        rng = np.random.default_rng(random_state)
        return ancestral_sample(self.network_, self.schedule_, rng, n_samples)
