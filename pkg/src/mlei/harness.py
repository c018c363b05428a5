"""Datasets, BER sweeps and result files for the near-field MIMO case study."""

import csv
import dataclasses
import logging
import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.stats import binomtest

from . import detectors as det
from .channel import (SPEED_OF_LIGHT, ArrayGeometry, build_channel, fresnel_bounds, realify_vector,
                      sample_placements)
from .detectors import Constellation, DetectorKind
from .diffusion import ConfigurationError, NoiseNetwork, denoise, make_linear_schedule, train
from .stable import NoiseParams, SasLogDensity, sample_sas, signal_scale_for_snr

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"MLEIDS1\0"
_DS_HEADER = struct.Struct("<3I")
CSV_HEADER = ["method", "alpha", "snr_db", "trials", "bit_errors", "ber",
              "ci95_low", "ci95_high", "seed"]

# independent random streams per trial
_STREAM_TRIAL, _STREAM_ICSI, _STREAM_SAMPLING, _STREAM_TRAIN = range(4)


@dataclass
class ExperimentConfig:
    m: int = 4
    n: int = 5
    p: int = 4
    carrier_freq: float = 28e9
    spacing: float = None
    aperture: float = None
    alphas: tuple = (1.1, 1.5, 1.9, 2.0)
    snrs_db: tuple = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0)
    sigma: float = 1.0
    train_size: int = 10000
    test_size: int = 2000
    seed: int = 0
    methods: tuple = ("mle", "zf", "mmse", "diffusion", "genie", "mlei")
    icsi: bool = False
    sampling_pairs: str = "all"
    steps: int = 10
    diffusion_samples: int = 20

    def __post_init__(self):
        if self.spacing is None:
            self.spacing = self.wavelength / 2
        if self.aperture is None:
            self.aperture = 32 * self.wavelength
        for name in ("m", "n", "p", "train_size", "test_size", "steps", "diffusion_samples"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.p != 4:
            raise ConfigurationError("only QPSK (p = 4) is implemented")
        if not self.alphas or not self.snrs_db or not self.methods:
            raise ConfigurationError("alphas, snrs_db and methods must be nonempty")
        for method in self.methods:
            DetectorKind(method)
        self.alphas = tuple(float(a) for a in self.alphas)
        self.snrs_db = tuple(float(s) for s in self.snrs_db)
        self.methods = tuple(self.methods)

    @property
    def wavelength(self):
        return SPEED_OF_LIGHT / self.carrier_freq

    @property
    def geometry(self):
        return ArrayGeometry(self.n, self.spacing, self.wavelength, self.aperture)

    @property
    def unit_signal_power(self):
        # per real dimension, unit-energy symbols, |a_nm| ~ 1 in the Fresnel zone
        return self.m / 2.0

    def noise(self, alpha):
        return NoiseParams(alpha, self.sigma)

    def pair_steps(self, T):
        spec = str(self.sampling_pairs).strip().lower()
        if spec == "all":
            return list(range(1, T + 1))
        steps = [int(s) for s in spec.split(",") if s.strip()]
        if not steps or min(steps) < 1 or max(steps) > T:
            raise ConfigurationError(f"sampling_pairs {self.sampling_pairs!r} invalid for T={T}")
        return steps

    @classmethod
    def from_text(cls, text):
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in fields:
                raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(key, value)
        return cls(**values)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(_fmt(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            else:
                v = _fmt(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_INT_KEYS = {"m", "n", "p", "train_size", "test_size", "seed", "steps", "diffusion_samples"}
_FLOAT_KEYS = {"carrier_freq", "spacing", "aperture", "sigma"}


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(key, value):
    try:
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
        if key in ("alphas", "snrs_db"):
            return tuple(float(v) for v in value.split(",") if v.strip())
        if key == "methods":
            return tuple(v.strip() for v in value.split(",") if v.strip())
        if key == "icsi":
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return value.lower() in ("true", "1", "yes")
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {value!r}") from exc
    return value


def grid_key(value):
    """Stream key for a grid value (alpha or SNR), independent of grid position."""
    return int(round(float(value) * 1000)) + 2**31


def stream(seed, *key):
    """Independent generator for ``key`` under ``seed`` (SeedSequence spawn key)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


@dataclass
class Dataset:
    """Records ``y = A x + n``; ``x`` holds the transmitted (scaled) symbols."""

    x: np.ndarray  # (K, M) complex
    y: np.ndarray  # (K, N) complex
    A: np.ndarray  # (K, N, M) complex

    def __len__(self):
        return len(self.x)

    def residuals(self):
        """Stacked real residual vectors ``[Re n, Im n]``, shape (K, 2N)."""
        return realify_vector(self.y - np.einsum("knm,km->kn", self.A, self.x))


def write_dataset(path, data):
    k, m = data.x.shape
    n = data.y.shape[1]
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(_DS_HEADER.pack(m, n, k))
        for i in range(k):
            a = data.A[i]
            rec = np.concatenate([data.x[i].real, data.x[i].imag, data.y[i].real, data.y[i].imag,
                                  a.real.ravel(), a.imag.ravel()])
            fh.write(rec.astype("<f8").tobytes())


def read_dataset(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file (magic {blob[:8]!r})")
    m, n, k = _DS_HEADER.unpack_from(blob, 8)
    width = 2 * m + 2 * n + 2 * n * m
    body = np.frombuffer(blob, dtype="<f8", offset=8 + _DS_HEADER.size)
    if body.size != k * width:
        raise ValueError(f"{path}: header declares {k} records, body holds {body.size / width:g}")
    rec = body.reshape(k, width)
    o = np.cumsum([0, m, m, n, n, n * m, n * m])
    x = rec[:, o[0]:o[1]] + 1j * rec[:, o[1]:o[2]]
    y = rec[:, o[2]:o[3]] + 1j * rec[:, o[3]:o[4]]
    A = (rec[:, o[4]:o[5]] + 1j * rec[:, o[5]:o[6]]).reshape(k, n, m)
    return Dataset(x, y, A)


@dataclass
class Trials:
    """SNR-independent ingredients of a batch of test transmissions."""

    A: np.ndarray  # (B, N, M)
    symbols: np.ndarray  # (B, M) constellation indices
    noise: np.ndarray  # (B, N) complex


def draw_trials(cfg, alpha, count, seed, key=()):
    geometry = cfg.geometry
    bounds = fresnel_bounds(cfg.aperture, cfg.wavelength)
    params = cfg.noise(alpha)
    A = np.empty((count, cfg.n, cfg.m), dtype=np.complex128)
    symbols = np.empty((count, cfg.m), dtype=np.int64)
    noise = np.empty((count, cfg.n), dtype=np.complex128)
    for i in range(count):
        rng = stream(seed, _STREAM_TRIAL, *key, i)
        A[i] = build_channel(geometry, sample_placements(cfg.m, bounds, rng))
        symbols[i] = rng.integers(0, cfg.p, cfg.m)
        parts = sample_sas(params, (2, cfg.n), rng)
        noise[i] = parts[0] + 1j * parts[1]
    return Trials(A, symbols, noise)


def gen_dataset(cfg, seed=None, alpha=None, size=None):
    """Training records at one alpha with SNRs cycled over the grid."""
    seed = cfg.seed if seed is None else seed
    alpha = cfg.alphas[0] if alpha is None else alpha
    size = cfg.train_size if size is None else size
    trials = draw_trials(cfg, alpha, size, seed, key=(_STREAM_TRAIN,))
    params = cfg.noise(alpha)
    const = Constellation.qpsk()
    scale = np.array([signal_scale_for_snr(cfg.snrs_db[i % len(cfg.snrs_db)], params,
                                           cfg.unit_signal_power) for i in range(size)])
    x = scale[:, None] * const.points[trials.symbols]
    y = np.einsum("knm,km->kn", trials.A, x) + trials.noise
    return Dataset(x, y, trials.A)


def train_noise_model(residuals, steps, train_cfg, seed=0):
    """Fresh network fitted to real residual vectors (K, 2N); returns (net, TrainResult).

    Initialisation and minibatch streams are both derived from ``seed``.
    """
    residuals = np.asarray(residuals, dtype=np.float64)
    schedule = make_linear_schedule(steps)
    init_ss, train_ss = np.random.SeedSequence(seed).spawn(2)
    net = NoiseNetwork(residuals.shape[1] // 2, steps,
                       random_state=np.random.RandomState(init_ss.generate_state(1)[0]))
    result = train(net, residuals, schedule, train_cfg, np.random.default_rng(train_ss))
    return net, result


def icsi_perturb(A, snr_db, rng):
    """``A + E`` with circular Gaussian ``E`` of per-entry variance mean|a|^2 * 10^(-snr/10)."""
    A = np.asarray(A)
    var = np.mean(np.abs(A) ** 2) * 10.0 ** (-snr_db / 10.0)
    e = rng.standard_normal(A.shape + (2,)) * math.sqrt(var / 2.0)
    return A + (e[..., 0] + 1j * e[..., 1])


def wilson_interval(errors, total):
    if total == 0:
        return 0.0, 1.0
    ci = binomtest(int(errors), int(total)).proportion_ci(0.95, method="wilson")
    return float(ci.low), float(ci.high)


@dataclass
class ResultRow:
    method: str
    alpha: float
    snr_db: float
    trials: int
    bit_errors: int
    ber: float
    ci95_low: float
    ci95_high: float
    seed: int = 0

    def overlaps(self, other):
        return self.ci95_low <= other.ci95_high and other.ci95_low <= self.ci95_high

    def as_csv(self):
        return [self.method, f"{self.alpha:.6g}", f"{self.snr_db:.6g}", str(self.trials),
                str(self.bit_errors), f"{self.ber:.6g}", f"{self.ci95_low:.6g}",
                f"{self.ci95_high:.6g}", str(self.seed)]


def compute_ber(decisions, truth, constellation):
    """Gray-bit error count, BER and 95% Wilson interval for symbol arrays (B, M)."""
    decisions = np.asarray(decisions)
    truth = np.asarray(truth)
    if decisions.shape != truth.shape:
        raise ValueError(f"decisions {decisions.shape} vs truth {truth.shape}")
    if np.iscomplexobj(decisions) or np.iscomplexobj(truth):
        decisions = constellation.nearest(decisions)
        truth = constellation.nearest(truth)
    errors = int(np.sum(constellation.bits[decisions] != constellation.bits[truth]))
    total = truth.size * constellation.bits_per_symbol
    low, high = wilson_interval(errors, total)
    return errors, errors / total, low, high


def decide_indices(method, Y, H, cfg, alpha, model, seeds, log_density=None):
    """Constellation indices (B, M) chosen by ``method``; ``seeds`` are per-trial stream keys."""
    const = Constellation.qpsk()
    if method == DetectorKind.MLE:
        return det.mle_indices(Y, H, const)
    if method == DetectorKind.ZF:
        return det.zf_indices(Y, H, const)
    if method == DetectorKind.MMSE:
        return det.mmse_indices(Y, H, const)
    if method == DetectorKind.GENIE:
        return det.genie_indices(Y, H, const, cfg.noise(alpha), log_density)
    if model is None:
        raise ConfigurationError(f"method {method.value!r} needs a trained model for alpha={alpha}")
    schedule = make_linear_schedule(model.T)
    if method == DetectorKind.MLEI:
        pairs = det.zero_pairs(cfg.pair_steps(model.T), model.length)
        return det.mlei_indices(Y, H, model, schedule, pairs, const)
    # diffusion sampling baseline: fresh draws per trial from its own stream
    noise = np.stack([stream(*s).standard_normal((model.T, cfg.diffusion_samples, model.length))
                      for s in seeds], axis=1)
    out = np.empty((len(Y), cfg.m), dtype=np.int64)
    chunk = 64
    for start in range(0, len(Y), chunk):
        generated = denoise(model, schedule, noise[:, start:start + chunk])
        out[start:start + chunk] = det.diffusion_mc_indices(
            Y[start:start + chunk], H[start:start + chunk], const, generated)
    return out


def run_sweep(cfg, models=None, icsi=None, methods=None, alphas=None, snrs_db=None,
              progress=None):
    """BER rows for every (alpha, SNR, method); all methods see identical trials.

    ``models`` maps alpha to a trained :class:`NoiseNetwork` (or is a single
    network used for every alpha).
    """
    icsi = cfg.icsi if icsi is None else icsi
    methods = [DetectorKind(m) for m in (methods or cfg.methods)]
    alphas = cfg.alphas if alphas is None else alphas
    snrs_db = cfg.snrs_db if snrs_db is None else snrs_db
    const = Constellation.qpsk()
    rows = []
    for alpha in alphas:
        ai = grid_key(alpha)
        model = models.get(alpha) if isinstance(models, dict) else models
        if model is None and any(m in (DetectorKind.MLEI, DetectorKind.DIFFUSION) for m in methods):
            raise ConfigurationError(f"no trained model for alpha={alpha}")
        trials = draw_trials(cfg, alpha, cfg.test_size, cfg.seed, key=(ai,))
        log_density = SasLogDensity(cfg.noise(alpha)) if DetectorKind.GENIE in methods else None
        x = const.points[trials.symbols]
        for snr in snrs_db:
            si = grid_key(snr)
            c = signal_scale_for_snr(snr, cfg.noise(alpha), cfg.unit_signal_power)
            Y = np.einsum("bnm,bm->bn", c * trials.A, x) + trials.noise
            if icsi:
                A_est = np.stack([icsi_perturb(a, snr, stream(cfg.seed, _STREAM_ICSI, ai, si, i))
                                  for i, a in enumerate(trials.A)])
            else:
                A_est = trials.A
            H = c * A_est
            seeds = [(cfg.seed, _STREAM_SAMPLING, ai, si, i) for i in range(len(Y))]
            for method in methods:
                idx = decide_indices(method, Y, H, cfg, alpha, model, seeds, log_density)
                errors, ber, low, high = compute_ber(idx, trials.symbols, const)
                row = ResultRow(method.value, alpha, snr, len(Y), errors, ber, low, high, cfg.seed)
                rows.append(row)
                if progress:
                    progress(row)
    return rows


def write_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in rows:
            writer.writerow(row.as_csv())


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [ResultRow(r["method"], float(r["alpha"]), float(r["snr_db"]), int(r["trials"]),
                          int(r["bit_errors"]), float(r["ber"]), float(r["ci95_low"]),
                          float(r["ci95_high"]), int(r["seed"])) for r in reader]
