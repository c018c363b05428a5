import hashlib

import numpy as np
import pytest

from mlei import harness
from mlei.detectors import Constellation
from mlei.diffusion import ConfigurationError, NoiseNetwork
from mlei.harness import ExperimentConfig, ResultRow, compute_ber

QPSK = Constellation.qpsk()


def small_config(**kw):
    base = dict(alphas=(1.5,), snrs_db=(0.0, 20.0), test_size=40, train_size=60,
                methods=("mle", "zf"))
    base.update(kw)
    return ExperimentConfig(**base)


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert (cfg.m, cfg.n, cfg.p) == (4, 5, 4)
        assert cfg.wavelength == pytest.approx(2.998e8 / 28e9)
        assert cfg.spacing == pytest.approx(cfg.wavelength / 2)
        assert cfg.aperture == pytest.approx(32 * cfg.wavelength)
        assert cfg.alphas == (1.1, 1.5, 1.9, 2.0)
        assert cfg.snrs_db == (0, 5, 10, 15, 20, 25)

    def test_parse(self):
        cfg = ExperimentConfig.from_text(
            "# comment\nm = 2\nalphas = 1.2, 1.8\nicsi = true\nmethods = mle,mlei\n"
            "sampling_pairs = 1,5\nsteps = 5\n")
        assert cfg.m == 2 and cfg.alphas == (1.2, 1.8) and cfg.icsi
        assert cfg.methods == ("mle", "mlei")
        assert cfg.pair_steps(5) == [1, 5]

    def test_round_trip(self):
        cfg = small_config(icsi=True, seed=9)
        assert ExperimentConfig.from_text(cfg.to_text()) == cfg

    @pytest.mark.parametrize("text", ["bogus = 1\n", "m = two\n", "m\n", "m = 0\n", "alphas =\n",
                                      "methods = mle, detnet\n", "icsi = maybe\n", "p = 16\n"])
    def test_rejects(self, text):
        with pytest.raises(ValueError):
            ExperimentConfig.from_text(text)

    def test_pairs(self):
        cfg = small_config()
        assert cfg.pair_steps(10) == list(range(1, 11))
        with pytest.raises(ConfigurationError):
            small_config(sampling_pairs="0,3").pair_steps(10)
        with pytest.raises(ConfigurationError):
            small_config(sampling_pairs="11").pair_steps(10)


class TestDataset:
    def test_residual_identity(self):
        cfg = small_config()
        data = harness.gen_dataset(cfg, seed=1, size=30)
        res = data.y - np.einsum("knm,km->kn", data.A, data.x)
        trials = harness.draw_trials(cfg, 1.5, 30, 1, key=(3,))
        np.testing.assert_allclose(res, trials.noise, atol=1e-12)
        assert data.residuals().shape == (30, 10)

    def test_round_trip_and_layout(self, tmp_path):
        cfg = small_config()
        data = harness.gen_dataset(cfg, seed=2, size=5)
        path = tmp_path / "d.bin"
        harness.write_dataset(path, data)
        blob = path.read_bytes()
        assert blob[:8] == b"MLEIDS1\0"
        assert np.frombuffer(blob[8:20], "<u4").tolist() == [4, 5, 5]
        rec = np.frombuffer(blob[20:], "<f8").reshape(5, -1)
        np.testing.assert_array_equal(rec[0, :4], data.x[0].real)
        np.testing.assert_array_equal(rec[0, 18:38], data.A[0].real.ravel())
        back = harness.read_dataset(path)
        for a, b in ((back.x, data.x), (back.y, data.y), (back.A, data.A)):
            assert a.tobytes() == b.tobytes()

    def test_bad_files(self, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"XXXXXXXX" + bytes(12))
        with pytest.raises(ValueError):
            harness.read_dataset(bad)
        cfg = small_config()
        harness.write_dataset(bad, harness.gen_dataset(cfg, seed=2, size=3))
        bad.write_bytes(bad.read_bytes()[:-8])
        with pytest.raises(ValueError):
            harness.read_dataset(bad)

    def test_byte_identical(self, tmp_path):
        cfg = small_config()
        for name in ("a", "b"):
            harness.write_dataset(tmp_path / name, harness.gen_dataset(cfg, seed=5, size=20))
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_snr_scaling(self):
        cfg = small_config(snrs_db=(0.0, 20.0))
        data = harness.gen_dataset(cfg, seed=1, size=4)
        amp = np.abs(data.x[:, 0])
        assert amp[1] / amp[0] == pytest.approx(10.0)
        assert amp[2] == pytest.approx(amp[0])


class TestICSI:
    def test_vanishing(self, rng):
        A = rng.normal(size=(5, 4)) + 1j * rng.normal(size=(5, 4))
        e = harness.icsi_perturb(A, 200.0, rng) - A
        assert np.linalg.norm(e) / np.linalg.norm(A) < 1e-9

    def test_zero_db_variance(self, rng):
        A = rng.normal(size=(5, 4)) + 1j * rng.normal(size=(5, 4))
        ratios = [np.linalg.norm(harness.icsi_perturb(A, 0.0, rng) - A) ** 2 / np.linalg.norm(A) ** 2
                  for _ in range(1000)]
        assert np.mean(ratios) == pytest.approx(1.0, rel=0.05)


class TestBER:
    def test_perfect(self):
        truth = np.zeros((10, 4), dtype=int)
        errors, ber, lo, hi = compute_ber(truth, truth, QPSK)
        assert errors == 0 and ber == 0 and lo == 0 and hi > 0

    def test_single_gray_bit(self):
        truth = np.zeros((25, 4), dtype=int)
        dec = truth.copy()
        dec[3, 2] = 1
        errors, ber, _, _ = compute_ber(dec, truth, QPSK)
        assert errors == 1 and ber == pytest.approx(1 / 200)

    def test_complex_symbols(self):
        truth = QPSK.points[np.array([[0, 1], [2, 3]])]
        dec = QPSK.points[np.array([[3, 1], [2, 3]])]
        assert compute_ber(dec, truth, QPSK)[0] == 2

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            compute_ber(np.zeros((3, 4), int), np.zeros((2, 4), int), QPSK)

    def test_wilson(self):
        lo, hi = harness.wilson_interval(10, 100)
        # closed form Wilson interval
        z, p, n = 1.959963984540054, 0.1, 100
        centre = (p + z * z / (2 * n)) / (1 + z * z / n)
        half = z / (1 + z * z / n) * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
        assert (lo, hi) == pytest.approx((centre - half, centre + half), rel=1e-9)

    def test_row_csv(self):
        row = ResultRow("mle", 1.1, 25.0, 2000, 123, 123 / 16000, 0.0064123456, 0.0091, 0)
        assert row.as_csv() == ["mle", "1.1", "25", "2000", "123", "0.0076875", "0.00641235",
                                "0.0091", "0"]


class TestSweep:
    def test_row_count_and_csv(self, tmp_path):
        cfg = small_config(alphas=(1.1, 2.0), methods=("mle", "zf", "mmse", "genie"))
        rows = harness.run_sweep(cfg)
        assert len(rows) == 2 * 2 * 4
        for r in rows:
            assert 0 <= r.ber <= 1
            assert r.ber == r.bit_errors / (r.trials * 4 * 2)
            assert r.ci95_low <= r.ber <= r.ci95_high
        harness.write_csv(tmp_path / "r.csv", rows)
        text = (tmp_path / "r.csv").read_text()
        assert text.splitlines()[0] == "method,alpha,snr_db,trials,bit_errors,ber,ci95_low,ci95_high,seed"
        back = harness.read_csv(tmp_path / "r.csv")
        assert [(r.method, r.bit_errors) for r in back] == [(r.method, r.bit_errors) for r in rows]

    def test_deterministic_csv(self, tmp_path):
        cfg = small_config(icsi=True)
        for name in ("a.csv", "b.csv"):
            harness.write_csv(tmp_path / name, harness.run_sweep(cfg))
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_noiseless_mle_zero(self):
        cfg = small_config(snrs_db=(200.0,), methods=("mle",))
        rows = harness.run_sweep(cfg)
        assert rows[0].bit_errors == 0

    def test_missing_model(self):
        with pytest.raises(ConfigurationError):
            harness.run_sweep(small_config(methods=("mlei",)))

    def test_paired_trials(self, monkeypatch):
        # every method sees byte-identical (Y, H) within one (alpha, SNR) point
        seen = {}
        real = harness.decide_indices

        def spy(method, Y, H, *args, **kw):
            seen.setdefault(method, []).append(hashlib.sha256(Y.tobytes() + np.ascontiguousarray(H).tobytes()).hexdigest())
            return real(method, Y, H, *args, **kw)

        monkeypatch.setattr(harness, "decide_indices", spy)
        harness.run_sweep(small_config(methods=("mle", "zf", "mmse"), icsi=True))
        hashes = list(seen.values())
        assert hashes[0] == hashes[1] == hashes[2]
        assert len(set(hashes[0])) == 2  # distinct SNR points

    def test_mlei_zero_model_equals_mle(self):
        cfg = small_config(methods=("mle", "mlei"))
        rows = harness.run_sweep(cfg, models=NoiseNetwork.zeros(5, 10))
        by = {(r.method, r.snr_db): r.bit_errors for r in rows}
        for snr in cfg.snrs_db:
            assert by[("mle", snr)] == by[("mlei", snr)]

    def test_diffusion_runs(self):
        cfg = small_config(methods=("diffusion",), diffusion_samples=3, test_size=5)
        rows = harness.run_sweep(cfg, models={1.5: NoiseNetwork(5, 10, random_state=0)})
        assert len(rows) == 2

    def test_gaussian_sampler_reduction(self):
        # alpha = 2 through the stable sampler vs a pure Gaussian rerun of the same trials
        cfg = small_config(alphas=(2.0,), snrs_db=(5.0,), test_size=400, methods=("mle",))
        row = harness.run_sweep(cfg)[0]
        trials = harness.draw_trials(cfg, 2.0, cfg.test_size, cfg.seed, key=(harness.grid_key(2.0),))
        rng = np.random.default_rng(77)
        noise = np.sqrt(2.0) * (rng.normal(size=trials.noise.shape) + 1j * rng.normal(size=trials.noise.shape))
        c = harness.signal_scale_for_snr(5.0, cfg.noise(2.0), cfg.unit_signal_power)
        Y = np.einsum("bnm,bm->bn", c * trials.A, QPSK.points[trials.symbols]) + noise
        from mlei.detectors import mle_indices
        errors, ber, lo, hi = compute_ber(mle_indices(Y, c * trials.A, QPSK), trials.symbols, QPSK)
        assert ResultRow("mle", 2.0, 5.0, 400, errors, ber, lo, hi).overlaps(row)
