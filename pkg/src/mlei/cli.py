"""Command-line entry point: ``mlei gen-data | train | detect | sweep``."""

import argparse
import logging
import sys

import numpy as np

from . import harness
from .detectors import Constellation, DetectorKind
from .diffusion import ConfigurationError, NoiseNetwork, TrainConfig
from .harness import ExperimentConfig, ResultRow

log = logging.getLogger("mlei")


def _config(path):
    return ExperimentConfig.load(path) if path else ExperimentConfig()


def _model_path(template, alpha):
    return template.format(alpha=alpha) if "{alpha" in template else template


def cmd_gen_data(args):
    cfg = _config(args.config)
    data = harness.gen_dataset(cfg, seed=args.seed, alpha=args.alpha, size=args.size)
    harness.write_dataset(args.out, data)
    log.info("wrote %d records to %s", len(data), args.out)


def cmd_train(args):
    data = harness.read_dataset(args.data)
    residuals = data.residuals()
    cfg = _config(args.config)
    steps = args.steps or cfg.steps
    train_cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                            learning_rate=args.lr, patience=args.patience, seed=args.seed)
    net, result = harness.train_noise_model(residuals, steps, train_cfg, args.seed)
    net.save(args.model)
    log.info("trained %d epochs (best %d, val loss %.4f); saved %s", len(result.train_loss),
             result.best_epoch, min(result.val_loss), args.model)


def cmd_detect(args):
    cfg = _config(args.config)
    method = DetectorKind(args.method)
    data = harness.read_dataset(args.data)
    const = Constellation.qpsk()
    # transmit amplitude is known to the receiver
    scale = np.sqrt(np.mean(np.abs(data.x) ** 2, axis=1))
    truth = const.nearest(data.x / scale[:, None])
    H = scale[:, None, None] * data.A
    if args.icsi:
        rng = harness.stream(args.seed, 1)
        H = np.stack([harness.icsi_perturb(h, args.icsi_snr, rng) for h in H])
    alpha = args.alpha if args.alpha is not None else cfg.alphas[0]
    model = NoiseNetwork.load(_model_path(args.model, alpha)) if args.model else None
    seeds = [(args.seed, 2, i) for i in range(len(data))]
    idx = harness.decide_indices(method, data.y, H, cfg, alpha, model, seeds)
    errors, ber, low, high = harness.compute_ber(idx, truth, const)
    row = ResultRow(method.value, alpha, float("nan"), len(data), errors, ber, low, high, args.seed)
    print(",".join(harness.CSV_HEADER))
    print(",".join(row.as_csv()))


def cmd_sweep(args):
    cfg = _config(args.config)
    icsi = cfg.icsi or args.icsi
    needs_model = any(m in ("mlei", "diffusion") for m in cfg.methods)
    models = None
    if needs_model:
        if not args.model:
            raise ConfigurationError("--model is required for mlei/diffusion methods")
        models = {a: NoiseNetwork.load(_model_path(args.model, a)) for a in cfg.alphas}

    def progress(row):
        log.info("%-9s alpha=%g snr=%g ber=%.5f", row.method, row.alpha, row.snr_db, row.ber)

    rows = harness.run_sweep(cfg, models, icsi=icsi, progress=progress)
    harness.write_csv(args.out, rows)
    log.info("wrote %d rows to %s", len(rows), args.out)


def build_parser():
    parser = argparse.ArgumentParser(prog="mlei", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate a dataset of (x, y, A) records")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, help="noise exponent (default: first of the grid)")
    p.add_argument("--size", type=int, help="record count (default: train_size)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fit the noise network to dataset residuals")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--steps", type=int, help="diffusion steps T (default: config steps)")
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run one detector over a dataset and report BER")
    p.add_argument("--data", required=True)
    p.add_argument("--method", required=True, choices=[k.value for k in DetectorKind])
    p.add_argument("--model", help="model file; '{alpha}' is replaced by the noise exponent")
    p.add_argument("--config")
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--icsi", action="store_true", help="perturb the channel before detection")
    p.add_argument("--icsi-snr", type=float, default=10.0,
                   help="channel-estimate SNR in dB used with --icsi")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("sweep", help="BER over the (alpha, SNR, method) grid")
    p.add_argument("--config", required=True)
    p.add_argument("--model", help="model file; '{alpha}' is replaced by the noise exponent")
    p.add_argument("--out", required=True)
    p.add_argument("--icsi", action="store_true", help="imperfect CSI at the receiver")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, OSError) as exc:
        print(f"mlei {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
