"""Command-line entry point.

Exit codes: 0 success, 1 usage or parameter error, 2 data or format error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .datagen import SyntheticShiftSpec, generate_synthetic
from .encoder import EncoderConfig, FrozenWeights
from .errors import DataError, NumericalError, PDAError, ParameterError
from .metrics import domain_report, per_class_accuracy
from .training import (PDAModel, TrainConfig, UDADataset, build_banks, model_from_state,
                       predict, toy_gradcheck, train, zero_shot)

log = logging.getLogger("pda")

GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _kv(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return text


def _train_config(args):
    overrides = fileio.parse_config_text("\n".join(args.set or []), TrainConfig)
    return fileio.load_config(args.config, TrainConfig, overrides)


def _load_inputs(manifest_path):
    manifest = fileio.DatasetManifest.load(manifest_path)
    if not manifest.encoder:
        raise DataError("manifest names no encoder weights file")
    weights = fileio.load_weights(manifest.resolve(manifest.encoder))
    Xs, ys, Xt = manifest.load_training()
    data = UDADataset(Xs, ys, Xt, manifest.n_classes, manifest.kind)
    return manifest, weights, data


def cmd_generate(args):
    spec = SyntheticShiftSpec(
        n_classes=args.n_classes, n_source=args.n_source, n_target=args.n_target,
        d_in=args.d_model, n_patches=args.n_patches, class_sep=args.class_sep,
        domain_shift=args.domain_shift, noise_std=args.noise_std, seed=args.seed)
    ds = generate_synthetic(spec)
    enc = EncoderConfig(d_model=args.d_model, n_patches=args.n_patches, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    flat = lambda X: X.reshape(len(X), -1)  # noqa: E731
    fileio.write_embeddings(out / "source.pdae", flat(ds.X_source), labels=ds.y_source)
    fileio.write_embeddings(out / "target.pdae", flat(ds.X_target), eval_labels=ds.y_target)
    fileio.save_weights(out / "encoder.pdae",
                        FrozenWeights.init(enc, spec.n_classes, ds.prototypes))
    fileio.DatasetManifest(
        class_names=[f"class_{k}" for k in range(spec.n_classes)],
        source="source.pdae", target="target.pdae", kind="raw",
        n_patches=spec.n_patches, encoder="encoder.pdae",
    ).save(out / "manifest.json")
    print(f"wrote {out}/manifest.json")
    return 0


def cmd_train(args):
    manifest, weights, data = _load_inputs(args.manifest)
    config = _train_config(args)
    resume = fileio.load_checkpoint(args.resume) if args.resume else None
    log_path = args.log or str(Path(args.out).with_suffix(".log"))
    with fileio.TrainLog(log_path, config, weights.config) as tlog:
        result = train(data, config, weights, resume=resume,
                       stop_after_epoch=args.stop_after_epoch, step_callback=tlog)
    fileio.save_checkpoint(args.out, result.state)
    for e in result.epochs:
        print("epoch {epoch}\ttotal {total!r}\tkept {n_pseudo_kept}".format(**e))
    print(f"checkpoint {args.out}\tlog {log_path}")
    return 0


def _model(args, weights, data):
    if args.checkpoint:
        state = fileio.load_checkpoint(args.checkpoint)
        return model_from_state(state, weights), TrainConfig(**state.config)
    # no checkpoint: the untrained model, exactly what epochs=0 produces
    config = _train_config(args).replace(epochs=0)
    return train(data, config, weights).model, config


def cmd_eval(args):
    manifest, weights, data = _load_inputs(args.manifest)
    model, config = _model(args, weights, data)
    ys, yt = manifest.load_eval_labels()
    print("domain\taccuracy\tper_class")
    for name, X, y in (("source", data.X_source, ys), ("target", data.X_target, yt)):
        if y is None:
            print(f"{name}\tnan\t(no evaluation labels)")
            continue
        pred, _ = predict(model, X, config.ensemble_weight)
        acc = float(np.mean(pred == y))
        per = per_class_accuracy(pred, y, manifest.n_classes)
        print(f"{name}\t{acc!r}\t" + ",".join(repr(a) for a in per))
    return 0


def cmd_metrics(args):
    if args.features:
        a, b = args.features
        Xa, ya = fileio.read_embeddings(a)
        Xb, yb = fileio.read_embeddings(b)
        report = domain_report(Xa, Xb, ya, yb, provenance=f"{a} vs {b}")
    else:
        if not args.manifest:
            raise UsageError("metrics needs --features A B or --manifest")
        manifest, weights, data = _load_inputs(args.manifest)
        model, config = _model(args, weights, data)
        ys, yt = manifest.load_eval_labels()
        Zs = model.image_features_np(data.X_source)
        Zt = model.image_features_np(data.X_target)
        pred = predict(model, data.X_target, config.ensemble_weight)[0] if yt is not None else None
        report = domain_report(Zs, Zt, ys, yt, pred,
                               provenance=args.checkpoint or "untrained")
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_bank(args):
    manifest, weights, data = _load_inputs(args.manifest)
    config = _train_config(args)
    model = PDAModel.init(weights, config, data.kind)
    zs = zero_shot(model, data)
    build_banks(model, data, zs.Z_source, zs.Z_target, zs.probs_source, zs.probs_target,
                config.shots)
    fileio.save_banks(args.out, model.source_bank, model.target_bank)
    print(f"banks {args.out}\t{model.source_bank.centroids.shape}")
    return 0


def cmd_gradcheck(args):
    err = toy_gradcheck(seed=args.seed)
    print(f"max relative error {err:.3e}")
    if not err < GRADCHECK_TOL:
        raise NumericalError(f"gradient check failed: {err:.3e} >= {GRADCHECK_TOL}")
    return 0


def build_parser():
    p = _Parser(prog="pda", description="Prompt-based distribution alignment on toy encoders.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_flags(sp):
        sp.add_argument("--config", help="key = value file of TrainConfig fields")
        sp.add_argument("--set", action="append", type=_kv, metavar="KEY=VALUE",
                        help="override one config field (repeatable)")

    g = sub.add_parser("generate", help="write a synthetic shifted dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-classes", type=int, default=5)
    g.add_argument("--n-source", type=int, default=40, help="samples per class")
    g.add_argument("--n-target", type=int, default=40, help="samples per class")
    g.add_argument("--n-patches", type=int, default=9)
    g.add_argument("--d-model", type=int, default=32)
    g.add_argument("--class-sep", type=float, default=SyntheticShiftSpec.class_sep)
    g.add_argument("--domain-shift", type=float, default=3.0)
    g.add_argument("--noise-std", type=float, default=0.5)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train prompts and the alignment module")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="step log path (default: checkpoint path with .log)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-after-epoch", type=int)
    config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy per domain and per class")
    e.add_argument("--manifest", required=True)
    e.add_argument("--checkpoint")
    config_flags(e)
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("metrics", help="distribution and geometry metrics")
    m.add_argument("--features", nargs=2, metavar=("A", "B"))
    m.add_argument("--manifest")
    m.add_argument("--checkpoint")
    m.add_argument("--out")
    config_flags(m)
    m.set_defaults(func=cmd_metrics)

    b = sub.add_parser("bank", help="build source/target feature banks")
    b.add_argument("--manifest", required=True)
    b.add_argument("--out", required=True)
    config_flags(b)
    b.set_defaults(func=cmd_bank)

    c = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:      # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"pda: error: {exc}", file=sys.stderr)
        return 1
    except ParameterError as exc:
        print(f"pda: error: {exc}", file=sys.stderr)
        return 1
    except PDAError as exc:
        print(f"pda: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"pda: numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
