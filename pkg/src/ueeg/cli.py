"""Command-line interface: ``ueeg {synth,train,eval,encode,gradcheck,bench}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import EEGDataset, SynthSpec, load_container, load_csv, preset, save_container, save_csv, synth_generate
from .errors import DataError, NumericalError, UEEGError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_data(args) -> EEGDataset:
    if getattr(args, "data", None):
        path = Path(args.data)
        if not path.exists():
            raise DataError(f"no such file: {path}")
        return load_csv(path) if path.suffix == ".csv" else load_container(path)
    if getattr(args, "preset", None):
        return synth_generate(preset(args.preset, seed=args.seed))
    raise UsageError("either --data or --preset is required")


def cmd_synth(args) -> int:
    if args.preset:
        overrides = {"seed": args.seed}
        if args.records:
            overrides["num_records"] = args.records
        if args.difficulty is not None:
            overrides["difficulty"] = args.difficulty
        spec = preset(args.preset, **overrides)
    else:
        if not (args.channels and args.timesteps and args.classes and args.records):
            raise UsageError("without --preset, --channels/--timesteps/--classes/--records are required")
        spec = SynthSpec(args.channels, args.timesteps, args.classes, args.records, args.seed,
                         "mid" if args.difficulty is None else args.difficulty, args.name)
    ds = synth_generate(spec)
    (save_csv if args.csv else save_container)(ds, args.out)
    print(f"wrote {len(ds)} records of shape ({ds.channels}, {ds.timesteps}) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import TrainConfig, train

    if args.config:
        cfg = TrainConfig.from_dict(json.loads(Path(args.config).read_text()))
    else:
        if not args.arch:
            raise UsageError("--arch is required")
        if not (args.data or args.preset):
            raise UsageError("either --data or --preset is required")
        cfg = TrainConfig(args.arch, data=args.data, preset=args.preset, optimizer=args.optimizer,
                          lr=args.lr, batch_size=args.batch, max_epochs=args.epochs, seed=args.seed,
                          out_dir=args.out)
    dataset = load_csv(cfg.data) if cfg.data and cfg.data.endswith(".csv") else None
    model, history = train(cfg, dataset)
    print(json.dumps({"best_epoch": history.best_epoch,
                      "best_val_acc": history.val_acc[history.best_epoch],
                      "epochs": len(history.val_acc), "out": cfg.out_dir}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate

    report = evaluate(args.checkpoint, _load_data(args), args.split, args.head, args.f1_average)
    print(json.dumps(report.to_dict()))
    return EXIT_OK


def cmd_encode(args) -> int:
    from .models import load_checkpoint
    from .train import _embeddings

    model = load_checkpoint(args.checkpoint)
    ds = _load_data(args)
    emb = _embeddings(model, model.preprocess(ds.records))
    out = EEGDataset(f"{ds.name}-embeddings", ds.num_classes, emb[:, None, :], ds.labels, ds.splits)
    save_container(out, args.out)
    print(f"wrote {emb.shape[0]} embeddings of size {emb.shape[1]} to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import architecture_grad_check

    try:
        c, t, k = (int(v) for v in args.geometry.lower().split("x"))
    except ValueError:
        raise UsageError("--geometry must look like CxTxK, e.g. 3x16x2") from None
    worst = 0.0
    for seed in range(args.seeds):
        rep = architecture_grad_check(args.arch, c, t, k, seed=seed, n_samples=args.samples, tol=args.tol)
        worst = max(worst, rep.max_rel_error)
        print(f"seed {seed}: max relative error {rep.max_rel_error:.3e} {'ok' if rep.passed else 'FAIL'}")
    if worst >= args.tol:
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_bench(args) -> int:
    from .train import bench

    suite = json.loads(Path(args.suite).read_text())
    result = bench(suite)
    table = result.table()
    print(table, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.csv").write_text(result.csv())
        (out / "table.txt").write_text(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ueeg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic dataset container")
    s.add_argument("--preset")
    s.add_argument("--channels", type=int)
    s.add_argument("--timesteps", type=int)
    s.add_argument("--classes", type=int)
    s.add_argument("--records", type=int)
    s.add_argument("--difficulty", type=lambda v: v if v in ("easy", "mid", "hard") else float(v))
    s.add_argument("--name", default="synthetic")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--csv", action="store_true", help="write the CSV import format instead")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train one architecture")
    s.add_argument("--arch", choices=["four_cnn", "gru_encoder", "autoencoder"])
    s.add_argument("--data")
    s.add_argument("--preset")
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--batch", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--optimizer", choices=["adam", "adadelta"])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.add_argument("--config", help="JSON file with TrainConfig fields (overrides flags)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data")
    s.add_argument("--preset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    s.add_argument("--head", choices=["knn", "rf"])
    s.add_argument("--f1-average", default="macro", choices=["macro", "weighted"])
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("encode", help="write embeddings as a container")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data")
    s.add_argument("--preset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("gradcheck", help="finite-difference check of a whole architecture")
    s.add_argument("--arch", required=True, choices=["four_cnn", "gru_encoder", "autoencoder"])
    s.add_argument("--geometry", default="3x16x2", help="CxTxK")
    s.add_argument("--seeds", type=int, default=1)
    s.add_argument("--samples", type=int, default=12)
    s.add_argument("--tol", type=float, default=1e-3)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("bench", help="train and evaluate a suite, print the results grid")
    s.add_argument("--suite", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ueeg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"ueeg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"ueeg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UEEGError, ValueError) as exc:
        print(f"ueeg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
