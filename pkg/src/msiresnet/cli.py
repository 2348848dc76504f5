"""Command-line entry point: ``msiresnet <subcommand> [flags]``.

Exit status is 0 on success, 1 for invalid input or usage, 2 when the work
itself fails. Diagnostics go to stderr; data goes to files or stdout.
"""

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data, metrics, zoo
from .autograd import grad_check
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (
    CheckpointError,
    DataError,
    InvalidInputError,
    InvalidSpecError,
    MsiResNetError,
    ShapeError,
)
from .losses import bce_objective
from .tensor import make_rng
from .training import TrainConfig, evaluate, fit, thread_limit

log = logging.getLogger("msiresnet")

RUN_KEYS = {"arch", "width_mult", "input", "data", "out", "ckpt", "dtype"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def read_config(path):
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"config file not found: {path}")
    values = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInputError(f"{path}:{n}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in RUN_KEYS | TRAIN_KEYS:
            raise InvalidInputError(f"{path}:{n}: unknown key {k!r}")
        values[k] = v
    return values


def _merge(args, mapping):
    """Config-file values overridden by whichever flags were given."""
    values = read_config(args.config) if getattr(args, "config", None) else {}
    for key, attr in mapping.items():
        v = getattr(args, attr, None)
        if v is not None:
            values[key] = str(v)
    return values


def _dtype(name):
    if name not in ("float64", "float32"):
        raise InvalidSpecError(f"dtype must be float64 or float32, got {name!r}")
    return np.dtype(name)


def _split_manifests(data_dir, seed):
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise InvalidInputError(f"data directory not found: {data_dir}")
    if (data_dir / "train.csv").is_file() and (data_dir / "val.csv").is_file():
        return data.load_manifest(data_dir / "train.csv"), data.load_manifest(data_dir / "val.csv")
    if (data_dir / "manifest.csv").is_file():
        train, val, _ = data.split_manifest(data.load_manifest(data_dir / "manifest.csv"), seed=seed)
        return train, val
    raise InvalidInputError(f"{data_dir} has neither train.csv/val.csv nor manifest.csv")


def cmd_train(args):
    values = _merge(args, {
        "arch": "arch", "width_mult": "width_mult", "input": "input", "data": "data",
        "out": "out", "ckpt": "ckpt", "seed": "seed", "epochs": "epochs", "batch_size": "batch",
    })
    cfg = TrainConfig.from_mapping(values)
    arch = values.get("arch", "modified-resnet")
    width = float(values.get("width_mult", 1.0))
    hw = int(values.get("input", 224))
    dtype = _dtype(values.get("dtype", "float64"))
    if "data" not in values:
        raise InvalidInputError("train needs --data DIR (or data= in the config)")
    out = Path(values.get("out", "epochs.csv"))
    ckpt = Path(values.get("ckpt", "model.ckpt"))
    for p in (out, ckpt):
        if not p.parent.is_dir():
            raise InvalidInputError(f"output directory does not exist: {p.parent}")

    desc = zoo.describe(arch, width, hw)
    train_m, val_m = _split_manifests(values["data"], cfg.seed)
    train_set = data.load_dataset(train_m, hw, dtype=dtype)
    val_set = data.load_dataset(val_m, hw, dtype=dtype)
    log.info("arch %s width %g input %d: %d train / %d val images", arch, width, hw, len(train_m), len(val_m))

    model = zoo.build(desc, seed=cfg.seed, dtype=dtype)
    records, model, state = fit(model, train_set, val_set, cfg, csv_path=out)
    save_checkpoint(model, state, cfg, ckpt)
    if records:
        last = records[-1]
        print(f"epoch={last.epoch} train_loss={last.train_loss:.6f} val_loss={last.val_loss:.6f} "
              f"val_accuracy={last.val_accuracy:.4f}")
    log.info("wrote %s and %s", out, ckpt)
    return 0


def cmd_eval(args):
    if not Path(args.ckpt).is_file():
        raise InvalidInputError(f"checkpoint not found: {args.ckpt}")
    ck = load_checkpoint(args.ckpt)
    model, cfg = ck.model, ck.config
    data_dir = Path(args.data)
    if args.split == "val" and not (data_dir / "val.csv").is_file():
        _, manifest = _split_manifests(data_dir, cfg.seed)
    else:
        path = data_dir / f"{args.split}.csv"
        if not path.is_file():
            raise InvalidInputError(f"manifest not found: {path}")
        manifest = data.load_manifest(path)
    dtype = next(iter(model.named_parameters().values())).dtype
    dataset = data.load_dataset(manifest, model.descriptor.input_hw, dtype=dtype)
    with thread_limit(cfg.thread_count):
        result = evaluate(model, dataset, args.batch or cfg.batch_size)
    c = result.counts
    print(f"loss={result.loss:.6f}")
    print(f"tp={c.tp} fp={c.fp} fn={c.fn} tn={c.tn}")
    print(f"accuracy={metrics.accuracy(c):.4f}")
    if args.report:
        Path(args.report).write_text(metrics.report_csv([(model.descriptor.name, c)]))
        log.info("wrote %s", args.report)
    return 0


def cmd_gradcheck(args):
    desc = zoo.describe(args.arch, args.width_mult, args.input)
    model = zoo.build(desc, seed=args.seed)
    rng = make_rng(args.seed)
    x = rng.standard_normal((args.batch,) + desc.input_shape)
    y = np.arange(args.batch) % 2
    report = grad_check(model, x, bce_objective(y), args.tolerance, seed=args.seed, sample=args.sample)
    print(report.table())
    return 0 if report.passed else 2


def _read_count_table(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"model", "tp", "fp", "fn", "tn"} - set(reader.fieldnames or ())
        if missing:
            raise InvalidInputError(f"{path}: missing columns {sorted(missing)}")
        for r in reader:
            try:
                counts = metrics.ConfusionCounts(*(int(r[k]) for k in ("tp", "fp", "fn", "tn")))
            except ValueError:
                raise InvalidInputError(f"{path}: non-integer count in row {r}") from None
            rows.append((r["model"], counts))
    return rows


def cmd_confmat(args):
    counts = (args.tp, args.fp, args.fn, args.tn)
    given = sum(v is not None for v in counts)
    if args.table or args.reported:
        if given:
            raise InvalidInputError("give either the four counts or a table, not both")
        rows = list(metrics.REPORTED_COUNTS) if args.reported else _read_count_table(args.table)
        text = metrics.report_csv(rows, args.positive)
        sys.stdout.write(text)
    else:
        if given != 4:
            raise InvalidInputError("confmat-metrics needs all of --tp --fp --fn --tn")
        c = metrics.ConfusionCounts(*counts)
        p, r, f1 = metrics.f1_score(c, args.positive)
        print(f"accuracy {metrics.accuracy(c):.4f}")
        print(f"precision {p:.4f}")
        print(f"recall {r:.4f}")
        print(f"f1 {f1:.4f}")
        text = metrics.report_csv([(args.name, c)], args.positive)
    if args.report:
        Path(args.report).write_text(text)
    return 0


def cmd_synth(args):
    out = Path(args.out)
    manifest = data.generate_synthetic(args.n_per_class, args.input, args.seed, out)
    train, val, test = data.write_splits(manifest, out, args.seed)
    print(f"wrote {len(manifest)} images to {out} (train {len(train)}, val {len(val)}, test {len(test)})")
    return 0


def build_parser():
    p = _Parser(prog="msiresnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model and write epoch CSV + checkpoint")
    t.add_argument("--config", help="key=value file; flags override it")
    t.add_argument("--data", help="directory with train.csv/val.csv or manifest.csv")
    t.add_argument("--out", help="epoch CSV path (default epochs.csv)")
    t.add_argument("--ckpt", help="checkpoint path (default model.ckpt)")
    t.add_argument("--arch", choices=zoo.ARCHITECTURES)
    t.add_argument("--width-mult", type=float)
    t.add_argument("--input", type=int, help="input height/width")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val", choices=("train", "val", "test"))
    e.add_argument("--report", help="write the metrics report CSV here")
    e.add_argument("--batch", type=int)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of a freshly built model")
    g.add_argument("--arch", default="cnn5", choices=zoo.ARCHITECTURES)
    g.add_argument("--input", type=int, default=32)
    g.add_argument("--width-mult", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--batch", type=int, default=4)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--sample", type=int, default=200, help="elements checked per tensor")
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="generate the synthetic two-class image set")
    s.add_argument("--out", required=True)
    s.add_argument("--n-per-class", type=int, default=200)
    s.add_argument("--input", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    c = sub.add_parser("confmat-metrics", help="accuracy and F1 from confusion counts")
    for k in ("tp", "fp", "fn", "tn"):
        c.add_argument(f"--{k}", type=int)
    c.add_argument("--name", default="model", help="row label in the report")
    c.add_argument("--table", help="CSV with columns model,tp,fp,fn,tn")
    c.add_argument("--reported", action="store_true", help="use the built-in per-model count table")
    c.add_argument("--positive", type=int, default=metrics.MSS, choices=(0, 1),
                   help="positive class for F1 (0 = MSI, 1 = MSS)")
    c.add_argument("--report", help="write the report CSV here")
    c.set_defaults(func=cmd_confmat)
    return p


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (InvalidInputError, InvalidSpecError, ShapeError, DataError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (MsiResNetError, OSError, ArithmeticError) as e:
        print(f"failed: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
