"""Command-line entry point: ``ivtune {gen-data,train,evaluate,analyze}``.

Run configs are JSON files. Recognised keys are the model fields
(image_size, patch_size, depth, width, heads, mlp_ratio, num_classes,
d_alpha, d_beta, split_ratio_inv, variant, seed, dtype) and the recipe
fields (optimizer, lr, weight_decay, batch_size, epochs). Command-line flags
override file values. Every run writes the resolved config to
``<out>/config.json``.

On failure a single line ``error: <kind>: <message>`` goes to stderr and the
exit status is non-zero.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import analysis
from .backbone import VARIANTS, ModelConfig
from .checkpoint import CheckpointMismatch, load_checkpoint, save_checkpoint
from .container import FormatError
from .dataset import gen_dataset, load_dataset
from .training import Recipe, evaluate, train, write_metrics_csv

log = logging.getLogger("ivtune")

MODEL_KEYS = {f.name for f in fields(ModelConfig)}
RECIPE_KEYS = {"optimizer", "lr", "weight_decay", "batch_size", "epochs"}


class CliError(Exception):
    def __init__(self, kind, message):
        super().__init__(message)
        self.kind = kind


def _out_dir(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CliError("unwritable", f"cannot write to {out}: {exc.strerror}") from exc
    return out


# -- gen-data -----------------------------------------------------------------

def cmd_gen_data(args):
    if args.n < 1:
        raise CliError("invalid", "empty dataset")
    out = _out_dir(args.out)
    gen_dataset(out, seed=args.seed, n_samples=args.n, image_size=args.size,
                num_classes=args.classes, ambiguity=args.ambiguity, patch_size=args.patch,
                n_val=args.n_val)
    print(f"wrote {args.n} train + {args.n_val or max(1, args.n // 4)} val samples to {out}")


# -- train ----------------------------------------------------------------------

def resolve_run_config(args, manifest):
    cfg = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError("config", f"cannot read config {args.config}: {exc}") from exc
        unknown = set(cfg) - MODEL_KEYS - RECIPE_KEYS - {"data", "out"}
        if unknown:
            raise CliError("config", f"unknown config keys {sorted(unknown)}")
    for key in ("variant", "seed", "epochs", "lr", "weight_decay", "optimizer", "batch_size",
                "dtype"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    for key, mkey in (("image_size", "image_size"), ("patch_size", "patch_size"),
                      ("num_classes", "num_classes")):
        data_value = int(manifest[mkey])
        if key in cfg and int(cfg[key]) != data_value:
            raise CliError("config", f"{key}={cfg[key]} does not match dataset ({data_value})")
        cfg[key] = data_value
    cfg.setdefault("dtype", "float32")
    model_cfg = {k: v for k, v in cfg.items() if k in MODEL_KEYS}
    recipe_cfg = {k: v for k, v in cfg.items() if k in RECIPE_KEYS}
    try:
        config = ModelConfig.from_dict(model_cfg)
        recipe = Recipe(seed=config.seed, **recipe_cfg)
    except (TypeError, ValueError) as exc:
        raise CliError("config", str(exc)) from exc
    return config, recipe


def _run_training(config, recipe, splits, out, data_path):
    out = _out_dir(out)
    resolved = {**config.to_dict(), **{k: v for k, v in asdict(recipe).items() if k != "seed"},
                "data": str(data_path), "out": str(out)}
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    result = train(config, splits, recipe)
    write_metrics_csv(out / "metrics.csv", result.log)
    save_checkpoint(out / "checkpoint.ivtn", result.model, result.optimizer)
    return result


def cmd_train(args):
    manifest, splits = _load_data(args.data)
    config, recipe = resolve_run_config(args, manifest)
    if not args.sweep:
        result = _run_training(config, recipe, splits, args.out, args.data)
        last = [r for r in result.log if r["split"] == "val"][-1:] or result.log[-1:]
        if last:
            print(f"final {last[0]['split']} accuracy={last[0]['accuracy']:.4f} "
                  f"miou={last[0]['miou']:.4f}")
        return
    key, _, values = args.sweep.partition("=")
    if key not in MODEL_KEYS or not values:
        raise CliError("invalid", f"bad --sweep {args.sweep!r}; expected key=v1,v2,...")
    out = _out_dir(args.out)
    rows = []
    for raw in values.split(","):
        value = type(getattr(config, key))(raw)
        try:
            cfg = config.replace(**{key: value})
        except ValueError as exc:
            raise CliError("config", str(exc)) from exc
        result = _run_training(cfg, recipe, splits, out / f"{key}={raw}", args.data)
        val = [r for r in result.log if r["split"] == "val"][-1]
        rows.append((key, raw, repr(val["accuracy"]), repr(val["miou"])))
    with open(out / "sweep.csv", "w", newline="") as fh:
        fh.write("# schema=ivtune-sweep/1\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("key", "value", "val_accuracy", "val_miou"))
        writer.writerows(rows)


# -- evaluate / analyze -----------------------------------------------------------

def _load_data(path):
    try:
        return load_dataset(path)
    except (OSError, FormatError, KeyError, ValueError) as exc:
        raise CliError("data", f"cannot load dataset {path}: {exc}") from exc


def _load_model(path):
    try:
        model, _ = load_checkpoint(path)
    except (OSError, FormatError, CheckpointMismatch, KeyError, ValueError) as exc:
        raise CliError("checkpoint", f"cannot load checkpoint {path}: {exc}") from exc
    return model


def _check_compatible(model, manifest):
    cfg = model.config
    for key in ("image_size", "patch_size", "num_classes"):
        if int(manifest[key]) != getattr(cfg, key):
            raise CliError("mismatch", f"checkpoint {key}={getattr(cfg, key)} but dataset has "
                                       f"{manifest[key]}")


def cmd_evaluate(args):
    model = _load_model(args.checkpoint)
    manifest, splits = _load_data(args.data)
    _check_compatible(model, manifest)
    m = evaluate(model, splits[args.split])
    print(json.dumps({"split": args.split, **asdict(m)}))


def cmd_analyze(args):
    if not (args.pca or args.spectrum or args.params):
        raise CliError("invalid", "choose at least one of --pca, --spectrum, --params")
    out = _out_dir(args.out)
    model = _load_model(args.checkpoint) if args.checkpoint else None
    manifest, splits = (None, None)
    if args.data:
        manifest, splits = _load_data(args.data)
    if args.pca:
        if model is None or splits is None:
            raise CliError("invalid", "--pca needs --checkpoint and --data")
        _check_compatible(model, manifest)
        feats = analysis.capture_layer_features(model, splits[args.split], args.probe,
                                                args.probe_seed)
        try:
            report = analysis.pca_layer_report(feats, args.k)
        except analysis.DegenerateInputError as exc:
            raise CliError("degenerate", str(exc)) from exc
        analysis.write_pca_csv(out / "pca.csv", report)
    if args.spectrum:
        if splits is None:
            raise CliError("invalid", "--spectrum needs --data")
        split = splits[args.split]
        edges = np.linspace(0.0, 1.0, args.bands + 1)
        reports = {
            "ir": (edges, analysis.mean_radial_energy(split.ir, args.bands)),
            "vis": (edges, analysis.mean_radial_energy(split.vis, args.bands)),
        }
        analysis.write_spectrum_csv(out / "spectrum.csv", reports)
    if args.params:
        target = model.config if model is not None else args.preset
        try:
            report = analysis.param_report(target)
        except ValueError as exc:
            raise CliError("config", str(exc)) from exc
        analysis.write_params_csv(out / "params.csv", report)
        print(f"trainable-backbone-side={report.trainable_backbone_side} "
              f"backbone={report.backbone} ratio={report.ratio:.6f}")
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
                if k != "func"}
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


# -- parser -------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    # usage errors follow the same one-line format as runtime errors
    def error(self, message):
        self.exit(2, f"error: usage: {message}\n")


def build_parser():
    parser = _Parser(prog="ivtune", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic IR/VIS dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=512, help="training samples")
    g.add_argument("--n-val", type=int, default=None, help="validation samples (default n/4)")
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--ambiguity", type=float, default=1.0)
    g.add_argument("--patch", type=int, default=4)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one variant (or a sweep)")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--optimizer", choices=("sgd", "adam", "adamw"))
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--dtype", choices=("float32", "float64"))
    t.add_argument("--sweep", help="e.g. d_beta=4,8,16,32")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="metrics of a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val", choices=("train", "val"))
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("analyze", help="PCA / spectrum / parameter reports")
    a.add_argument("--checkpoint")
    a.add_argument("--data")
    a.add_argument("--split", default="val", choices=("train", "val"))
    a.add_argument("--pca", action="store_true")
    a.add_argument("--spectrum", action="store_true")
    a.add_argument("--params", action="store_true")
    a.add_argument("--preset", default="toy", choices=sorted(analysis.PRESETS))
    a.add_argument("--k", type=int, default=5)
    a.add_argument("--bands", type=int, default=16)
    a.add_argument("--probe", type=int, default=8)
    a.add_argument("--probe-seed", dest="probe_seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        args.func(args)
    except CliError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FloatingPointError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
