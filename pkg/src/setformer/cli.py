"""Command-line entry point.

    setformer <command> --config <path> [key=value ...]

Commands: preprocess, synth, train, evaluate, gradcheck. A relative
--config that does not exist locally is also looked up under
$SETFORMER_CONFIG_DIR. Every command writes a manifest.json (resolved
config + sha256 of its input files) into out_dir, sufficient to reproduce
the run. Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__, backend
from . import tensor as tt
from .config import ConfigError, RunConfig, load_config
from .data import (DatasetFormatError, DegenerateDataError, EmptyDatasetError,
                   ParseError, RawSchema, StratifyError, build_dataset,
                   default_class_specs, encode_labels, filter_labels,
                   load_dataset, make_windows, parse_raw, save_dataset,
                   synthesize_windows)
from .metrics import confusion_csv, summarize
from .model import (CheckpointError, ModelParams, forward, load_checkpoint,
                    save_checkpoint)
from .tensor import Tensor
from .train import NonFiniteLossError, cross_entropy, evaluate, fit

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_DATA_ERRORS = (ParseError, EmptyDatasetError, DegenerateDataError, StratifyError,
                DatasetFormatError, CheckpointError, FileNotFoundError, IsADirectoryError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(cfg: RunConfig, command, inputs):
    manifest = {
        "command": command,
        "version": __version__,
        "backend": backend.active_name(),
        "config": cfg.to_dict(),
        "inputs": {p: _sha256(p) for p in inputs if p and os.path.exists(p)},
    }
    path = os.path.join(cfg.out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _require(path, what):
    if not path:
        raise ConfigError(f"{what} is required for this command")
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _model_config_for_dataset(cfg: RunConfig, ds):
    # the container owns T/C/K; config keys size the architecture
    from .model import ModelConfig
    ffn = cfg.ffn_hidden if cfg.ffn_hidden else 4 * cfg.model_dim
    return ModelConfig(input_channels=ds.channels, window_len=ds.window_len,
                       model_dim=cfg.model_dim, num_layers=cfg.num_layers,
                       num_heads=cfg.num_heads, ffn_hidden=ffn,
                       se_reduction=cfg.se_reduction, pool_hidden=cfg.pool_hidden,
                       num_classes=ds.num_classes)


def cmd_preprocess(cfg: RunConfig):
    raw = _require(cfg.raw_path, "raw_path")
    if not cfg.data_path:
        raise ConfigError("data_path is required for preprocess")
    schema = RawSchema.with_field_count(cfg.schema_fields)
    with open(raw, "r", encoding="utf-8", errors="replace") as fh:
        records, rejected = parse_raw(fh, schema)
    kept_lines = len(records)
    records = filter_labels(records, cfg.labels)
    if not records:
        raise EmptyDatasetError("no records left after label filtering")
    label_map = encode_labels(records)
    samples = make_windows(records, label_map, window_len=cfg.window_len,
                           stride=cfg.window_stride, gap_tolerance=cfg.gap_tolerance)
    if not samples:
        raise EmptyDatasetError("no complete windows could be cut")
    ds = build_dataset(samples, label_map, train_fraction=cfg.train_fraction,
                       seed=cfg.seed, by_user=cfg.split_by_user)
    save_dataset(cfg.data_path, ds, schema_fields=cfg.schema_fields)
    per_class = {label_map.label(i): int((ds.y == i).sum())
                 for i in range(len(label_map))}
    report = {
        "lines_kept": kept_lines,
        "lines_rejected": rejected,
        "records_after_filter": len(records),
        "windows": len(samples),
        "windows_per_class": per_class,
        "train_windows": int(ds.split.train.size),
        "val_windows": int(ds.split.val.size),
    }
    with open(os.path.join(cfg.out_dir, "ingestion_report.json"), "w",
              encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    _write_manifest(cfg, "preprocess", [raw])
    print(f"preprocess: {len(samples)} windows -> {cfg.data_path}"
          f" ({rejected} lines rejected)")
    return EXIT_OK


def cmd_synth(cfg: RunConfig):
    if not cfg.data_path:
        raise ConfigError("data_path is required for synth")
    specs = default_class_specs(cfg.num_classes)
    samples, label_map = synthesize_windows(specs, cfg.synth_per_class,
                                            cfg.window_len, cfg.seed)
    ds = build_dataset(samples, label_map, train_fraction=cfg.train_fraction,
                       seed=cfg.seed)
    save_dataset(cfg.data_path, ds, schema_fields=cfg.schema_fields)
    _write_manifest(cfg, "synth", [])
    print(f"synth: {len(samples)} windows ({cfg.num_classes} classes)"
          f" -> {cfg.data_path}")
    return EXIT_OK


def cmd_train(cfg: RunConfig):
    data = _require(cfg.data_path, "data_path")
    ds = load_dataset(data)
    model_cfg = _model_config_for_dataset(cfg, ds)
    train_cfg = cfg.train_config()
    tt.set_default_dtype(train_cfg.dtype)
    params = ModelParams.init(model_cfg, cfg.seed, dtype=train_cfg.dtype)
    x_train, y_train = ds.train_arrays()
    x_val, y_val = ds.val_arrays()
    trace_path = os.path.join(cfg.out_dir, "trace.jsonl")
    with open(trace_path, "w", encoding="utf-8") as trace:
        def on_epoch(rec):
            trace.write(json.dumps(rec.to_dict()) + "\n")
            trace.flush()
            print(f"epoch {rec.epoch:3d}  train {rec.train_loss:.4f}"
                  f"  val {rec.val_loss:.4f}  acc {rec.val_accuracy:.4f}"
                  f"  f1 {rec.val_macro_f1:.4f}")

        result = fit(params, model_cfg, train_cfg, x_train, y_train, x_val,
                     y_val, workers=cfg.workers, on_epoch=on_epoch)
    save_checkpoint(os.path.join(cfg.out_dir, "checkpoint_best.bin"),
                    result.best_params, model_cfg)
    save_checkpoint(os.path.join(cfg.out_dir, "checkpoint_final.bin"),
                    params, model_cfg)
    with open(os.path.join(cfg.out_dir, "confusion.csv"), "w",
              encoding="utf-8") as fh:
        fh.write(confusion_csv(result.final_confusion, ds.label_map.labels))
    _write_manifest(cfg, "train", [data])
    best = result.records[result.best_epoch]
    print(f"train: best epoch {best.epoch} val_loss {best.val_loss:.4f}"
          f" val_acc {best.val_accuracy:.4f}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig):
    data = _require(cfg.data_path, "data_path")
    ckpt = _require(cfg.checkpoint_path, "checkpoint_path")
    ds = load_dataset(data)
    params, model_cfg = load_checkpoint(ckpt)
    if model_cfg.num_classes != ds.num_classes:
        raise DatasetFormatError(
            f"checkpoint expects {model_cfg.num_classes} classes,"
            f" dataset has {ds.num_classes}")
    if cfg.eval_split == "train":
        x, y = ds.train_arrays()
    elif cfg.eval_split == "all":
        x, y = ds.x, ds.y
    else:
        x, y = ds.val_arrays()
    loss, cm = evaluate(params, model_cfg, x, y, workers=cfg.workers)
    s = summarize(cm)
    payload = {"split": cfg.eval_split, "samples": int(len(x)),
               "loss": loss, **s.to_dict()}
    with open(os.path.join(cfg.out_dir, "metrics.json"), "w",
              encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(os.path.join(cfg.out_dir, "confusion.csv"), "w",
              encoding="utf-8") as fh:
        fh.write(confusion_csv(cm, ds.label_map.labels))
    _write_manifest(cfg, "evaluate", [data, ckpt])
    print(f"evaluate[{cfg.eval_split}]: loss {loss:.4f}"
          f" acc {s.accuracy:.4f} macro_f1 {s.macro_f1:.4f}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig):
    model_cfg = cfg.model_config()
    rng = np.random.default_rng(cfg.seed)
    params = ModelParams.init(model_cfg, cfg.seed, dtype=np.float64)
    x = Tensor(rng.normal(size=(model_cfg.window_len, model_cfg.input_channels)),
               dtype=np.float64)
    label = int(rng.integers(model_cfg.num_classes))

    names = params.names()
    total = params.num_values()
    rows = []
    worst = 0.0
    for name in names:
        p = params[name]
        coords = max(1, round(cfg.gradcheck_coords * p.size / total))

        def loss_fn(q, name=name):
            swapped = ModelParams({n: (q if n == name else params[n])
                                   for n in names})
            return cross_entropy(forward(x, swapped, model_cfg).logits, label)

        res = tt.grad_check(loss_fn, [p], eps=cfg.gradcheck_eps,
                            max_coords=coords, rng=np.random.default_rng([cfg.seed, 2]))
        worst = max(worst, res.max_rel_error)
        rows.append({"parameter": name, "coords": res.checked,
                     "kinks_excluded": len(res.kinks),
                     "max_rel_error": res.max_rel_error})

    width = max(len(r["parameter"]) for r in rows)
    print(f"{'parameter':<{width}}  coords  kinks  max_rel_error")
    for r in rows:
        print(f"{r['parameter']:<{width}}  {r['coords']:6d}  {r['kinks_excluded']:5d}"
              f"  {r['max_rel_error']:.3e}")
    passed = worst < cfg.gradcheck_threshold
    with open(os.path.join(cfg.out_dir, "gradcheck.json"), "w",
              encoding="utf-8") as fh:
        json.dump({"threshold": cfg.gradcheck_threshold, "passed": passed,
                   "max_rel_error": worst, "groups": rows}, fh,
                  sort_keys=True, indent=2)
        fh.write("\n")
    _write_manifest(cfg, "gradcheck", [])
    print(f"gradcheck: max relative error {worst:.3e}"
          f" (threshold {cfg.gradcheck_threshold:g}) ->"
          f" {'ok' if passed else 'FAILED'}")
    return EXIT_OK if passed else EXIT_NUMERIC


_COMMANDS = {
    "preprocess": cmd_preprocess,
    "synth": cmd_synth,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}


def _resolve_config_path(path):
    if path is None or os.path.exists(path) or os.path.isabs(path):
        return path
    config_dir = os.environ.get("SETFORMER_CONFIG_DIR")
    if config_dir:
        candidate = os.path.join(config_dir, path)
        if os.path.exists(candidate):
            return candidate
    return path


def main(argv=None) -> int:
    parser = _Parser(prog="setformer", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None,
                       help="config file; also searched in $SETFORMER_CONFIG_DIR")
        p.add_argument("overrides", nargs="*", metavar="key=value")
    try:
        args = parser.parse_args(argv)
        cfg = load_config(_resolve_config_path(args.config), args.overrides)
        backend.set_backend(cfg.backend)
        os.makedirs(cfg.out_dir, exist_ok=True)
        return _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLossError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
