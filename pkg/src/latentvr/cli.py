"""Command-line entry point: ``latentvr {gen-data,train,eval,bench-ar}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import curriculum as cu
from . import data, records
from .checkpoint import CheckpointError
from .config import ConfigError, load_run_config

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="latentvr", description="Latent visual reasoning toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic JSONL dataset")
    g.add_argument("--seed", type=int, required=True, help="dataset seed")
    g.add_argument("--n", type=int, required=True, help="number of examples (>= 1)")
    g.add_argument("--out", required=True, help="output JSONL path")
    g.add_argument("--stats", help="also write CoT-length/step/template histograms to this CSV")
    g.add_argument("--grid", type=int, default=10, help="scene grid side (default 10)")
    g.add_argument("--image-side", type=int, default=80, help="image side in pixels (default 80)")

    t = sub.add_parser("train", help="run curriculum training")
    t.add_argument("--config", required=True, help="TOML run config")
    t.add_argument("--data", required=True, help="training JSONL")
    t.add_argument("--val", help="validation JSONL (default: paths.val, else the last "
                                 "train.val_size examples of --data are held out)")
    t.add_argument("--out-dir", required=True, help="directory for checkpoints and CSV logs")
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")

    e = sub.add_parser("eval", help="accuracy, mean AR steps and time per example")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="evaluation JSONL")
    e.add_argument("--mode", choices=("latent", "explicit", "nocot"), default="latent")
    e.add_argument("--threads", type=int, default=1, help="decode batches concurrently")
    e.add_argument("--batch", type=int, default=32, help="examples decoded together")
    e.add_argument("--crop-log", help="write the replay crop log (latent mode) to this CSV")
    e.add_argument("--router-log", help="write router telemetry (latent mode) to this CSV")

    b = sub.add_parser("bench-ar", help="per-example AR steps, latent vs explicit")
    b.add_argument("--checkpoint", required=True, help="latent-mode checkpoint")
    b.add_argument("--data", required=True, help="evaluation JSONL")
    b.add_argument("--explicit-checkpoint",
                   help="checkpoint used for explicit decoding (default: --checkpoint)")
    b.add_argument("--out", help="per-example CSV (default: stdout summary only)")
    b.add_argument("--batch", type=int, default=32)
    return p


def _load_data(path, image_side=80):
    if not Path(path).exists():
        raise FileNotFoundError(f"data file {path} does not exist")
    return data.load_dataset(path, image_side)


def _check_grid(examples, cfg, path):
    bad = {e.scene.grid for e in examples} - {cfg.grid}
    if bad:
        raise data.DataFormatError(f"{path}: scene grid {sorted(bad)} does not match "
                                   f"model grid {cfg.grid}")


def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    examples = data.generate_dataset(args.seed, args.n, args.grid, args.image_side)
    data.save_dataset(examples, args.out)
    if args.stats:
        data.write_stats(examples, args.stats)
    print(json.dumps({"examples": len(examples), "out": args.out}))
    return EXIT_OK


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    cfg = run.model
    examples = _load_data(args.data, cfg.image_side)
    _check_grid(examples, cfg, args.data)
    val_path = args.val or run.paths.get("val")
    if val_path:
        val = _load_data(val_path, cfg.image_side)
        _check_grid(val, cfg, val_path)
        train_set = examples
    else:
        n_val = min(run.train.val_size, len(examples) - 1)
        train_set, val = examples[:len(examples) - n_val], examples[len(examples) - n_val:]
    result = cu.train(run, train_set, val, args.out_dir, resume=args.resume)
    last = result.metrics[-1] if result.metrics else {}
    print(json.dumps({"epochs": len(result.metrics), "last": last}))
    return EXIT_OK


def _load_checkpoint(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return cu.load_model(path)


def _check_mode(meta, mode, path):
    trained = meta.get("train", {}).get("mode", "latent")
    if (trained == "nocot") != (mode == "nocot"):
        raise UsageError(f"checkpoint {path} was trained in {trained!r} mode and cannot be "
                         f"evaluated in {mode!r} mode")


def cmd_eval(args) -> int:
    model, meta = _load_checkpoint(args.checkpoint)
    _check_mode(meta, args.mode, args.checkpoint)
    examples = _load_data(args.data, model.cfg.image_side)
    _check_grid(examples, model.cfg, args.data)
    tel = [] if args.router_log else None
    res = cu.evaluate(model, examples, args.mode, batch=args.batch, telemetry=tel,
                      threads=max(1, args.threads))
    if args.crop_log:
        records.write_rows(args.crop_log, records.CROP_COLUMNS, cu.crop_rows(res))
    if args.router_log:
        records.write_rows(args.router_log, records.ROUTER_COLUMNS, cu.router_rows(tel))
    print(json.dumps({"mode": args.mode, "n": len(examples), "accuracy": res.accuracy,
                      "mean_ar_steps": res.mean_ar_steps,
                      "mean_seconds_per_example": res.mean_seconds}))
    return EXIT_OK


def cmd_bench_ar(args) -> int:
    model, meta = _load_checkpoint(args.checkpoint)
    _check_mode(meta, "latent", args.checkpoint)
    explicit = model
    if args.explicit_checkpoint:
        explicit, emeta = _load_checkpoint(args.explicit_checkpoint)
        _check_mode(emeta, "explicit", args.explicit_checkpoint)
    examples = _load_data(args.data, model.cfg.image_side)
    _check_grid(examples, model.cfg, args.data)
    lat = cu.evaluate(model, examples, "latent", batch=args.batch)
    exp = cu.evaluate(explicit, examples, "explicit", batch=args.batch)
    rows = [(e.id, a, b, b / a) for e, a, b in zip(examples, lat.ar_steps, exp.ar_steps)]
    if args.out:
        records.write_rows(args.out, records.AR_COLUMNS, rows)
    print(json.dumps({"n": len(examples), "latent_mean_ar_steps": lat.mean_ar_steps,
                      "explicit_mean_ar_steps": exp.mean_ar_steps,
                      "ratio": exp.mean_ar_steps / lat.mean_ar_steps}))
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "bench-ar": cmd_bench_ar}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"latentvr: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (data.DataFormatError, CheckpointError, FileNotFoundError, OSError) as exc:
        print(f"latentvr: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (cu.NumericError, FloatingPointError) as exc:
        print(f"latentvr: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
