"""Command line entry point: ``mtfeel run|sweep|dde``."""
from __future__ import annotations

import argparse
import sys

import numpy as np
import yaml

from .experiment import (OUT_ENV, PRESETS, SWEEP_AXES, ConfigError, apply_override, load_config,
                         default_out_dir, run_dde, run_experiment, sweep)
from .data import CapacityError, IdxFormatError
from .train import DivergenceError

EXIT_CONFIG, EXIT_DIVERGED = 2, 3


def _parse_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return yaml.safe_load(text)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML config file (overlaid on the preset)")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./runs)")
    p.add_argument("--data", help="idx:<images>,<labels> or synth")
    p.add_argument("--channel", choices=("perfect", "rayleigh", "bitflip"))
    p.add_argument("--snr-db", type=float)
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--flip-p", type=float)
    p.add_argument("--payload-bits", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set train.rounds=50")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtfeel", description="Multi-task federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("run", help="train every configured algorithm"))
    sp = sub.add_parser("sweep", help="one run per value of a channel or horizon axis")
    _common(sp)
    sp.add_argument("--axis", choices=SWEEP_AXES)
    sp.add_argument("--values", help="comma-separated axis values")
    sp.add_argument("--parallel", action="store_true", help="run sweep points in worker processes")
    _common(sub.add_parser("dde", help="estimate the discrepancy matrix only"))
    return parser


def resolve_config(args):
    cfg = load_config(args.config, args.preset)
    if args.seed is not None:
        cfg = apply_override(cfg, "seed", args.seed)
    if args.out:
        cfg = apply_override(cfg, "out", args.out)
    if args.data:
        if args.data == "synth":
            cfg = apply_override(cfg, "data.source", "synth")
        elif args.data.startswith("idx:") and args.data.count(",") == 1:
            img, lbl = args.data[4:].split(",")
            cfg = apply_override(cfg, "data.source", "idx")
            cfg = apply_override(cfg, "data.images", img)
            cfg = apply_override(cfg, "data.labels", lbl)
        else:
            raise ConfigError("--data must be 'synth' or 'idx:<images>,<labels>'")
    for flag, key in (("channel", "mode"), ("snr_db", "snr_db"), ("bandwidth", "bandwidth"),
                      ("flip_p", "flip_p"), ("payload_bits", "payload_bits")):
        value = getattr(args, flag)
        if value is not None:
            cfg = apply_override(cfg, f"channel.{key}", value)
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        cfg = apply_override(cfg, key.strip(), _parse_value(value))
    return cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return _dispatch(args)
    except DivergenceError as exc:
        print(f"error: training diverged in round {exc.round}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, IdxFormatError, CapacityError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def _dispatch(args) -> int:
    cfg = resolve_config(args)
    if args.command == "run":
        res = run_experiment(cfg)
        for algo, hist in res.histories.items():
            m = hist[-1]
            print(f"{algo:12s} train {m.mean_train_acc:.4f}  test {m.mean_test_acc:.4f}")
        print(f"wrote {res.out_dir} ({res.seconds:.1f} s)")
    elif args.command == "sweep":
        values = None
        if args.values:
            values = [float(v) for v in args.values.split(",")]
        print(f"wrote {sweep(cfg, args.axis, values, parallel=args.parallel)}")
    else:
        run_dde(cfg)
        print(f"wrote {cfg.out or default_out_dir()}/discrepancy.csv")
    return 0
