"""Command line entry point.

Subcommands
-----------
run          twin experiment with the morphing EnKF
demo-morph   register two fields and write the intermediate morphs
register     pairwise registration to an MKW1 warp file
diagnose     Anderson-Darling p-value maps from a checkpoint directory

Exit status is 0 on success, 2 for configuration errors and 3 for numerical
failures.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import io
from .config import ConfigError, load_config
from .diagnostics import pvalue_map
from .field import NonInvertibleWarpError
from .firemodel import ModelInstabilityError
from .morphing import MorphPair, morph
from .morphing_enkf import read_checkpoint
from .randomfields import WarpSamplingError
from .registration import register

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
NUMERIC_ERRORS = (NonInvertibleWarpError, ModelInstabilityError, WarpSamplingError,
                  FloatingPointError, np.linalg.LinAlgError)


def _load(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace("run", seed=args.seed)
    if getattr(args, "out", None) is not None:
        cfg = cfg.replace("run", out=args.out)
    if getattr(args, "cycles", None) is not None:
        cfg = cfg.replace("run", cycles=args.cycles)
    if getattr(args, "members", None) is not None:
        cfg = cfg.replace("ens", members=args.members)
    return cfg.validate()


def cmd_run(args) -> int:
    from .experiment import run_experiment

    cfg = _load(args)
    res = run_experiment(cfg)
    for rec in res.cycles:
        print(rec.format())
    print(f"output written to {res.out}")
    return EXIT_OK


def _read_pair(args):
    u = io.read_field(args.u)
    v = io.read_field(args.v)
    if u.geometry != v.geometry:
        raise ConfigError("input fields have different grids")
    return u, v


def cmd_register(args) -> int:
    cfg = _load(args)
    u, v = _read_pair(args)
    T, report = register(u, v, cfg=cfg.reg)
    out = args.out or "warp.mkw"
    io.ensure_dir(os.path.dirname(out) or ".")
    io.write_warp(out, T)
    print(report.format())
    return EXIT_OK


def cmd_demo_morph(args) -> int:
    if args.steps < 2:
        raise ConfigError("--steps must be at least 2")
    cfg = _load(args)
    u, v = _read_pair(args)
    T, _ = register(u, v, cfg=cfg.reg)
    pair = MorphPair.from_fields(u, v, T)
    out = io.ensure_dir(args.out or "morph_out")
    io.write_warp(os.path.join(out, "warp.mkw"), T)
    for i in range(args.steps):
        lam = i / (args.steps - 1)
        path = os.path.join(out, f"morph_{i:03d}.mkf")
        io.write_field(path, morph(pair, lam))
        print(f"lambda={lam:.6g} {path}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    entries = read_checkpoint(args.checkpoint)
    if len(entries) < 3:
        raise ConfigError("diagnose needs a checkpoint with at least 3 members")
    g = entries[0]["w"].geometry
    out = io.ensure_dir(args.out or os.path.join(args.checkpoint, "diagnose"))
    for name in ("w", "r_w"):
        samples = np.stack([e[name].values for e in entries])
        pmap, degenerate = pvalue_map(samples, g)
        io.write_field(os.path.join(out, f"pvalue_{name}.mkf"), pmap)
        io.write_csv(os.path.join(out, f"pvalue_{name}.csv"), pmap)
        print(f"{name}: median p={np.median(pmap.values):.4g} degenerate={int(degenerate.sum())}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="morphenkf", description="Morphing ensemble Kalman filter experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", help="config file, or 'desk' / 'full' for the bundled ones")
        sp.add_argument("--out", help=out_help)

    sp = sub.add_parser("run", help="twin experiment")
    common(sp, "output directory")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--cycles", type=int)
    sp.add_argument("--members", type=int)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("demo-morph", help="intermediate morphs between two fields")
    common(sp, "output directory")
    sp.add_argument("u")
    sp.add_argument("v")
    sp.add_argument("--steps", type=int, default=5)
    sp.set_defaults(func=cmd_demo_morph)

    sp = sub.add_parser("register", help="register v against u")
    common(sp, "output MKW1 file")
    sp.add_argument("u")
    sp.add_argument("v")
    sp.set_defaults(func=cmd_register)

    sp = sub.add_parser("diagnose", help="p-value maps of a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
