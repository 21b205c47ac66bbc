"""Command line driver: ``gbpkit <command> --config file.toml [--seed N] [--out DIR] [--jobs N]``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure,
4 a recovery claim failed in ``certify``.
"""
from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

from . import experiments as ex
from .config import echo, parse_config
from .errors import ConfigError
from .report import emit_report

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CERTIFY = 0, 2, 3, 4
COMMANDS = ("gen-data", "solve", "certify", "train", "attack", "report", "run")
SYNTHETIC = ("synthetic-nopool", "synthetic-pooled")


def build_parser():
    p = argparse.ArgumentParser(prog="gbpkit", description="Group basis pursuit experiment driver.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=name != "report", help="TOML experiment configuration")
        s.add_argument("--seed", type=int, default=None, help="override the configured seed")
        s.add_argument("--out", default=None, help="override the output directory")
        s.add_argument("--jobs", type=int, default=1, help="worker processes for batch solves")
        s.add_argument("--quiet", action="store_true", help="do not echo the resolved configuration")
    return p


def _need(cfg, kinds, command):
    if cfg.experiment not in kinds:
        raise ConfigError(f"experiment: command {command!r} does not apply to {cfg.experiment!r}")


def _dispatch(command, run):
    cfg = run.cfg
    kind = cfg.experiment
    if command == "certify":
        _need(cfg, ("certify", "layered-bounds"), command)
        ok = ex.run_certify(run) if kind == "certify" else ex.run_layered(run)
        return EXIT_OK if ok else EXIT_CERTIFY
    if command == "run":
        if kind in ("certify", "layered-bounds"):
            return _dispatch("certify", run)
        if kind == "mnist":
            ex.run_mnist(run)
        else:
            ex.run_synthetic(run)
        emit_report(run.out)
        return EXIT_OK
    _need(cfg, SYNTHETIC, command)
    if command == "gen-data":
        ex.save_synthetic(run, ex.generate_synthetic(cfg))
        run.record("gen-data", data_hash=run.hash)
    elif command == "solve":
        ex.solve_stage(run)
    elif command == "train":
        data = ex.load_synthetic(run)
        models = ex.train_stage(run, data)
        ex.statistics_stage(run, data, ex.solve_stage(run, data), models)
    elif command == "attack":
        ex.attack_stage(run)
    return EXIT_OK


def _failure(run, command, exc):
    info = {"stage": command, "error": type(exc).__name__, "message": str(exc)}
    (run.out / "failure.json").write_text(json.dumps(info, indent=2) + "\n")
    run.manifest["failure"] = info
    run.save_manifest()


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "report" and args.config is None:
        if args.out is None:
            print("config error: report needs --out or --config", file=sys.stderr)
            return EXIT_CONFIG
        out = Path(args.out)
        cfg = None
    else:
        try:
            cfg = parse_config(args.config).with_overrides(args.seed, args.out)
            if args.jobs < 1:
                raise ConfigError("--jobs: must be >= 1")
            if cfg.experiment in SYNTHETIC:
                ex.synthetic_methods(cfg)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        out = Path(cfg.out)
        if not args.quiet:
            print(echo(cfg), end="")
    if args.command == "report":
        if not out.is_dir():
            print(f"runtime error: {out} is not a directory", file=sys.stderr)
            return EXIT_RUNTIME
        written, warnings = emit_report(out)
        for w in warnings:
            print(f"warning: {w}", file=sys.stderr)
        for p in written:
            print(f"wrote {p}")
        return EXIT_OK
    run = ex.Run(cfg, out, jobs=args.jobs)
    (run.out / "resolved_config.toml").write_text(echo(cfg))
    run.manifest.pop("failure", None)
    try:
        code = _dispatch(args.command, run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every stage failure is recorded and mapped to one exit code
        _failure(run, args.command, exc)
        traceback.print_exc(file=sys.stderr)
        print(f"runtime error in {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    run.save_manifest()
    failed = (run.out / "failure.json")
    if failed.exists():
        failed.unlink()
    return code


if __name__ == "__main__":
    sys.exit(main())
