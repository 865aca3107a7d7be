"""Command-line entry point: ``dost generate | run | eval | gradcheck``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .data import DataError, SyntheticSpec, generate_synthetic, load_dataset, read_key_values, save_dataset
from .engine import STRATEGY_PRESETS, NumericError, RunConfig, apply_preset, format_run_config, parse_run_config, run_stream
from .gradcheck import check_network_gradients
from .memory import save_buffer
from .metrics import rescore_ledger
from .model import ConfigError, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dost", description="Online continual spatio-temporal forecasting.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic drifting dataset")
    spec = SyntheticSpec()
    for name, value in asdict(spec).items():
        g.add_argument(f"--{name.replace('_', '-')}", type=type(value), default=value)
    g.add_argument("--out", required=True, help="output dataset directory")

    r = sub.add_parser("run", help="warm up and stream a dataset")
    r.add_argument("--config", required=True, help="key=value run config file")
    r.add_argument("--strategy", choices=sorted(STRATEGY_PRESETS), default=None)
    r.add_argument("--data-dir", default=None, help="overrides data_dir from the config")
    r.add_argument("--out", default=None, help="overrides output_dir from the config")
    r.add_argument("--seed", type=int, default=None)

    e = sub.add_parser("eval", help="rescore a stored prediction ledger")
    e.add_argument("ledger", help="ledger .npz written by `run`")
    e.add_argument("--out", default=None, help="write the metrics report here")

    c = sub.add_parser("gradcheck", help="finite-difference check of network gradients")
    c.add_argument("--seeds", type=int, default=3)
    c.add_argument("--tol", type=float, default=1e-4)
    return p


def _generate(args) -> int:
    kw = {k: getattr(args, k) for k in asdict(SyntheticSpec())}
    ds = generate_synthetic(SyntheticSpec(**kw))
    out = save_dataset(ds.frame, ds.adjacency, args.out)
    print(f"wrote {ds.frame.meta.n_steps} steps x {ds.frame.meta.n_locations} locations to {out}")
    return EXIT_OK


def _run(args) -> int:
    try:
        cfg = parse_run_config(read_key_values(args.config))
    except (KeyError, ValueError) as exc:
        raise UsageError(f"bad config {args.config}: {exc}") from None
    if args.strategy:
        cfg = apply_preset(cfg, args.strategy)
    overrides = {}
    if args.data_dir:
        overrides["data_dir"] = args.data_dir
    if args.out:
        overrides["output_dir"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = cfg.with_overrides(**overrides)
    if not cfg.data_dir:
        raise UsageError("no data_dir given (config key or --data-dir)")
    frame, adj = load_dataset(cfg.data_dir)
    result = run_stream(frame, adj, cfg)

    out = Path(cfg.output_dir or "run_output")
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.txt").write_text(format_run_config(cfg), encoding="utf-8")
    result.report.write(out / "metrics.csv")
    result.write_run_log(out / "runlog.csv")
    result.ledger.save(out / "ledger.npz")
    save_checkpoint(result.net, out / "model.ckpt")
    save_buffer(result.engine.smb, out / "smb.snapshot")
    w = result.warmup
    print(f"warm-up: {w.epochs_run} epochs, best epoch {w.best_epoch}, val MAE {w.best_val_loss:.6f}")
    print(result.report.format_summary())
    return EXIT_OK


def _eval(args) -> int:
    report = rescore_ledger(args.ledger)
    if args.out:
        report.write(args.out)
    print(report.format_summary())
    return EXIT_OK


def _gradcheck(args) -> int:
    worst = 0.0
    for seed in range(args.seeds):
        errs = check_network_gradients(seed)
        name = max(errs, key=errs.get)
        worst = max(worst, errs[name])
        print(f"seed {seed}: max relative error {errs[name]:.3e} ({name})")
    ok = worst < args.tol
    print(f"max relative error {worst:.3e} {'<' if ok else '>='} {args.tol:g}: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_usage().strip())
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
        handler = {"generate": _generate, "run": _run, "eval": _eval, "gradcheck": _gradcheck}[args.command]
        return handler(args)
    except (UsageError, ConfigError) as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
