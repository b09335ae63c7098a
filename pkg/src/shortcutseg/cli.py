"""Command line entry point: ``shortcutseg <verb> --config PATH [--out DIR] [--seed N] [--quiet]``.

Verbs
  generate  write the experiment's datasets (PNG + manifest) under OUT/data
  train     train the experiment's models, write OUT/checkpoints
  probe     load checkpoints, run every probe, write reports
  run       generate-in-memory + train + probe + report
  audit     centroid (and optional banded Dice) audit of an external dataset
  report    re-render CSV/SVG files from OUT/bundle.pkl

Exit codes: 0 success, 2 configuration or validation error, 3 I/O or file
format error, 4 numeric failure (non-finite loss or gradient).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .config import ExperimentConfig, load_config
from .errors import ConfigError, FormatError, NumericError, UsageError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
VERBS = ("generate", "train", "probe", "run", "audit", "report")

log = logging.getLogger("shortcutseg")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shortcutseg", description="Shortcut-learning laboratory for segmentation.")
    ap.add_argument("verb", choices=VERBS)
    ap.add_argument("--config", type=Path, help="INI experiment configuration")
    ap.add_argument("--out", type=Path, help="output directory (overrides experiment.out_dir)")
    ap.add_argument("--seed", type=int, help="global seed override")
    ap.add_argument("--quiet", action="store_true", help="only print errors")
    return ap


def _config(args) -> ExperimentConfig:
    if args.config is None:
        raise ConfigError("--config is required for this verb")
    return load_config(args.config).with_overrides(seed=args.seed, out_dir=args.out)


def _progress(name, epoch, loss, val):
    log.info("%s epoch %d  loss %.4f  val_dice %.4f", name, epoch + 1, loss, val)


def _print_summary(bundle) -> None:
    log.info("%s", json.dumps(bundle.to_dict(include_timings=True)["summary"], indent=2, sort_keys=True))


def _dispatch(args) -> None:
    from . import harness
    from .reports import render_reports

    if args.verb == "report":
        out = args.out or (_config(args).out_dir if args.config else None)
        if out is None:
            raise ConfigError("report needs --out or --config")
        written = render_reports(harness.load_bundle(out), out)
        log.info("wrote %d files under %s", len(written), out)
        return
    cfg = _config(args)
    out = cfg.out_dir
    if args.verb == "generate":
        roots = harness.write_data(cfg, out / "data")
        log.info("generated %s", ", ".join(str(r) for r in roots))
    elif args.verb == "train":
        if cfg.kind == "audit":
            raise ConfigError("audit experiments have no models to train")
        data = harness.build_data(cfg)
        models, histories = harness.train_models(cfg, data, progress=_progress)
        paths = harness.save_models(models, histories, out)
        log.info("saved %s", ", ".join(paths.values()))
    elif args.verb == "probe":
        if cfg.kind == "audit":
            raise ConfigError("use the audit verb for audit experiments")
        started = time.time()
        data = harness.build_data(cfg)
        channels = data["train"].images.shape[1]
        models, histories = harness.load_models(cfg, out, channels)
        ck = {k: str(out / "checkpoints" / f"{k}.ssck") for k in models}
        bundle = harness.probe_models(cfg, data, models, histories, ck)
        harness._finish(bundle, out, started)
        _print_summary(bundle)
    elif args.verb == "audit":
        if cfg.kind != "audit":
            raise ConfigError(f"audit verb needs experiment.kind = audit, got {cfg.kind!r}")
        _print_summary(harness.run_audit(cfg, out))
    else:
        _print_summary(harness.run_experiment(cfg, out, progress=_progress))
    log.info("done: %s", out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    try:
        _dispatch(args)
    except ConfigError as exc:
        for p in exc.problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_CONFIG
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
