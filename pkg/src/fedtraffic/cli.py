"""Command line entry point: ``fedtraffic {run,classify,traffic-check,compare}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .config import load_config
from .errors import ComparisonError, ConfigError


def _add_overrides(p):
    p.add_argument("config", help="scenario file (INI sections, key = value)")
    p.add_argument("--seed", type=int, help="override scenario.master_seed")
    p.add_argument("--rounds", type=int, help="override fl.rounds")
    p.add_argument("--out", help="override scenario.output_dir")
    p.add_argument("--workers", type=int, help="threads for local updates")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedtraffic", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    _add_overrides(sub.add_parser("run", help="population, classifier and FL comparison"))
    _add_overrides(sub.add_parser("classify", help="population, classifier and class grid only"))
    _add_overrides(sub.add_parser("traffic-check", help="Monte-Carlo vs analytic rate moments"))
    p = sub.add_parser("compare", help="loss reduction table from a run manifest")
    p.add_argument("manifest")
    return ap


def _config(args):
    return load_config(args.config).with_overrides(
        seed=args.seed, rounds=args.rounds, out=args.out, workers=args.workers
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            cfg = _config(args)
            manifest = harness.run_scenario(cfg)
            print(f"wrote {manifest.path}")
            if "cluster" in manifest.strategies and len(manifest.strategies) > 1:
                comp = harness.compare_strategies(manifest)
                harness.write_comparison(comp, Path(cfg.output_dir))
                print(harness.format_comparison(comp))
        elif args.command == "classify":
            manifest = harness.run_classification(_config(args))
            info = manifest.classifier
            print(f"train accuracy {info['train_accuracy']:.4f} after {info['epochs']} epochs")
            if info["holdout_accuracy"] is not None:
                print(f"held-out accuracy {info['holdout_accuracy']:.4f}")
            print(f"wrote {manifest.path}")
        elif args.command == "traffic-check":
            cfg = _config(args)
            rows = harness.traffic_check(cfg)
            for r in rows:
                print(
                    f"{r['archetype']:<18} mean z={r['mean_z']:+.2f} var z={r['var_z']:+.2f} "
                    f"{'ok' if r['agrees'] else 'MISMATCH'}"
                )
            if not all(r["agrees"] for r in rows):
                return 1
        elif args.command == "compare":
            manifest = harness.RunManifest.load(args.manifest)
            comp = harness.compare_strategies(manifest)
            harness.write_comparison(comp, manifest.path.parent)
            print(harness.format_comparison(comp))
    except ConfigError as exc:
        print(f"[config] {exc}", file=sys.stderr)
        return 2
    except ComparisonError as exc:
        print(f"[compare] {exc}", file=sys.stderr)
        return 2
    except harness.StageError as exc:
        print(str(exc), file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"[io] {exc}", file=sys.stderr)
        return 2
    return 0
