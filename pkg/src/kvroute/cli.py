"""Command-line entry point: ``kvroute --config sweep.toml --out results/``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from kvroute.press import PRESS_KINDS, REGIMES
from kvroute.sweep import (ConfigError, PropositionConfig, SweepConfig, load_config, parse_alpha_grid,
                           run_propositions, run_sweep)
from kvroute.synthdata import TASKS, DatasetValidationError, GroundingError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VALIDATION = 3

log = logging.getLogger("kvroute")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kvroute", description="KV-cache press sweeps over a toy GQA transformer.")
    p.add_argument("--config", type=Path, help="TOML config file (sections: model, sweep, propositions)")
    p.add_argument("--out", type=Path, default=Path("kvroute_out"), help="output directory")
    p.add_argument("--alpha-grid", help="comma-separated compression ratios, e.g. 0,0.5,0.9")
    p.add_argument("--press", choices=(*PRESS_KINDS, "both"))
    p.add_argument("--regime", choices=(*REGIMES, "both"))
    p.add_argument("--seed", type=int)
    p.add_argument("--tasks", help=f"comma-separated subset of {','.join(TASKS)}")
    p.add_argument("--emit-heatmaps", action="store_true", help="write surviving-attention grids")
    p.add_argument("--propositions-only", action="store_true", help="skip the sweep")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _apply_overrides(cfg: SweepConfig, pcfg: PropositionConfig, args) -> tuple[SweepConfig, PropositionConfig]:
    changes = {}
    if args.alpha_grid is not None:
        changes["alpha_grid"] = parse_alpha_grid(args.alpha_grid)
    if args.press is not None:
        changes["presses"] = PRESS_KINDS if args.press == "both" else (args.press,)
    if args.regime is not None:
        changes["regimes"] = REGIMES if args.regime == "both" else (args.regime,)
    if args.tasks is not None:
        tasks = tuple(t.strip() for t in args.tasks.split(",") if t.strip())
        bad = [t for t in tasks if t not in TASKS]
        if not tasks or bad:
            raise ConfigError(f"--tasks: unknown task(s) {bad}")
        changes["tasks"] = tasks
    if args.emit_heatmaps:
        changes["emit_heatmaps"] = True
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be >= 0")
        changes["seed"] = args.seed
        pcfg = replace(pcfg, seed=args.seed)
    return replace(cfg, **changes), pcfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, pcfg = load_config(args.config) if args.config else (SweepConfig(), PropositionConfig())
        cfg, pcfg = _apply_overrides(cfg, pcfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    try:
        if not args.propositions_only:
            result = run_sweep(cfg, out)
            log.info("sweep wrote %d records (%d errors)", result.report["n_records"], result.report["n_errors"])
    except (DatasetValidationError, GroundingError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    report = run_propositions(pcfg)
    for msg in report["warnings"]:
        print(f"warning: {msg}", file=sys.stderr)
    with open(out / "propositions.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for name, ok in report["passed"].items():
        log.info("%s: %s", name, "pass" if ok else "FAIL")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
