"""Command-line experiment driver.

    fedexdnn local  --config cfg.json [--exemplars 8,16,32]
    fedexdnn fed    --config cfg.json [--aggregator fedcc,fedavg_ex]
    fedexdnn ablate --config cfg.json [--toggle balance ...] [--contaminate 0.01,0.05]

Exit codes: 0 success, 2 configuration error, 3 runtime or numerical error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .client import TrainingError
from .config import ConfigError, ExperimentConfig, load_config, override
from .data import DataError
from .exdnn import TERMS, ExemplarError
from .fedserver import AGGREGATORS, AggregationError
from .numkernel import KernelError
from .orchestrator import OrchestrationError, RoundReport, run_experiment

log = logging.getLogger("fedexdnn")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO,
              "debug": logging.DEBUG}
DEFAULT_BALANCE_WEIGHTS = (0.0, 1.0, 5.0)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON experiment config")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--out", default="runs", help="output directory (default: runs)")
    common.add_argument("--parallel-clients", type=int, metavar="N",
                        help="train up to N clients concurrently")

    parser = argparse.ArgumentParser(prog="fedexdnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("local", parents=[common], help="single-device ExDNN run")
    p.add_argument("--exemplars", type=_int_list, metavar="LIST",
                   help="exemplar counts to sweep, e.g. 8,16,32,64,128")

    p = sub.add_parser("fed", parents=[common], help="federated run")
    p.add_argument("--aggregator", metavar="NAME",
                   help=f"one or a comma list of: {', '.join(AGGREGATORS)}")
    p.add_argument("--exemplars", type=_int_list, metavar="LIST")

    p = sub.add_parser("ablate", parents=[common], help="loss-term ablations")
    p.add_argument("--toggle", action="append", default=[], metavar="NAME",
                   help=f"zero-weight a loss term; one of {', '.join(TERMS)} (repeatable)")
    p.add_argument("--contaminate", type=_float_list, metavar="FRACTION",
                   help="training contamination fraction(s); runs a balance-weight sweep")
    p.add_argument("--balance-weights", type=_float_list, metavar="LIST",
                   default=list(DEFAULT_BALANCE_WEIGHTS),
                   help="balance weights for the contamination sweep (default 0,1,5)")
    p.add_argument("--aggregator", metavar="NAME")
    return parser


def _base_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.parallel_clients is not None:
        if args.parallel_clients < 1:
            raise ConfigError("--parallel-clients must be >= 1", "parallel_clients")
        changes["parallel_clients"] = args.parallel_clients
    return override(cfg, **changes) if changes else cfg


def _run_variants(variants: Sequence[tuple[str, ExperimentConfig]], out: Path) -> Path:
    rows = []
    for name, cfg in variants:
        target = out / name if name else out
        log.info("running %s -> %s", name or "experiment", target)
        reports, _ = run_experiment(cfg, target)
        rows.extend((name, r) for r in reports)
    if len(variants) > 1:
        _write_sweep_summary(rows, out / "summary.csv")
    return out


def _write_sweep_summary(rows: Sequence[tuple[str, RoundReport]], path: Path) -> None:
    lines = ["variant,round,aggregator,auc,f1,precision,recall,threshold,seconds"]
    for name, r in rows:
        vals = [name, r.round, r.aggregator, r.auc, r.f1, r.precision, r.recall, r.threshold,
                f"{r.wall_time:.3f}"]
        lines.append(",".join("" if v is None else str(v) for v in vals))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    final = {}
    for name, r in rows:
        final[name] = r  # last round wins
    scored = [(n, r.auc) for n, r in final.items() if r.auc is not None]
    if scored:
        best = max(scored, key=lambda t: t[1])
        log.info("best variant by final AUC: %s (%.4f)", *best)


def cmd_local(cfg: ExperimentConfig, out: Path, exemplars: Sequence[int] | None = None) -> Path:
    """Single-device training: one client owning every mode, no real aggregation."""
    modes = cfg.data.modes if cfg.data.source == "synthetic" else cfg.modes_per_client
    cfg = override(cfg, clients=1, modes_per_client=modes, aggregator="fedavg_ex",
                   partition=cfg.partition if cfg.data.source == "synthetic" else "sequential")
    if not exemplars:
        return _run_variants([("", cfg)], out)
    return _run_variants([(f"K{k}", replace(cfg, num_exemplars=k)) for k in exemplars], out)


def cmd_fed(cfg: ExperimentConfig, out: Path, aggregators: Sequence[str] | None = None,
            exemplars: Sequence[int] | None = None) -> Path:
    aggregators = list(aggregators or [cfg.aggregator])
    counts = list(exemplars or [cfg.num_exemplars])
    variants = []
    for agg in aggregators:
        for k in counts:
            name_parts = []
            if len(aggregators) > 1:
                name_parts.append(agg)
            if len(counts) > 1:
                name_parts.append(f"K{k}")
            variants.append(("_".join(name_parts),
                             override(cfg, aggregator=agg, num_exemplars=k)))
    return _run_variants(variants, out)


def cmd_ablate(cfg: ExperimentConfig, out: Path, toggles: Sequence[str] = (),
               contaminate: Sequence[float] | None = None,
               balance_weights: Sequence[float] = DEFAULT_BALANCE_WEIGHTS) -> Path:
    """One run per toggle with that term zero-weighted, plus the full model.

    With ``contaminate`` the sweep is instead contamination x balance weight.
    """
    unknown = [t for t in toggles if t not in TERMS]
    if unknown:
        raise ConfigError(f"unknown toggle {unknown[0]!r}; valid values: {', '.join(TERMS)}",
                          "toggle")
    variants = []
    if contaminate:
        if cfg.data.source != "synthetic":
            raise ConfigError("--contaminate needs synthetic data", "data.source")
        for frac in contaminate:
            for w in balance_weights:
                c = override(cfg, **{"data.contamination": frac, "loss.balance_weight": w})
                variants.append((f"contam{frac:g}_bal{w:g}", c))
    else:
        variants.append(("full", cfg))
        for t in dict.fromkeys(toggles):
            variants.append((f"without_{t}", replace(cfg, loss=cfg.loss.without(t))))
    return _run_variants(variants, out)


def _configure_logging() -> None:
    level = os.environ.get("FEDEXDNN_LOG", "warn").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if level not in LOG_LEVELS:
        log.warning("FEDEXDNN_LOG=%r not recognised; using warn", level)


def main(argv: Sequence[str] | None = None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    out = Path(args.out)
    try:
        cfg = _base_config(args)
        if args.command == "local":
            cmd_local(cfg, out, args.exemplars)
        elif args.command == "fed":
            aggs = args.aggregator.split(",") if args.aggregator else None
            for a in aggs or []:
                if a not in AGGREGATORS:
                    raise ConfigError(
                        f"unknown aggregator {a!r}; valid values: {', '.join(AGGREGATORS)}",
                        "aggregator")
            cmd_fed(cfg, out, aggs, args.exemplars)
        else:
            if args.aggregator:
                cfg = override(cfg, aggregator=args.aggregator)
            cmd_ablate(cfg, out, args.toggle, args.contaminate, args.balance_weights)
    except (ConfigError, DataError, ExemplarError, OSError) as exc:
        field = getattr(exc, "field", None)
        prefix = f"config error [{field}]" if field else "config error"
        print(f"{prefix}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, KernelError, AggregationError, OrchestrationError,
            FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"reports written to {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
