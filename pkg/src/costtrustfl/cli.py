"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 runtime invariant violation.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from .aggregation import STRATEGIES
from .attacks import ATTACKS
from .config import ExperimentConfig, load_config
from .errors import ConfigurationError, InvariantError
from .orchestrator import (
    SWEEP_PARAMS,
    ComparisonTable,
    RoundMetrics,
    run_ablation,
    run_comparison,
    run_experiment,
    run_sweep,
)

log = logging.getLogger("costtrustfl")

ROUND_COLUMNS = [
    "round", "accuracy", "loss", "cost_round", "cost_cum", "cost_intra", "cost_cross", "selected_count",
]

# flag dest -> config key
FLAG_KEYS = {
    "seed": "seed",
    "rounds": "rounds",
    "strategy": "strategy",
    "attack": "attack",
    "malicious_frac": "malicious_fraction",
    "alpha": "alpha",
    "lam": "lambda",
    "gamma": "gamma",
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="YAML experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--attack", choices=ATTACKS)
    p.add_argument("--malicious-frac", type=float, dest="malicious_frac")
    p.add_argument("--alpha", type=float)
    p.add_argument("--lambda", type=float, dest="lam")
    p.add_argument("--gamma", type=float)
    p.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override any config key (repeatable)",
    )
    p.add_argument("--output-dir", default="results", type=Path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="costtrustfl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    _add_common(run)
    run.add_argument("--emit-client-metrics", action="store_true", help="also write per-client trust/reputation")

    compare = sub.add_parser("compare", help="strategy x attack accuracy grid")
    _add_common(compare)
    compare.add_argument("--strategies", default="fedavg,krum,trimmed_mean,fltrust,cost_trustfl")
    compare.add_argument("--attacks", default="none,label_flip,gaussian,sign_flip,scale")
    compare.add_argument("--ablation", action="store_true", help="run the five ablation rows instead of strategies")

    sweep = sub.add_parser("sweep", help="one run per parameter value")
    _add_common(sweep)
    sweep.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    sweep.add_argument("--values", required=True, help="comma-separated values")
    sweep.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    shap = sub.add_parser("validate-shapley", help="compare contribution scores with exact Shapley values")
    _add_common(shap)
    shap.add_argument("--clients", type=int, default=8)
    shap.add_argument("--at-round", type=int, default=10)
    shap.add_argument("--permutations", type=int, default=5000)
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            out[key] = value
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _config(args: argparse.Namespace) -> ExperimentConfig:
    return load_config(args.config, _overrides(args))


def _fmt(value: Any) -> Any:
    return repr(value) if isinstance(value, float) else value


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_round_csv(path: Path, metrics: Sequence[RoundMetrics], num_clouds: int) -> None:
    header = ROUND_COLUMNS + [f"beta_{k}" for k in range(num_clouds)]
    _write_csv(path, header, [m.row() for m in metrics])


def write_client_csv(path: Path, metrics: Sequence[RoundMetrics]) -> None:
    n = metrics[0].r_hat.size if metrics else 0
    header = ["round"] + [f"selected_{i}" for i in range(n)] + [f"trust_{i}" for i in range(n)] + [f"r_hat_{i}" for i in range(n)]
    rows = []
    for m in metrics:
        chosen = set(m.selected)
        rows.append(
            [m.round]
            + [int(i in chosen) for i in range(n)]
            + [float(x) for x in m.trust]
            + [float(x) for x in m.r_hat]
        )
    _write_csv(path, header, rows)


def summary(config: ExperimentConfig, metrics: Sequence[RoundMetrics]) -> dict[str, Any]:
    last = metrics[-1]
    return {
        "final_accuracy": last.accuracy,
        "final_loss": last.loss,
        "cumulative_cost": last.cost_cum,
        "rounds": len(metrics),
        "seed": config.seed,
        "config": config.to_dict(),
    }


def cmd_run(args: argparse.Namespace) -> int:
    config = _config(args)
    metrics = run_experiment(config)
    out: Path = args.output_dir
    write_round_csv(out / "rounds.csv", metrics, config.num_clouds)
    if args.emit_client_metrics:
        write_client_csv(out / "clients.csv", metrics)
    (out / "summary.json").write_text(json.dumps(summary(config, metrics), indent=2) + "\n")
    last = metrics[-1]
    print(f"final accuracy {last.accuracy:.4f}  cumulative cost {last.cost_cum:.6g}  -> {out}")
    return 0


def _split(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _write_table(path: Path, table: ComparisonTable) -> None:
    _write_csv(path, table.header(), table.records())


def cmd_compare(args: argparse.Namespace) -> int:
    config = _config(args)
    attacks = _split(args.attacks)
    for attack in attacks:
        if attack not in ATTACKS:
            raise ConfigurationError(f"unknown attack {attack!r}", field="attacks")
    if args.ablation:
        table = run_ablation(config, attacks)
        path = args.output_dir / "ablation.csv"
    else:
        strategies = _split(args.strategies)
        for s in strategies:
            if s not in STRATEGIES:
                raise ConfigurationError(f"unknown strategy {s!r}", field="strategies")
        table = run_comparison(config, strategies, attacks)
        path = args.output_dir / "comparison.csv"
    _write_table(path, table)
    width = max(len(r) for r in table.rows)
    print(" " * width + "  " + "  ".join(f"{a:>10}" for a in table.attacks) + "    rel_cost")
    for row in table.records():
        name, *accs, rel = row
        print(f"{name:<{width}}  " + "  ".join(f"{a:>10.4f}" for a in accs) + f"  {rel:>10.3f}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    config = _config(args)
    try:
        values = [float(v) for v in _split(args.values)]
    except ValueError as exc:
        raise ConfigurationError(f"--values: {exc}", field="values") from None
    rows = run_sweep(config, args.param, values, jobs=args.jobs)
    _write_csv(args.output_dir / f"sweep_{args.param}.csv", [args.param, "accuracy", "cost_cum"], rows)
    for value, acc, cost in rows:
        print(f"{args.param}={value:g}  accuracy {acc:.4f}  cumulative cost {cost:.6g}")
    return 0


def cmd_validate_shapley(args: argparse.Namespace) -> int:
    from .validation import shapley_validation

    config = _config(args)
    report = shapley_validation(config, args.clients, args.at_round, args.permutations)
    rows = [
        [i, float(report.phi[i]), float(report.exact[i]), float(report.monte_carlo[i])]
        for i in range(report.num_clients)
    ]
    _write_csv(args.output_dir / "shapley.csv", ["client", "phi", "exact", "monte_carlo"], rows)
    print(f"clients={report.num_clients} round={report.at_round}")
    print(f"pearson(phi, exact)         = {report.corr_phi_exact:.4f}")
    print(f"pearson(monte carlo, exact) = {report.corr_mc_exact:.4f}  max abs error {report.mc_max_abs_error:.4g}")
    print(
        f"time: gradient {report.seconds_phi * 1e3:.3f} ms, exact {report.seconds_exact:.3f} s, "
        f"monte carlo ({args.permutations} perms) {report.seconds_mc:.3f} s"
    )
    return 0


COMMANDS = {
    "run": cmd_run,
    "compare": cmd_compare,
    "sweep": cmd_sweep,
    "validate-shapley": cmd_validate_shapley,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except InvariantError as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
