"""Command line: ``simulate``, ``account`` and ``compare``.

Exit status is 0 on success, 1 on usage errors and 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

from bdpfl.accountant import (
    LambdaGrid,
    MechanismParams,
    PrivacyLedger,
    epsilon_for_delta,
    estimate_round_cost,
    ledger_add,
)
from bdpfl.config import MODES, ConfigError, load_config
from bdpfl.dp_baseline import dp_epsilon
from bdpfl.federation.simulation import CSV_COLUMNS, Simulation, records_to_csv, run_header

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
RUN_FILES = ("header.txt", "ledger_bdp.txt", "ledger_bdp_instance.txt", "ledger_dp.txt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _prepare_dir(run_dir: Path, csv_name: str, overwrite: bool) -> None:
    existing = [f for f in (*RUN_FILES, csv_name) if (run_dir / f).exists()]
    if existing and not overwrite:
        raise FileExistsError(f"{run_dir} already holds run output ({', '.join(existing)}); "
                              "pass --overwrite to replace it")
    run_dir.mkdir(parents=True, exist_ok=True)
    for f in existing:
        (run_dir / f).unlink()


def _write_run(cfg, csv_path: Path, overwrite: bool, out=None):
    out = out or sys.stdout
    run_dir = csv_path.parent
    _prepare_dir(run_dir, csv_path.name, overwrite)
    sim = Simulation(cfg)
    (run_dir / "header.txt").write_text(run_header(cfg), encoding="utf-8")
    records = list(sim.run())
    csv_path.write_text(records_to_csv(records), encoding="utf-8")
    led = sim.ledgers
    bdp = led.client if led.client is not None else led.instance
    if bdp is not None:
        (run_dir / "ledger_bdp.txt").write_text(bdp.to_text(), encoding="utf-8")
    if led.client is not None and led.instance is not None:
        (run_dir / "ledger_bdp_instance.txt").write_text(led.instance.to_text(), encoding="utf-8")
    if led.dp is not None:
        (run_dir / "ledger_dp.txt").write_text(led.dp.to_text(), encoding="utf-8")
    if records:
        last = records[-1]
        print(f"{cfg.privacy.mode}: {len(records)} rounds, test accuracy {_fmt(last.test_acc)}"
              + (f" ({last.flag})" if last.flag else ""), file=out)
        print(f"  dp            eps={_fmt(last.eps_dp)} delta={cfg.privacy.delta:g}", file=out)
        print(f"  bdp client    eps={_fmt(last.eps_bdp_client)} delta={last.delta_total:g}",
              file=out)
        print(f"  bdp instance  eps={_fmt(last.eps_bdp_instance)} delta={last.delta_total:g}",
              file=out)
    else:
        print(f"{cfg.privacy.mode}: 0 rounds", file=out)
    return records


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    csv_path = Path(args.out) / "rounds.csv" if args.out else Path(cfg.output.csv)
    _write_run(cfg, csv_path, args.overwrite)
    return EXIT_OK


def cmd_compare(args) -> int:
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    if len(set(modes)) < 2 or len(set(modes)) != len(modes):
        raise UsageError("compare needs at least two distinct modes")
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise UsageError(f"unknown mode(s): {', '.join(bad)}")
    cfg = load_config(args.config)
    out_dir = Path(args.out) if args.out else Path(cfg.output.csv).parent
    merged = out_dir / "compare.csv"
    if merged.exists() and not args.overwrite:
        raise FileExistsError(f"{merged} exists; pass --overwrite to replace it")
    lines = ["mode," + ",".join(CSV_COLUMNS)]
    for mode in modes:
        records = _write_run(cfg.replace(privacy={"mode": mode}),
                             out_dir / mode / "rounds.csv", args.overwrite)
        lines += [f"{mode},{r.csv_row()}" for r in records]
    merged.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


def read_norms(path) -> dict[int, list[float]]:
    """Parse ``round,delta_norm`` lines into per-round samples (header optional)."""
    rounds: dict[int, list[float]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if lineno == 1 and line.replace(" ", "") == "round,delta_norm":
                continue
            parts = line.split(",")
            try:
                if len(parts) != 2:
                    raise ValueError(f"expected 2 fields, got {len(parts)}")
                r, d = int(parts[0]), float(parts[1])
                if not (math.isfinite(d) and d >= 0):
                    raise ValueError(f"delta_norm must be finite and non-negative, got {d}")
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
            rounds.setdefault(r, []).append(d)
    return dict(sorted(rounds.items()))


def cmd_account(args, out=None) -> int:
    out = out or sys.stdout
    if not args.sigma > 0 or not 0 <= args.q <= 1 or not 0 < args.delta < 1 \
            or args.lambda_max < 1 or not args.clip > 0:
        raise UsageError("need sigma > 0, 0 <= q <= 1, 0 < delta < 1, lambda-max >= 1, clip > 0")
    rounds = read_norms(args.norms)
    grid = LambdaGrid.up_to(args.lambda_max)
    params = MechanismParams(args.sigma, args.clip, args.q)
    n_rounds = len(rounds)
    print(f"rounds = {n_rounds}", file=out)
    print(f"eps_dp = {_fmt(dp_epsilon(params, n_rounds, args.delta, grid))} "
          f"(delta = {args.delta:g})", file=out)
    if n_rounds == 0:
        raise ValueError("insufficient samples: m=0 (need at least 2) for the BDP estimator")
    ledger = PrivacyLedger(grid)
    delta_prime = args.delta / (2.0 * n_rounds)
    for r, norms in rounds.items():
        try:
            est = estimate_round_cost(norms, params, grid, delta_prime, drop_saturated=True)
        except ValueError as exc:
            raise ValueError(f"round {r}: {exc}") from None
        ledger = ledger_add(ledger, est)
    ed = epsilon_for_delta(ledger, args.delta / 2.0)
    print(f"eps_bdp = {_fmt(ed.epsilon)} (delta = {ed.delta:g}, lambda = {ed.order})", file=out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bdpfl", description="Bayesian privacy accounting for federated learning")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("simulate", help="run one experiment from a config file")
    s.add_argument("config")
    s.add_argument("--out", help="run directory (default: parent of output.csv)")
    s.add_argument("--overwrite", action="store_true")
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("account", help="replay the accountants over recorded sensitivities")
    a.add_argument("norms", help="file of round,delta_norm lines")
    a.add_argument("--sigma", type=float, required=True)
    a.add_argument("--q", type=float, required=True)
    a.add_argument("--delta", type=float, required=True)
    a.add_argument("--lambda-max", type=int, default=64)
    a.add_argument("--clip", type=float, default=1.0)
    a.set_defaults(func=cmd_account)

    c = sub.add_parser("compare", help="run several modes on matched seeds")
    c.add_argument("config")
    c.add_argument("--modes", required=True, help="comma-separated, at least two")
    c.add_argument("--out", help="output directory (default: parent of output.csv)")
    c.add_argument("--overwrite", action="store_true")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
