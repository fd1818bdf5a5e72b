"""Command-line front end.

Subcommands: `map` (run the unwrapping pipeline), `report` (Table-style
CSV/JSON), `timeseries` (stacked per-category wrapping data), `synth`
(generate scenarios), `validate` (check inputs, optionally compare a
mapping run against ground truth).

Exit codes: 0 ok, 1 unexpected, 2 I/O, 3 bad data (parse/schema/ledger
conflicts), 4 coverage assertion failed, 5 cycle or non-convergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from .errors import (
    ConfigError,
    CycleDetected,
    IterationLimitExceeded,
    TokenMapError,
    UnresolvedMajorHolder,
)
from .ingest import load_events, load_registries
from .mapper import MappingResult, mapping_result_from_jsonable, run_iterative_mapping
from .metrics import concentration_report, integration_report
from .model import (
    Address,
    Snapshot,
    TokenId,
    fraction_to_str,
    validate_snapshot_series,
)
from .pipeline import SnapshotContext, map_snapshot
from .reports import (
    CONCENTRATION_HEADER,
    INTEGRATION_HEADER,
    TIMESERIES_HEADER,
    SnapshotMetrics,
    build_concentration_table,
    build_integration_table,
    build_timeseries_rows,
    render_csv,
    rows_to_json,
)
from . import synth

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_IO = 2
EXIT_DATA = 3
EXIT_UNRESOLVED = 4
EXIT_CYCLE = 5

OUT_DIR_ENV = "TOKENMAP_OUT_DIR"


@dataclass(frozen=True)
class TokenConfig:
    token: TokenId
    protocol: str


@dataclass
class RunConfig:
    tokens: list[TokenConfig]
    snapshots: list[Snapshot]
    events_path: Path
    labels_path: Path
    contracts_path: Path
    out_dir: Path
    iteration_cap: int = 50
    top_window: int = 1000
    unknown_threshold: Fraction = Fraction(1, 1000)
    gini_pad: bool = True
    workers: int = 1


def load_config(path: str | Path, args: argparse.Namespace | None = None) -> RunConfig:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as handle:
        obj = json.load(handle)
    base = path.parent

    def resolve(key: str) -> Path:
        raw = obj.get(key)
        if not raw:
            raise ConfigError(f"config is missing {key!r}")
        candidate = Path(raw)
        return candidate if candidate.is_absolute() else base / candidate

    tokens = []
    for item in obj.get("tokens", []):
        token = TokenId(
            Address(item["address"]),
            symbol=str(item["symbol"]),
            decimals=int(item.get("decimals", 18)),
        )
        tokens.append(TokenConfig(token, protocol=str(item.get("protocol") or token.symbol.lower())))
    if not tokens:
        raise ConfigError("config declares no tokens")
    snapshots = [Snapshot(int(s["block"]), s["date"]) for s in obj.get("snapshots", [])]
    if not snapshots:
        raise ConfigError("config declares no snapshots")
    try:
        validate_snapshot_series(snapshots)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    out_dir = obj.get("out_dir", "out")
    if os.environ.get(OUT_DIR_ENV):
        out_dir = os.environ[OUT_DIR_ENV]
    if args is not None and getattr(args, "out_dir", None):
        out_dir = args.out_dir
    out_path = Path(out_dir)
    if not out_path.is_absolute():
        out_path = base / out_path

    config = RunConfig(
        tokens=tokens,
        snapshots=snapshots,
        events_path=resolve("events"),
        labels_path=resolve("labels"),
        contracts_path=resolve("contracts"),
        out_dir=out_path,
        iteration_cap=int(obj.get("iteration_cap", 50)),
        top_window=int(obj.get("top_window", 1000)),
        unknown_threshold=Fraction(str(obj.get("unknown_threshold", "1/1000"))),
        gini_pad=bool(obj.get("gini_pad", True)),
        workers=int(obj.get("workers", 1)),
    )
    if args is not None:
        if getattr(args, "iteration_cap", None):
            config.iteration_cap = args.iteration_cap
        if getattr(args, "workers", None):
            config.workers = args.workers
        if getattr(args, "gini_restrict", False):
            config.gini_pad = False
    return config


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def mapping_filename(token: TokenId, snapshot: Snapshot) -> str:
    return f"{token.symbol}_{snapshot.block}.mapping.json"


def _run_one(config: RunConfig, context: SnapshotContext, tc: TokenConfig, snapshot: Snapshot) -> Path:
    result = map_snapshot(
        context.events,
        context.labels,
        context.contracts,
        tc.token,
        snapshot,
        token_protocol=tc.protocol,
        iteration_cap=config.iteration_cap,
        top_window=config.top_window,
        unknown_threshold=config.unknown_threshold,
        context=context,
    )
    payload = result.to_jsonable()
    payload["protocol"] = tc.protocol
    out_path = config.out_dir / mapping_filename(tc.token, snapshot)
    _atomic_write(out_path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return out_path


def cmd_map(args: argparse.Namespace) -> int:
    config = load_config(args.config, args)
    events = load_events(config.events_path)
    labels, contracts = load_registries(config.labels_path, config.contracts_path)

    jobs = []
    contexts = {
        snapshot: SnapshotContext(events, labels, contracts, snapshot)
        for snapshot in config.snapshots
    }
    for snapshot in config.snapshots:
        for tc in config.tokens:
            jobs.append((tc, snapshot))

    failures: list[tuple[TokenConfig, Snapshot, BaseException]] = []

    def run(job):
        tc, snapshot = job
        try:
            path = _run_one(config, contexts[snapshot], tc, snapshot)
            log.info("wrote %s", path)
            return None
        except BaseException as exc:  # per-job isolation
            return (tc, snapshot, exc)

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            for outcome in pool.map(run, jobs):
                if outcome is not None:
                    failures.append(outcome)
    else:
        for job in jobs:
            outcome = run(job)
            if outcome is not None:
                failures.append(outcome)

    if failures:
        worst = EXIT_ERROR
        for tc, snapshot, exc in failures:
            print(
                f"error: {tc.token.symbol}@{snapshot.block}: {exc}",
                file=sys.stderr,
            )
            worst = max(worst, _exit_code_for(exc))
        return worst
    return EXIT_OK


def _exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, UnresolvedMajorHolder):
        return EXIT_UNRESOLVED
    if isinstance(exc, (CycleDetected, IterationLimitExceeded)):
        return EXIT_CYCLE
    if isinstance(exc, TokenMapError):
        return EXIT_DATA
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_ERROR


def _load_results(config: RunConfig) -> dict[tuple[TokenId, Snapshot], MappingResult]:
    results: dict[tuple[TokenId, Snapshot], MappingResult] = {}
    for snapshot in config.snapshots:
        for tc in config.tokens:
            path = config.out_dir / mapping_filename(tc.token, snapshot)
            if not path.exists():
                raise FileNotFoundError(f"mapping output missing: {path} (run `tokenmap map` first)")
            with open(path, "r", encoding="utf-8") as handle:
                results[(tc.token, snapshot)] = mapping_result_from_jsonable(json.load(handle))
    return results


def _metrics_series(config: RunConfig) -> dict[TokenId, list[SnapshotMetrics]]:
    results = _load_results(config)
    series: dict[TokenId, list[SnapshotMetrics]] = {tc.token: [] for tc in config.tokens}
    for snapshot in config.snapshots:
        peer_tables = {
            token: results[(token, snapshot)].table
            for token, snap in results
            if snap == snapshot
        }
        for tc in config.tokens:
            result = results[(tc.token, snapshot)]
            conc = concentration_report(result.table, gini_pad=config.gini_pad)
            integ = integration_report(result, peer_tables=peer_tables)
            series[tc.token].append(SnapshotMetrics(tc.token, snapshot, conc, integ))
    return series


def cmd_report(args: argparse.Namespace) -> int:
    config = load_config(args.config, args)
    series = _metrics_series(config)
    conc_rows = build_concentration_table(series)
    integ_rows = build_integration_table(series)
    _atomic_write(config.out_dir / "concentration.csv", render_csv(CONCENTRATION_HEADER, conc_rows))
    _atomic_write(config.out_dir / "integration.csv", render_csv(INTEGRATION_HEADER, integ_rows))
    _atomic_write(
        config.out_dir / "concentration.json",
        json.dumps(rows_to_json(CONCENTRATION_HEADER, conc_rows), indent=2) + "\n",
    )
    _atomic_write(
        config.out_dir / "integration.json",
        json.dumps(rows_to_json(INTEGRATION_HEADER, integ_rows), indent=2) + "\n",
    )
    print(render_csv(CONCENTRATION_HEADER, conc_rows), end="")
    print(render_csv(INTEGRATION_HEADER, integ_rows), end="")
    return EXIT_OK


def cmd_timeseries(args: argparse.Namespace) -> int:
    config = load_config(args.config, args)
    series = _metrics_series(config)
    rows = build_timeseries_rows(series)
    _atomic_write(config.out_dir / "timeseries.csv", render_csv(TIMESERIES_HEADER, rows))
    print(render_csv(TIMESERIES_HEADER, rows), end="")
    return EXIT_OK


def _parse_mix(text: str | None) -> dict[str, float] | None:
    if not text:
        return None
    mix: dict[str, float] = {}
    for part in text.split(","):
        key, _, value = part.partition("=")
        mix[key.strip()] = float(value)
    return mix


def cmd_synth(args: argparse.Namespace) -> int:
    if args.fixture:
        scenario = {
            "paper-chain": synth.paper_chain_fixture,
            "complexity-4": synth.complexity_chain_fixture,
        }[args.fixture]()
    else:
        kwargs = {}
        pool_mix = _parse_mix(args.pool_mix)
        exclusion_mix = _parse_mix(args.exclusion_mix)
        if pool_mix:
            kwargs["pool_mix"] = pool_mix
        if exclusion_mix:
            kwargs["exclusion_mix"] = exclusion_mix
        spec = synth.ScenarioSpec(
            seed=args.seed,
            n_eoas=args.eoas,
            n_tokens=args.tokens,
            max_depth=args.depth,
            **kwargs,
        )
        scenario = synth.generate(spec)
    paths = scenario.write(args.out)
    for name, path in sorted(paths.items()):
        print(f"{name}: {path}")
    return EXIT_OK


def _compare_with_truth(config: RunConfig, truth_path: Path) -> list[str]:
    with open(truth_path, "r", encoding="utf-8") as handle:
        truth_obj = json.load(handle)
    results = _load_results(config)
    problems: list[str] = []
    snapshot = config.snapshots[-1]
    for tc in config.tokens:
        expected = truth_obj.get(tc.token.address)
        if expected is None:
            problems.append(f"{tc.token.symbol}: no ground truth recorded")
            continue
        result = results[(tc.token, snapshot)]
        want = {Address(a): Fraction(v) for a, v in expected["ownership"].items()}
        got = dict(result.table.entries)
        if want != got:
            missing = set(want) - set(got)
            extra = set(got) - set(want)
            wrong = {a for a in set(want) & set(got) if want[a] != got[a]}
            problems.append(
                f"{tc.token.symbol}: ownership mismatch "
                f"(missing {len(missing)}, extra {len(extra)}, wrong {len(wrong)})"
            )
        want_excl: dict[Address, Fraction] = {}
        for record in expected.get("exclusions", []):
            addr = Address(record["address"])
            want_excl[addr] = want_excl.get(addr, Fraction(0)) + Fraction(record["amount"])
        got_excl: dict[Address, Fraction] = {}
        for (addr, _), amount in result.exclusions.items():
            got_excl[addr] = got_excl.get(addr, Fraction(0)) + amount
        if want_excl != got_excl:
            problems.append(f"{tc.token.symbol}: exclusion log mismatch")
        want_adj = {k: Fraction(v) for k, v in expected.get("expected_adjustments", {}).items()}
        got_adj: dict[str, Fraction] = {}
        for adj in result.adjustments:
            got_adj[adj.category.value] = got_adj.get(adj.category.value, Fraction(0)) + abs(adj.amount)
        if want_adj != got_adj:
            problems.append(f"{tc.token.symbol}: adjustment totals mismatch")
    return problems


def cmd_validate(args: argparse.Namespace) -> int:
    config = load_config(args.config, args)
    events = load_events(config.events_path)
    labels, contracts = load_registries(config.labels_path, config.contracts_path)
    print(
        f"ok: {len(events)} events, {len(labels.entries)} labels, "
        f"{len(contracts.entries)} contracts, {len(config.snapshots)} snapshots"
    )
    if args.truth:
        problems = _compare_with_truth(config, Path(args.truth))
        if problems:
            for problem in problems:
                print(f"mismatch: {problem}", file=sys.stderr)
            return EXIT_DATA
        print("ok: mapping outputs match ground truth exactly")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tokenmap",
        description="Reconstruct token holder tables, unwrap custodial holdings, compute ownership metrics.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_command(name: str, help_text: str):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="run configuration JSON")
        cmd.add_argument("--out-dir", help="override the configured output directory")
        cmd.add_argument("--iteration-cap", type=int, help="override the mapping iteration cap")
        cmd.add_argument("--workers", type=int, help="parallel (token, snapshot) jobs")
        cmd.add_argument(
            "--gini-restrict",
            action="store_true",
            help="compute Gini over existing holders instead of zero-padding to 500",
        )
        return cmd

    add_config_command("map", "run ingestion and iterative mapping, write result files").set_defaults(func=cmd_map)
    add_config_command("report", "emit concentration/integration tables as CSV and JSON").set_defaults(func=cmd_report)
    add_config_command("timeseries", "emit stacked per-category wrapping-complexity series").set_defaults(func=cmd_timeseries)

    synth_cmd = sub.add_parser("synth", help="generate a synthetic scenario with ground truth")
    synth_cmd.add_argument("--seed", type=int, default=1)
    synth_cmd.add_argument("--eoas", type=int, default=50)
    synth_cmd.add_argument("--tokens", type=int, default=1)
    synth_cmd.add_argument("--depth", type=int, default=2)
    synth_cmd.add_argument("--pool-mix", help="e.g. liquidity_pool=0.4,lending_pool=0.3,staking=0.2,wrapper=0.1")
    synth_cmd.add_argument("--exclusion-mix", help="e.g. cex=0.5,burner=0.25,ftia=0.25")
    synth_cmd.add_argument("--fixture", choices=["paper-chain", "complexity-4"])
    synth_cmd.add_argument("--out", required=True, help="output directory for scenario files")
    synth_cmd.set_defaults(func=cmd_synth)

    validate_cmd = add_config_command("validate", "validate inputs; optionally compare outputs to ground truth")
    validate_cmd.add_argument("--truth", help="truth.json produced by `tokenmap synth`")
    validate_cmd.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except UnresolvedMajorHolder as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNRESOLVED
    except (CycleDetected, IterationLimitExceeded) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CYCLE
    except TokenMapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
