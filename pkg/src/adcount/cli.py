"""Command-line driver.

Exit codes: 0 success, 1 usage error, 2 configuration or input parse error,
3 runtime failure. Every command prints its resolved configuration to stderr
so stdout can carry CSV.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile
import time
from collections import Counter
from fractions import Fraction
from pathlib import Path

from . import __version__
from .aggregator import threshold_of_counts
from .blinding import REPORT_HEADER_SIZE, blinding_vectors_batch, Roster
from .client import ClientWeekState, ThresholdMode, canonical_ad_key, decide, read_replay
from .errors import AdCountError, ConfigError, ReplayParseError
from .harness import HarnessConfig, dump_transcript, infrastructure, run_round
from .messages import FRAME_HEADER_SIZE
from .oprf import InProcessTransport, OprfClient, OprfServer, oprf_keygen
from .simulator import (
    PRESETS,
    SWEEPABLE,
    SimConfig,
    format_config,
    generate_world,
    parse_config,
    result_row,
    rows_to_csv,
    run_experiment,
    simulate_week,
    sweep,
)
from .sketch import SketchParams

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def atomic_write(path: str | os.PathLike, text: str) -> None:
    """Write to a temporary file next to ``path`` and rename it into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(text: str, out: str | None) -> None:
    if out:
        atomic_write(out, text)
    else:
        sys.stdout.write(text)


def _int_list(text: str) -> list[int]:
    """``"1..15"``, ``"1,3,5"`` or a mix of both."""
    values: list[int] = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        if ".." in part:
            lo, hi = part.split("..", 1)
            values.extend(range(int(lo), int(hi) + 1))
        else:
            values.append(int(part))
    return values


def _load_sim_config(args) -> SimConfig:
    base = SimConfig()
    if getattr(args, "preset", None):
        base = base.replace(**PRESETS[args.preset])
    config = base
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        config = parse_config(text, base)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "mode", None):
        overrides["mode"] = ThresholdMode(args.mode)
    if getattr(args, "privacy", None):
        overrides["privacy"] = args.privacy == "on"
    return config.replace(**overrides) if overrides else config


def _print_config(title: str, text: str) -> None:
    sys.stderr.write(f"# {title}\n")
    for line in text.splitlines():
        sys.stderr.write(f"#   {line}\n")


# -- commands --------------------------------------------------------------------


def cmd_simulate(args) -> int:
    config = _load_sim_config(args)
    _print_config("resolved config", format_config(config))
    result = run_experiment(config)
    _emit(rows_to_csv([result_row(result)]), args.out)
    c = result.counts
    sys.stderr.write(f"# tp={c.tp} fp={c.fp} tn={c.tn} fn={c.fn} insufficient={c.insufficient}\n")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _load_sim_config(args)
    if args.parameter == "mode":
        values = [v.strip() for v in args.values.split(",")]
    elif args.parameter == "targeted_fraction":
        values = [float(v) for v in args.values.split(",")]
    else:
        values = _int_list(args.values)
    seeds = _int_list(args.seeds)
    _print_config("resolved config", format_config(config) +
                  f"sweep {args.parameter} = {','.join(map(str, values))}\nseeds = {','.join(map(str, seeds))}\n")
    rows = sweep(config, args.parameter, values, seeds, workers=args.workers)
    _emit(rows_to_csv(rows), args.out)
    return EXIT_OK


def cmd_round(args) -> int:
    sim = _load_sim_config(args).replace(num_users=args.users)
    drop = frozenset(_int_list(args.drop)) if args.drop else frozenset()
    config = HarnessConfig(
        num_users=args.users, seed=sim.seed, key_seed=sim.key_seed, drop=drop, mode=sim.mode,
        oprf_bits=args.oprf_bits, epsilon=sim.epsilon, delta=sim.delta, capacity=sim.capacity,
        a_size=sim.a_size, round_tag=args.round_tag, batched_blinding=True,
    )
    config.validate()
    _print_config("resolved config", format_config(sim) + "".join(
        f"{k} = {v}\n" for k, v in (("drop", ",".join(map(str, sorted(drop)))), ("oprf_bits", args.oprf_bits),
                                    ("round_tag", args.round_tag))))
    logs = simulate_week(generate_world(sim)).observation_logs()
    outcome = run_round(config, logs)
    tally = Counter(d.value for ds in outcome.decisions.values() for d in ds.values())
    lines = [
        f"round {outcome.round_tag}: phase={outcome.phase.value} missing={outcome.missing}",
        f"distribution: {len(outcome.distribution)} ids, users_th="
        + ("none" if outcome.users_th is None else f"{float(outcome.users_th):.6f}"),
        "decisions: " + ", ".join(f"{k}={tally[k]}" for k in sorted(tally)),
        "messages:",
    ]
    for kind, count in outcome.message_counts.items():
        lines.append(f"  {kind:<22} count={count:<7} bytes={outcome.byte_totals[kind]}")
    sys.stdout.write("\n".join(lines) + "\n")
    if args.out:
        atomic_write(args.out, dump_transcript(outcome.transcript))
    return EXIT_OK


def cmd_bench(args) -> int:
    _print_config("resolved config", f"users = {args.users}\noprf_bits = {args.oprf_bits}\n")
    lines = ["sketch payload sizes (epsilon = delta = 0.001, 4-byte cells):"]
    for capacity in (10_000, 50_000, 100_000):
        p = SketchParams(0.001, 0.001, capacity)
        lines.append(f"  T={capacity:>7}  depth={p.depth}  width={p.width}  payload={p.payload_bytes:,} B"
                     f"  (~{round(p.payload_bytes / 1000)} KB)")
    params = SketchParams(0.001, 0.001, 100_000)
    infra = infrastructure(0, args.users, "p256", 1024)
    roster = Roster.from_keypairs(infra.keypairs, 1)
    start = time.perf_counter()
    blinding_vectors_batch(infra.keypairs, roster, params.cell_count)
    elapsed = time.perf_counter() - start
    lines.append(f"blinding vectors for N={args.users}, M={params.cell_count}: {elapsed:.3f} s total "
                 "(pair secrets included on first use)")
    key = oprf_keygen(args.oprf_bits, seed=1)
    transport = InProcessTransport(OprfServer(key))
    client = OprfClient(key.public, transport)
    rounds = 50
    start = time.perf_counter()
    for i in range(rounds):
        client.map_url(f"https://bench.example/ad/{i}")
    per = (time.perf_counter() - start) / rounds
    lines.append(f"oprf round trip ({args.oprf_bits}-bit, in-process): {per * 1e3:.3f} ms;"
                 f" payload {transport.bytes_sent // rounds} B up, {transport.bytes_received // rounds} B down")
    lines.append("bytes per message type (frame header included):")
    lines.append(f"  REPORT / ADJUSTED_REPORT  {FRAME_HEADER_SIZE + REPORT_HEADER_SIZE + params.payload_bytes}")
    lines.append(f"  OPRF_REQUEST / RESPONSE   {FRAME_HEADER_SIZE + key.public.byte_length}")
    lines.append(f"  THRESHOLD_BROADCAST       {FRAME_HEADER_SIZE + 17}")
    lines.append(f"  MISSING_LIST              {FRAME_HEADER_SIZE} + 8 + 4 per missing user")
    lines.append(f"  USERS_COUNT_REQUEST       {FRAME_HEADER_SIZE} + 4 + 8 per ad id")
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def read_distribution(path: str) -> tuple[dict[str, int], Fraction | None]:
    """``<users count> <ad key>`` per line; an optional ``threshold <value>`` line pins users_th."""
    counts: dict[str, int] = {}
    users_th = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(None, 1)
            if len(parts) != 2:
                raise ReplayParseError("expected '<count> <ad key>'", lineno)
            try:
                if parts[0] == "threshold":
                    users_th = Fraction(parts[1])
                    continue
                count = int(parts[0])
                if count < 0:
                    raise ValueError("negative count")
                counts[canonical_ad_key(parts[1])] = count
            except ValueError as exc:
                raise ReplayParseError(str(exc), lineno) from None
    return counts, users_th


def cmd_classify_replay(args) -> int:
    mode = ThresholdMode(args.mode or "mean")
    try:
        with open(args.observations) as fh:
            log = read_replay(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read observations: {exc}") from None
    counts, users_th = read_distribution(args.distribution)
    if users_th is None:
        nonzero = [c for c in counts.values() if c > 0]
        users_th = threshold_of_counts(nonzero, mode) if nonzero else Fraction(0)
    _print_config("resolved config", f"mode = {mode.value}\nusers_th = {users_th}\n")
    start = min((o.timestamp for o in log), default=0.0)
    state = ClientWeekState(start)
    state.record_all(log)
    local_th = state.domains_threshold(mode)
    out = ["ad\tdomains_count\tlocal_th\tusers_count\tusers_th\tdecision"]
    for ad in sorted(state.distinct_ads):
        dc = state.domains_count(ad)
        uc = counts.get(ad, 0)
        decision = decide(dc, local_th, uc, users_th)
        lt = "none" if local_th is None else f"{float(local_th):.6f}"
        out.append(f"{ad}\t{dc}\t{lt}\t{uc}\t{float(users_th):.6f}\t{decision.value}")
    _emit("\n".join(out) + "\n", args.out)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adcount", description="Count-based targeted-ad detection with private aggregation.")
    parser.add_argument("--version", action="version", version=f"adcount {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def sim_flags(p, privacy=True):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--preset", choices=sorted(PRESETS), help="start from a named preset")
        p.add_argument("--out", help="output file (default stdout)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--mode", choices=[m.value for m in ThresholdMode])
        if privacy:
            p.add_argument("--privacy", choices=["on", "off"])

    p = sub.add_parser("simulate", help="run one experiment and write a CSV row")
    sim_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="sweep one parameter over values and seeds")
    sim_flags(p)
    p.add_argument("--parameter", required=True, choices=SWEEPABLE)
    p.add_argument("--values", required=True, help="e.g. 1..15 or mean,mean-median")
    p.add_argument("--seeds", default="0..9", help="e.g. 0..9 (default)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("round", help="run one full protocol round in the harness")
    sim_flags(p, privacy=False)
    p.add_argument("--users", type=int, default=20)
    p.add_argument("--drop", help="indices of clients that never report, e.g. 2,5")
    p.add_argument("--oprf-bits", type=int, default=2048)
    p.add_argument("--round-tag", type=int, default=1)
    p.set_defaults(func=cmd_round)

    p = sub.add_parser("bench", help="sizes and timing of the protocol building blocks")
    p.add_argument("--users", type=int, default=50)
    p.add_argument("--oprf-bits", type=int, default=2048)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("classify-replay", help="classify the ads of one recorded week")
    p.add_argument("observations", help="observation replay file")
    p.add_argument("distribution", help="users count per ad key")
    p.add_argument("--mode", choices=[m.value for m in ThresholdMode])
    p.add_argument("--out")
    p.set_defaults(func=cmd_classify_replay)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except ReplayParseError as exc:
        sys.stderr.write(f"parse error: {exc}\n")
        return EXIT_CONFIG
    except (AdCountError, OSError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
