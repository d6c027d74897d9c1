"""Command-line entry point.

Subcommands: simulate (run the strategy simulator and write sample +
summary files), decode (run the cell decoder over a detection file),
calibrate (fit the lognormal latency model), report (summarize a
latency samples file). All outputs are plain text, reproducible byte
for byte for a given config and seed; floats are rendered with repr().
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional

from . import metrics
from .backend import calibrate_lognormal, lognormal_stats, load_latency_samples
from .codec import DEFAULT_DETECTION_THRESHOLD, build_layout, decode, read_detections
from .engine import (
    ConfigError,
    ExperimentResult,
    RunConfig,
    build_config,
    parse_config_text,
    run_experiment,
)

STRATEGIES = ("no_replication", "timeout_replication", "collage")


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _kv(key: str, value) -> str:
    return f"{key} = {_fmt(value)}"


def _load_overrides(args) -> dict[str, str]:
    overrides: dict[str, str] = {}
    if args.config is not None:
        overrides.update(parse_config_text(Path(args.config).read_text(encoding="ascii")))
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key] = value
    return overrides


def _summary_lines(cfg: RunConfig, result: ExperimentResult) -> list[str]:
    summary = metrics.summarize(result.batch_latencies_s)
    ledger = result.ledger
    lines = [
        _kv("strategy", cfg.strategy.kind),
        _kv("n_workers", cfg.n_workers),
        _kv("k", cfg.k),
        _kv("batches", cfg.batches),
        _kv("seed", cfg.seed),
        _kv("class_count", cfg.class_count),
        _kv("detection_threshold", cfg.detection_threshold),
    ]
    if cfg.strategy.timeout_s is not None:
        lines.append(_kv("timeout_s", cfg.strategy.timeout_s))
    if cfg.strategy.collage_timeout_s is not None:
        lines.append(_kv("collage_timeout_s", cfg.strategy.collage_timeout_s))
    lines += [
        _kv("count", summary.count),
        _kv("mean_s", summary.mean_s),
        _kv("stddev_s", summary.stddev_s),
        _kv("p50_s", summary.p50_s),
        _kv("p99_s", summary.p99_s),
        _kv("min_s", summary.min_s),
        _kv("max_s", summary.max_s),
        _kv("total_requests", ledger.total_requests),
        _kv("slowdown_requests", ledger.slowdown_requests),
        _kv("collage_used", ledger.collage_used),
        _kv("collage_correct", ledger.collage_correct),
        _kv("collage_unavailable", ledger.collage_unavailable),
        _kv("collage_straggler_batches", ledger.collage_straggler_batches),
    ]
    if ledger.collage_used > 0:
        lines.append(_kv("recovery_accuracy", metrics.recovery_accuracy(ledger)))
    else:
        lines.append("recovery_accuracy = undefined")
    lines.append(_kv("redundancy_overhead", metrics.redundancy_overhead(cfg.n_workers)))
    return lines


def _cmd_simulate(args) -> int:
    overrides = _load_overrides(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    kinds = list(STRATEGIES) if args.compare else [None]

    results: dict[str, tuple[RunConfig, ExperimentResult]] = {}
    for kind in kinds:
        merged = dict(overrides)
        if kind is not None:
            merged["strategy"] = kind
        cfg = build_config(merged)
        result = run_experiment(cfg)
        results[cfg.strategy.kind] = (cfg, result)

        samples_path = out_dir / f"samples_{cfg.strategy.kind}.txt"
        samples_path.write_text(
            "".join(repr(x) + "\n" for x in result.batch_latencies_s), encoding="ascii"
        )
        summary_lines = _summary_lines(cfg, result)
        summary_path = out_dir / f"summary_{cfg.strategy.kind}.txt"
        summary_path.write_text("".join(line + "\n" for line in summary_lines), encoding="ascii")
        for line in summary_lines:
            print(line)
        print()

    if args.compare:
        cmp_lines = []
        for key in ("mean_s", "stddev_s", "p50_s", "p99_s"):
            for kind in STRATEGIES:
                summary = metrics.summarize(results[kind][1].batch_latencies_s)
                cmp_lines.append(_kv(f"{key}_{kind}", getattr(summary, key)))
        s_norep = metrics.summarize(results["no_replication"][1].batch_latencies_s)
        s_trep = metrics.summarize(results["timeout_replication"][1].batch_latencies_s)
        s_coll = metrics.summarize(results["collage"][1].batch_latencies_s)
        cmp_lines += [
            _kv("p99_ratio_no_replication_to_collage", s_norep.p99_s / s_coll.p99_s),
            _kv("stddev_ratio_no_replication_to_collage", s_norep.stddev_s / s_coll.stddev_s),
            _kv(
                "stddev_ratio_timeout_replication_to_collage",
                s_trep.stddev_s / s_coll.stddev_s,
            ),
            _kv("mean_ratio_collage_to_timeout_replication", s_coll.mean_s / s_trep.mean_s),
        ]
        (out_dir / "comparison.txt").write_text(
            "".join(line + "\n" for line in cmp_lines), encoding="ascii"
        )
        for line in cmp_lines:
            print(line)
    return 0


def _cmd_decode(args) -> int:
    layout = build_layout(args.k)
    with open(args.path, "r", encoding="ascii") as fh:
        dets = read_detections(fh)
    cells = decode(dets, layout, args.threshold)
    for i, entry in enumerate(cells):
        if entry is None:
            print(f"{i} empty")
        else:
            print(f"{i} {entry.class_id} {entry.confidence!r}")
    return 0


def _cmd_calibrate(args) -> int:
    mu, sigma = calibrate_lognormal(args.mean_s, args.p99_s)
    mean_back, p99_back = lognormal_stats(mu, sigma)
    print(_kv("mu", mu))
    print(_kv("sigma", sigma))
    print(_kv("mean_s", mean_back))
    print(_kv("p99_s", p99_back))
    return 0


def _cmd_report(args) -> int:
    with open(args.path, "r", encoding="ascii") as fh:
        samples = load_latency_samples(fh)
    summary = metrics.summarize(samples)
    print(_kv("count", summary.count))
    print(_kv("mean_s", summary.mean_s))
    print(_kv("stddev_s", summary.stddev_s))
    print(_kv("p50_s", summary.p50_s))
    print(_kv("p99_s", summary.p99_s))
    print(_kv("min_s", summary.min_s))
    print(_kv("max_s", summary.max_s))
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="codedcollage",
        description="collage coded-redundancy simulator and decoder tools",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run the strategy simulator")
    sim.add_argument("--config", default=None, help="key = value config file")
    sim.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key (repeatable; wins over --config)",
    )
    sim.add_argument("--out", default=".", help="directory for sample/summary files")
    sim.add_argument(
        "--compare",
        action="store_true",
        help="run all three strategies under the shared seed and write comparison.txt",
    )
    sim.set_defaults(func=_cmd_simulate)

    dec = sub.add_parser("decode", help="decode a detection list into cell predictions")
    dec.add_argument("--k", type=int, required=True, help="grid dimension")
    dec.add_argument(
        "--threshold",
        type=float,
        default=DEFAULT_DETECTION_THRESHOLD,
        help="detection confidence threshold",
    )
    dec.add_argument("path", help="detection list file")
    dec.set_defaults(func=_cmd_decode)

    cal = sub.add_parser("calibrate", help="fit the lognormal latency model")
    cal.add_argument("mean_s", type=float, help="target mean latency, seconds")
    cal.add_argument("p99_s", type=float, help="target 99th percentile, seconds")
    cal.set_defaults(func=_cmd_calibrate)

    rep = sub.add_parser("report", help="summarize a latency samples file")
    rep.add_argument("path", help="samples file, one seconds value per line")
    rep.set_defaults(func=_cmd_report)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
