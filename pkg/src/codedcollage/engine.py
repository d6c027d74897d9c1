"""Deterministic closed-loop simulator for the three dispatch strategies.

A batch sends one image to each of N workers. The strategies differ in
what happens to slow requests:

* ``no_replication``: wait for everyone; a batch is as slow as its
  slowest worker.
* ``timeout_replication``: any request still pending at ``timeout_s``
  is replicated to a fresh worker; the earlier of original and replica
  completes it.
* ``collage``: one extra worker classifies the whole batch at once from
  a K-by-K collage. When its decoded result is ready (at
  ``encode_s + latency + decode_s``), its per-cell predictions stand in
  for every worker that has not answered yet; stragglers whose cell
  decoded empty are replicated instead. If the collage itself misses
  ``collage_timeout_s``, all stragglers are replicated at the deadline.

The schedule functions below are pure: they take the sampled arrival
facts and return the batch outcome, so the policy arithmetic is testable
with hand-picked latencies. ``run_batch``/``run_experiment`` wrap them
with the oracle samplers. "Straggler" under the collage strategy means
the worker's result had not arrived when the decoded collage result was
ready; that choice (rather than a separate timer) keeps the policy
work-conserving.

Replicas draw from dedicated per-worker streams, so enabling replication
never changes the base latency draws: under one seed, a request's
completion time under ``collage`` is provably never worse than under
``no_replication``, and ``timeout_replication`` with an infinite timeout
degenerates to ``no_replication`` exactly.

Ledger semantics per strategy: ``no_replication`` has no deadline, so it
records no slowdowns; under ``timeout_replication`` every slowdown is
collage-unavailable by definition (there is no collage); under
``collage`` the slowdowns split between collage_used and
collage_unavailable, and ``collage_straggler_batches`` counts batches
whose collage worker missed its own deadline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, NamedTuple, Optional, Sequence

from . import backend, codec
from .backend import CollageModel, CostModel, LatencyModel, WorkerModel
from .codec import DEFAULT_DETECTION_THRESHOLD, CellPredictions, CollageLayout
from .metrics import RecoveryLedger

__all__ = [
    "Strategy",
    "RequestOutcome",
    "BatchOutcome",
    "BatchAccounting",
    "RunConfig",
    "StreamSet",
    "ExperimentResult",
    "schedule_no_replication",
    "schedule_timeout_replication",
    "schedule_collage",
    "run_batch",
    "run_experiment",
    "ConfigError",
    "parse_config_text",
    "build_config",
    "default_config",
    "CONFIG_DEFAULTS",
    "RecoveryLedger",
]

STRATEGY_KINDS = ("no_replication", "timeout_replication", "collage")

# A replica source maps a request index to a fresh (latency_s, class)
# sample; the simulator binds it to the per-worker replica streams.
ReplicaSource = Callable[[int], tuple[float, int]]


@dataclass(frozen=True)
class Strategy:
    kind: str
    timeout_s: Optional[float] = None
    collage_timeout_s: Optional[float] = None

    def __post_init__(self) -> None:
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if self.kind == "timeout_replication":
            if self.timeout_s is None or self.timeout_s <= 0:
                raise ValueError(f"timeout_s must be positive, got {self.timeout_s}")
        if self.kind == "collage":
            if self.collage_timeout_s is None or self.collage_timeout_s <= 0:
                raise ValueError(
                    f"collage_timeout_s must be positive, got {self.collage_timeout_s}"
                )

    @classmethod
    def no_replication(cls) -> "Strategy":
        return cls(kind="no_replication")

    @classmethod
    def timeout_replication(cls, timeout_s: float) -> "Strategy":
        return cls(kind="timeout_replication", timeout_s=timeout_s)

    @classmethod
    def collage(cls, collage_timeout_s: float) -> "Strategy":
        return cls(kind="collage", collage_timeout_s=collage_timeout_s)


@dataclass(frozen=True)
class RequestOutcome:
    source: str  # scnn | collage | replica
    correct: bool
    completion_s: float


@dataclass(frozen=True)
class BatchOutcome:
    batch_latency_s: float
    per_request: tuple[RequestOutcome, ...]


@dataclass(frozen=True)
class BatchAccounting:
    """Ledger deltas for one batch (see module docstring for semantics)."""

    slowdowns: int = 0
    collage_used: int = 0
    collage_correct: int = 0
    collage_unavailable: int = 0
    collage_late: bool = False


def schedule_no_replication(
    lats: Sequence[float], preds: Sequence[int], truths: Sequence[int]
) -> tuple[BatchOutcome, BatchAccounting]:
    _check_lengths(lats, preds, truths)
    per = tuple(
        RequestOutcome("scnn", preds[i] == truths[i], lats[i]) for i in range(len(lats))
    )
    return BatchOutcome(max(lats), per), BatchAccounting()


def schedule_timeout_replication(
    lats: Sequence[float],
    preds: Sequence[int],
    truths: Sequence[int],
    timeout_s: float,
    replica: ReplicaSource,
) -> tuple[BatchOutcome, BatchAccounting]:
    _check_lengths(lats, preds, truths)
    per = []
    slow = 0
    for i in range(len(lats)):
        if lats[i] <= timeout_s:
            per.append(RequestOutcome("scnn", preds[i] == truths[i], lats[i]))
            continue
        slow += 1
        rlat, rpred = replica(i)
        if lats[i] <= timeout_s + rlat:
            per.append(RequestOutcome("scnn", preds[i] == truths[i], lats[i]))
        else:
            per.append(RequestOutcome("replica", rpred == truths[i], timeout_s + rlat))
    outcome = BatchOutcome(max(r.completion_s for r in per), tuple(per))
    return outcome, BatchAccounting(slowdowns=slow, collage_unavailable=slow)


def schedule_collage(
    lats: Sequence[float],
    preds: Sequence[int],
    truths: Sequence[int],
    collage_done_s: float,
    cells: CellPredictions,
    collage_timeout_s: float,
    replica: ReplicaSource,
) -> tuple[BatchOutcome, BatchAccounting]:
    """Apply the collage substitution policy to one batch's arrival facts.

    ``collage_done_s`` is when the decoded collage result is available
    (encode + inference + decode). Requests finishing by then are
    untouched. Later ones take the decoded cell when the collage met its
    deadline and the cell is non-empty; the rest are replicated at
    ``min(collage_done_s, collage_timeout_s)``, completing at the earlier
    of original and replica.
    """
    _check_lengths(lats, preds, truths)
    n = len(lats)
    if len(cells) != n:
        raise ValueError(f"{n} requests but {len(cells)} decoded cells")
    on_time = collage_done_s <= collage_timeout_s
    avail = [preds[i] if lats[i] <= collage_done_s else None for i in range(n)]
    effective = cells if on_time else CellPredictions((None,) * n)
    _final, used, needs = codec.recover(avail, effective)
    trigger = min(collage_done_s, collage_timeout_s)

    per = []
    used_correct = 0
    for i in range(n):
        if avail[i] is not None:
            per.append(RequestOutcome("scnn", preds[i] == truths[i], lats[i]))
        elif i in used:
            cell = cells[i]
            assert cell is not None
            correct = cell.class_id == truths[i]
            used_correct += correct
            per.append(RequestOutcome("collage", correct, collage_done_s))
        else:
            rlat, rpred = replica(i)
            if lats[i] <= trigger + rlat:
                per.append(RequestOutcome("scnn", preds[i] == truths[i], lats[i]))
            else:
                per.append(RequestOutcome("replica", rpred == truths[i], trigger + rlat))
    outcome = BatchOutcome(max(r.completion_s for r in per), tuple(per))
    acct = BatchAccounting(
        slowdowns=sum(a is None for a in avail),
        collage_used=len(used),
        collage_correct=used_correct,
        collage_unavailable=len(needs),
        collage_late=not on_time,
    )
    return outcome, acct


def _check_lengths(lats: Sequence[float], preds: Sequence[int], truths: Sequence[int]) -> None:
    if not lats:
        raise ValueError("batch must contain at least one request")
    if not (len(lats) == len(preds) == len(truths)):
        raise ValueError(
            f"mismatched batch inputs: {len(lats)} latencies, "
            f"{len(preds)} predictions, {len(truths)} truths"
        )


@dataclass(frozen=True)
class RunConfig:
    n_workers: int
    k: int
    batches: int
    seed: int
    worker: WorkerModel
    collage: CollageModel
    costs: CostModel
    strategy: Strategy
    class_count: int
    detection_threshold: float = DEFAULT_DETECTION_THRESHOLD

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.k * self.k != self.n_workers:
            raise ValueError(
                f"k = {self.k} implies k*k = {self.k * self.k} workers, "
                f"but n_workers = {self.n_workers}"
            )
        if self.batches < 1:
            raise ValueError(f"batches must be >= 1, got {self.batches}")
        if not (0 <= self.seed < 2**64):
            raise ValueError(f"seed {self.seed} outside [0, 2^64)")
        if not (0.0 <= self.detection_threshold <= 1.0):
            raise ValueError(
                f"detection_threshold {self.detection_threshold} outside [0, 1]"
            )
        if self.worker.class_count != self.class_count:
            raise ValueError(
                f"class_count = {self.class_count} but the worker model has "
                f"{self.worker.class_count}"
            )
        if self.collage.class_count != self.class_count:
            raise ValueError(
                f"class_count = {self.class_count} but the collage model has "
                f"{self.collage.class_count}"
            )


class StreamSet:
    """Single-purpose random streams for one experiment run.

    Worker i draws from stream i; truths, the collage worker, and each
    worker's replica have reserved stream ids, so strategies sharing a
    seed see identical base draws regardless of what else they sample.
    """

    def __init__(self, seed: int, n_workers: int):
        self.truth = backend.stream(seed, backend.TRUTH_STREAM)
        self.workers = [backend.stream(seed, i) for i in range(n_workers)]
        self.collage = backend.stream(seed, backend.COLLAGE_STREAM)
        self.replicas = [
            backend.stream(seed, backend.REPLICA_STREAM_BASE + i)
            for i in range(n_workers)
        ]


class ExperimentResult(NamedTuple):
    batch_latencies_s: list[float]
    ledger: RecoveryLedger
    outcomes: tuple[BatchOutcome, ...]


def _sample_and_schedule(
    cfg: RunConfig, streams: StreamSet, layout: CollageLayout
) -> tuple[BatchOutcome, BatchAccounting]:
    n = cfg.n_workers
    truths = [int(t) for t in streams.truth.integers(0, cfg.class_count, size=n)]
    samples = [
        backend.sample_scnn(cfg.worker, truths[i], streams.workers[i]) for i in range(n)
    ]
    lats = [s[0] for s in samples]
    preds = [s[1] for s in samples]

    def replica(i: int) -> tuple[float, int]:
        return backend.sample_scnn(cfg.worker, truths[i], streams.replicas[i])

    kind = cfg.strategy.kind
    if kind == "no_replication":
        return schedule_no_replication(lats, preds, truths)
    if kind == "timeout_replication":
        assert cfg.strategy.timeout_s is not None
        return schedule_timeout_replication(
            lats, preds, truths, cfg.strategy.timeout_s, replica
        )
    clat, dets = backend.sample_collage(cfg.collage, truths, layout, streams.collage)
    collage_done = cfg.costs.encode_s(cfg.k) + clat + cfg.costs.decode_s(cfg.k)
    cells = codec.decode(dets, layout, cfg.detection_threshold)
    assert cfg.strategy.collage_timeout_s is not None
    return schedule_collage(
        lats, preds, truths, collage_done, cells, cfg.strategy.collage_timeout_s, replica
    )


def run_batch(cfg: RunConfig, streams: StreamSet) -> BatchOutcome:
    """Sample and schedule a single batch (streams advance in place)."""
    layout = codec.build_layout(cfg.k)
    outcome, _ = _sample_and_schedule(cfg, streams, layout)
    return outcome


def run_experiment(cfg: RunConfig) -> ExperimentResult:
    """Run cfg.batches closed-loop batches from a fresh seeded stream set."""
    streams = StreamSet(cfg.seed, cfg.n_workers)
    layout = codec.build_layout(cfg.k)
    ledger = RecoveryLedger()
    latencies: list[float] = []
    outcomes: list[BatchOutcome] = []
    for _ in range(cfg.batches):
        outcome, acct = _sample_and_schedule(cfg, streams, layout)
        latencies.append(outcome.batch_latency_s)
        outcomes.append(outcome)
        ledger.total_requests += cfg.n_workers
        ledger.slowdown_requests += acct.slowdowns
        ledger.collage_used += acct.collage_used
        ledger.collage_correct += acct.collage_correct
        ledger.collage_unavailable += acct.collage_unavailable
        ledger.collage_straggler_batches += acct.collage_late
    ledger.validate()
    return ExperimentResult(latencies, ledger, tuple(outcomes))


class ConfigError(ValueError):
    """A config file or override that cannot produce a RunConfig."""


# Every supported key with its default value (as config-file text).
# timeout_s and collage_timeout_s default to computed values: the worker
# latency p95, and encode + decode + the collage latency p95.
CONFIG_DEFAULTS: Mapping[str, str] = {
    "n_workers": "9",
    "k": "3",
    "batches": "2000",
    "seed": "1729",
    "class_count": "100",
    "strategy": "collage",
    "worker_mean_s": "0.15",
    "worker_p99_s": "0.70",
    "worker_top1": "0.922",
    "worker_p_straggler": "0",
    "worker_straggler_scale": "4",
    "collage_mean_s": "0.14",
    "collage_p99_s": "0.65",
    "collage_p_straggler": "0",
    "collage_straggler_scale": "4",
    "p_detect": "0.95",
    "cell_accuracy": "0.92",
    "box_jitter": "0.25",
    "detection_threshold": "0.15",
}

# Keys that are legal but have no static default.
_OPTIONAL_KEYS = (
    "encode_s",
    "decode_s",
    "timeout_s",
    "collage_timeout_s",
    "worker_latency_file",
    "collage_latency_file",
)


def parse_config_text(text: str) -> dict[str, str]:
    """Parse `key = value` lines; '#' comments; duplicate keys rejected."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {body!r}")
        key, value = body.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ConfigError(f"line {lineno}: empty key or value in {body!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _get_int(merged: Mapping[str, str], key: str) -> int:
    try:
        return int(merged[key])
    except ValueError as exc:
        raise ConfigError(f"config key {key}: not an integer: {merged[key]!r}") from exc


def _get_float(merged: Mapping[str, str], key: str) -> float:
    try:
        return float(merged[key])
    except ValueError as exc:
        raise ConfigError(f"config key {key}: not a number: {merged[key]!r}") from exc


def _latency_from_config(
    merged: Mapping[str, str], prefix: str, file_key: str
) -> LatencyModel:
    if file_key in merged:
        try:
            with open(merged[file_key], "r", encoding="ascii") as fh:
                samples = backend.load_latency_samples(fh)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"config key {file_key}: {exc}") from exc
        return LatencyModel.empirical(samples)
    mean_s = _get_float(merged, f"{prefix}_mean_s")
    p99_s = _get_float(merged, f"{prefix}_p99_s")
    try:
        mu, sigma = backend.calibrate_lognormal(mean_s, p99_s)
    except ValueError as exc:
        raise ConfigError(
            f"config keys {prefix}_mean_s/{prefix}_p99_s: {exc}"
        ) from exc
    p_straggler = _get_float(merged, f"{prefix}_p_straggler")
    if p_straggler > 0:
        return LatencyModel.straggler_mixture(
            mu, sigma, p_straggler, _get_float(merged, f"{prefix}_straggler_scale")
        )
    return LatencyModel.lognormal(mu, sigma)


def build_config(overrides: Mapping[str, str]) -> RunConfig:
    """Materialize a RunConfig from key-value overrides on the defaults.

    Raises ConfigError naming the offending key for unknown keys, values
    that do not parse, and invariant violations.
    """
    known = set(CONFIG_DEFAULTS) | set(_OPTIONAL_KEYS)
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    merged = dict(CONFIG_DEFAULTS)
    merged.update(overrides)

    k = _get_int(merged, "k")
    class_count = _get_int(merged, "class_count")
    try:
        worker = WorkerModel(
            latency=_latency_from_config(merged, "worker", "worker_latency_file"),
            top1_accuracy=_get_float(merged, "worker_top1"),
            class_count=class_count,
        )
        collage = CollageModel(
            latency=_latency_from_config(merged, "collage", "collage_latency_file"),
            p_detect=_get_float(merged, "p_detect"),
            cell_accuracy=_get_float(merged, "cell_accuracy"),
            box_jitter=_get_float(merged, "box_jitter"),
            class_count=class_count,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    if ("encode_s" in merged) != ("decode_s" in merged):
        missing = "decode_s" if "encode_s" in merged else "encode_s"
        raise ConfigError(f"config key {missing}: required when the other cost is set")
    if "encode_s" in merged:
        costs = CostModel.constant(
            _get_float(merged, "encode_s"), _get_float(merged, "decode_s")
        )
    else:
        costs = CostModel()

    kind = merged["strategy"]
    if kind not in STRATEGY_KINDS:
        raise ConfigError(
            f"config key strategy: {kind!r} is not one of {', '.join(STRATEGY_KINDS)}"
        )
    try:
        if kind == "timeout_replication":
            timeout_s = (
                _get_float(merged, "timeout_s")
                if "timeout_s" in merged
                else worker.latency.quantile(0.95)
            )
            strategy = Strategy.timeout_replication(timeout_s)
        elif kind == "collage":
            collage_timeout_s = (
                _get_float(merged, "collage_timeout_s")
                if "collage_timeout_s" in merged
                else costs.encode_s(k) + costs.decode_s(k) + collage.latency.quantile(0.95)
            )
            strategy = Strategy.collage(collage_timeout_s)
        else:
            strategy = Strategy.no_replication()

        return RunConfig(
            n_workers=_get_int(merged, "n_workers"),
            k=k,
            batches=_get_int(merged, "batches"),
            seed=_get_int(merged, "seed"),
            worker=worker,
            collage=collage,
            costs=costs,
            strategy=strategy,
            class_count=class_count,
            detection_threshold=_get_float(merged, "detection_threshold"),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def default_config() -> RunConfig:
    return build_config({})
