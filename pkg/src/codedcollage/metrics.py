"""Summary statistics for latency samples and recovery accounting.

Percentiles use the nearest-rank definition on the sorted sample: the
q-th percentile of n values is the element at 1-based index
``ceil(q / 100 * n)``. This convention is used everywhere in the package;
it always returns an observed sample value, unlike interpolating
definitions.

``RecoveryLedger`` lives here rather than in the engine so that the
accuracy arithmetic has no dependency on the simulator; the engine
re-exports it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

__all__ = [
    "percentile",
    "mean",
    "stddev",
    "LatencySummary",
    "summarize",
    "RecoveryLedger",
    "recovery_accuracy",
    "redundancy_overhead",
]


def percentile(samples: Sequence[float], q: float) -> float:
    """Nearest-rank percentile: sorted 1-based index ``ceil(q/100 * n)``.

    ``q`` must lie in (0, 100]. The rank is computed with exact rational
    arithmetic so that e.g. ``q=70, n=10`` yields rank 7, never rank 8 via
    a floating-point ``0.7 * 10 = 7.000000000000001``.
    """
    if not samples:
        raise ValueError("percentile of empty sample")
    if not (0.0 < q <= 100.0):
        raise ValueError(f"percentile q={q} outside (0, 100]")
    ordered = sorted(samples)
    rank = math.ceil(Fraction(str(q)) / 100 * len(ordered))
    return ordered[rank - 1]


def mean(samples: Sequence[float]) -> float:
    if not samples:
        raise ValueError("mean of empty sample")
    return math.fsum(samples) / len(samples)


def stddev(samples: Sequence[float]) -> float:
    """Population standard deviation (divide by n, not n - 1)."""
    if not samples:
        raise ValueError("stddev of empty sample")
    m = mean(samples)
    return math.sqrt(math.fsum((x - m) ** 2 for x in samples) / len(samples))


@dataclass(frozen=True)
class LatencySummary:
    count: int
    mean_s: float
    stddev_s: float
    p50_s: float
    p99_s: float
    min_s: float
    max_s: float


def summarize(samples: Sequence[float]) -> LatencySummary:
    """Mean, population stddev, nearest-rank p50/p99, and range."""
    if not samples:
        raise ValueError("summarize of empty sample")
    return LatencySummary(
        count=len(samples),
        mean_s=mean(samples),
        stddev_s=stddev(samples),
        p50_s=percentile(samples, 50),
        p99_s=percentile(samples, 99),
        min_s=min(samples),
        max_s=max(samples),
    )


@dataclass
class RecoveryLedger:
    """Counters for how straggler requests were resolved.

    A slowdown request is one whose worker missed the strategy's deadline.
    Each slowdown is resolved either from the collage decode
    (``collage_used``, of which ``collage_correct`` carried the right
    class) or not (``collage_unavailable``: the cell decoded empty or the
    collage itself was too slow, so the request was replicated).
    ``collage_straggler_batches`` counts batches where the collage worker
    missed its own deadline and could not help at all.
    """

    total_requests: int = 0
    slowdown_requests: int = 0
    collage_unavailable: int = 0
    collage_used: int = 0
    collage_correct: int = 0
    collage_straggler_batches: int = 0

    def validate(self) -> None:
        counters = (
            self.total_requests,
            self.slowdown_requests,
            self.collage_unavailable,
            self.collage_used,
            self.collage_correct,
            self.collage_straggler_batches,
        )
        if any(c < 0 for c in counters):
            raise ValueError(f"negative ledger counter: {self}")
        if self.collage_used + self.collage_unavailable != self.slowdown_requests:
            raise ValueError(
                "ledger imbalance: collage_used + collage_unavailable = "
                f"{self.collage_used + self.collage_unavailable} "
                f"!= slowdown_requests = {self.slowdown_requests}"
            )
        if self.collage_correct > self.collage_used:
            raise ValueError(
                f"collage_correct = {self.collage_correct} exceeds "
                f"collage_used = {self.collage_used}"
            )
        if self.slowdown_requests > self.total_requests:
            raise ValueError("more slowdowns than requests")

    def merge(self, other: "RecoveryLedger") -> "RecoveryLedger":
        return RecoveryLedger(
            total_requests=self.total_requests + other.total_requests,
            slowdown_requests=self.slowdown_requests + other.slowdown_requests,
            collage_unavailable=self.collage_unavailable + other.collage_unavailable,
            collage_used=self.collage_used + other.collage_used,
            collage_correct=self.collage_correct + other.collage_correct,
            collage_straggler_batches=self.collage_straggler_batches
            + other.collage_straggler_batches,
        )


def recovery_accuracy(ledger: RecoveryLedger) -> float:
    """Fraction of used collage predictions that were correct.

    Undefined (raises) when nothing was recovered from the collage;
    callers that want a printable value must handle that case explicitly
    rather than reading 0.
    """
    if ledger.collage_used == 0:
        raise ValueError("recovery_accuracy undefined: collage_used is 0")
    return ledger.collage_correct / ledger.collage_used


def redundancy_overhead(n: int) -> float:
    """Extra compute of the one collage worker relative to n base workers."""
    if n <= 0:
        raise ValueError(f"worker count must be positive, got {n}")
    return 1.0 / n
