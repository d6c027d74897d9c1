"""Pluggable inference sources for the simulator and the CLI.

Real CNN inference is out of scope; this module provides two stand-ins:

* a statistical oracle (``sample_scnn`` / ``sample_collage``) that draws
  latencies from a calibrated heavy-tailed model and predictions with
  configurable accuracy, and
* loaders for recorded material (empirical latency lists, and trace
  files holding a detection list plus its latency).

Latency is modeled as lognormal because it is the minimal two-parameter
positive family that can match both of the calibration targets (a mean
and a 99th percentile); an optional straggler-mixture knob fattens the
tail further, and an empirical mode replays user traces unchanged.

Randomness policy: every sampler takes a numpy ``Generator`` backed by
counter-based Philox streams keyed as ``(seed, stream_id)``. Streams are
single-purpose (one per worker, one for truths, one for the collage
worker, one per replica) so enabling a feature that samples extra
randomness, such as replication, never perturbs draws made on the other
streams. See the stream-id constants below.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from statistics import NormalDist
from typing import Iterable, Sequence

import numpy as np

from .codec import DEFAULT_DETECTION_THRESHOLD, CollageLayout, Detection, parse_detection_line
from .geometry import Box

__all__ = [
    "Z99",
    "LatencyModel",
    "WorkerModel",
    "CollageModel",
    "CostModel",
    "calibrate_lognormal",
    "lognormal_stats",
    "sample_latency",
    "sample_scnn",
    "sample_collage",
    "TRUTH_STREAM",
    "COLLAGE_STREAM",
    "REPLICA_STREAM_BASE",
    "stream",
    "load_latency_samples",
    "load_trace",
]

# Standard-normal 99% quantile, pinned so calibration is reproducible
# independent of any library's inverse-CDF implementation.
Z99 = 2.3263

_LATENCY_KINDS = ("lognormal", "lognormal_with_straggler_mixture", "empirical")

# Reserved stream ids, far above any plausible worker count. Worker i
# samples from stream i; its replica (if any) from REPLICA_STREAM_BASE+i.
TRUTH_STREAM = 1 << 40
COLLAGE_STREAM = (1 << 40) + 1
REPLICA_STREAM_BASE = 1 << 41


def stream(seed: int, stream_id: int) -> np.random.Generator:
    """A deterministic random stream, independent per (seed, stream_id)."""
    if not (0 <= seed < 2**64):
        raise ValueError(f"seed {seed} outside [0, 2^64)")
    if not (0 <= stream_id < 2**64):
        raise ValueError(f"stream_id {stream_id} outside [0, 2^64)")
    return np.random.Generator(np.random.Philox(key=[seed, stream_id]))


@dataclass(frozen=True)
class LatencyModel:
    """Positive latency distribution: lognormal, mixture, or empirical.

    * ``lognormal``: exp(Normal(mu, sigma)).
    * ``lognormal_with_straggler_mixture``: lognormal, then with
      probability ``p_straggler`` the sample is multiplied by
      ``straggler_scale`` (> 1), fattening the tail.
    * ``empirical``: uniform draw from recorded ``samples``.
    """

    kind: str
    mu: float = 0.0
    sigma: float = 0.0
    p_straggler: float = 0.0
    straggler_scale: float = 1.0
    samples: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in _LATENCY_KINDS:
            raise ValueError(f"unknown latency kind {self.kind!r}")
        if self.kind == "empirical":
            if not self.samples:
                raise ValueError("empirical latency model needs at least one sample")
            if any(s <= 0 for s in self.samples):
                raise ValueError("empirical latency samples must be positive")
            return
        if not (math.isfinite(self.mu) and math.isfinite(self.sigma)):
            raise ValueError(f"non-finite lognormal parameters mu={self.mu}, sigma={self.sigma}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")
        if not (0.0 <= self.p_straggler <= 1.0):
            raise ValueError(f"p_straggler {self.p_straggler} outside [0, 1]")
        if self.kind == "lognormal_with_straggler_mixture" and self.straggler_scale <= 1.0:
            raise ValueError(
                f"straggler_scale must exceed 1, got {self.straggler_scale}"
            )

    @classmethod
    def lognormal(cls, mu: float, sigma: float) -> "LatencyModel":
        return cls(kind="lognormal", mu=mu, sigma=sigma)

    @classmethod
    def calibrated(cls, mean_s: float, p99_s: float) -> "LatencyModel":
        """Lognormal fitted so the analytic mean and p99 hit the targets."""
        mu, sigma = calibrate_lognormal(mean_s, p99_s)
        return cls.lognormal(mu, sigma)

    @classmethod
    def straggler_mixture(
        cls, mu: float, sigma: float, p_straggler: float, straggler_scale: float
    ) -> "LatencyModel":
        return cls(
            kind="lognormal_with_straggler_mixture",
            mu=mu,
            sigma=sigma,
            p_straggler=p_straggler,
            straggler_scale=straggler_scale,
        )

    @classmethod
    def empirical(cls, samples: Sequence[float]) -> "LatencyModel":
        return cls(kind="empirical", samples=tuple(float(s) for s in samples))

    def mean(self) -> float:
        """Closed-form (or exact empirical) mean in seconds."""
        if self.kind == "empirical":
            return math.fsum(self.samples) / len(self.samples)
        base = math.exp(self.mu + self.sigma**2 / 2)
        if self.kind == "lognormal_with_straggler_mixture":
            return base * (1.0 + self.p_straggler * (self.straggler_scale - 1.0))
        return base

    def quantile(self, p: float) -> float:
        """The p-quantile (p in (0, 1)) of the latency distribution.

        Lognormal quantiles are closed-form; the mixture is inverted
        numerically from its CDF; empirical uses the nearest-rank sample.
        """
        if not (0.0 < p < 1.0):
            raise ValueError(f"quantile p={p} outside (0, 1)")
        if self.kind == "empirical":
            ordered = sorted(self.samples)
            rank = math.ceil(Fraction(str(p)) * len(ordered))
            return ordered[max(rank, 1) - 1]
        z = NormalDist().inv_cdf(p)
        base = math.exp(self.mu + z * self.sigma)
        if self.kind == "lognormal":
            return base
        # Mixture CDF is a p_straggler-weighted blend of the base CDF and
        # the scaled one; it is continuous and strictly increasing, and the
        # target quantile lies between the base quantile and its scaled
        # copy, so bisection converges.
        lo, hi = base, base * self.straggler_scale
        for _ in range(200):
            mid = (lo + hi) / 2
            if self._mixture_cdf(mid) < p:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-15 * hi:
                break
        return (lo + hi) / 2

    def _mixture_cdf(self, x: float) -> float:
        nd = NormalDist()
        base = nd.cdf((math.log(x) - self.mu) / self.sigma)
        slow = nd.cdf((math.log(x / self.straggler_scale) - self.mu) / self.sigma)
        return (1.0 - self.p_straggler) * base + self.p_straggler * slow


def lognormal_stats(mu: float, sigma: float) -> tuple[float, float]:
    """Closed-form (mean, p99) of a lognormal; the pair calibration inverts."""
    return math.exp(mu + sigma**2 / 2), math.exp(mu + Z99 * sigma)


def calibrate_lognormal(mean_s: float, p99_s: float) -> tuple[float, float]:
    """Fit (mu, sigma) so the lognormal mean is mean_s and its p99 is p99_s.

    Eliminating mu through the mean constraint leaves
    ``Z99*sigma - sigma**2/2 = log(p99_s / mean_s)`` whose left side
    increases on [0, Z99]; bisection there finds the (smaller) root. The
    target is reachable only while ``log(p99_s/mean_s) <= Z99**2/2``,
    i.e. p99 up to about 15x the mean, ample for measured latency data.
    """
    if not (0.0 < mean_s < p99_s):
        raise ValueError(f"need 0 < mean_s < p99_s, got mean_s={mean_s}, p99_s={p99_s}")
    target = math.log(p99_s / mean_s)
    if target > Z99**2 / 2:
        raise ValueError(
            f"p99_s={p99_s} is unreachably far above mean_s={mean_s} "
            f"(log ratio {target:.4f} exceeds {Z99**2 / 2:.4f})"
        )
    lo, hi = 0.0, Z99
    for _ in range(200):
        mid = (lo + hi) / 2
        if Z99 * mid - mid**2 / 2 < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-16 * Z99:
            break
    sigma = (lo + hi) / 2
    mu = math.log(mean_s) - sigma**2 / 2
    got_mean, got_p99 = lognormal_stats(mu, sigma)
    if abs(got_mean - mean_s) > 1e-9 * mean_s or abs(got_p99 - p99_s) > 1e-9 * p99_s:
        raise ArithmeticError(
            f"calibration drifted: ({got_mean}, {got_p99}) vs ({mean_s}, {p99_s})"
        )
    return mu, sigma


def sample_latency(m: LatencyModel, rng: np.random.Generator) -> float:
    """One positive latency draw.

    Draw order (fixed for reproducibility): lognormal kinds draw one
    standard normal, the mixture kind then draws one uniform for the
    straggler gate; the empirical kind draws one index.
    """
    if m.kind == "empirical":
        if not m.samples:
            raise ValueError("empirical latency model has no samples")
        return m.samples[int(rng.integers(0, len(m.samples)))]
    z = rng.standard_normal()
    x = math.exp(m.mu + m.sigma * z)
    if m.kind == "lognormal_with_straggler_mixture":
        if rng.random() < m.p_straggler:
            x *= m.straggler_scale
    return x


@dataclass(frozen=True)
class WorkerModel:
    """Oracle stand-in for one single-image classifier worker."""

    latency: LatencyModel
    top1_accuracy: float
    class_count: int

    def __post_init__(self) -> None:
        if not (0.0 <= self.top1_accuracy <= 1.0):
            raise ValueError(f"top1_accuracy {self.top1_accuracy} outside [0, 1]")
        if self.class_count < 2:
            raise ValueError(f"class_count must be >= 2, got {self.class_count}")


def sample_scnn(
    w: WorkerModel, truth: int, rng: np.random.Generator
) -> tuple[float, int]:
    """One worker inference: (latency_s, predicted class).

    Draw order: latency first, then the correctness gate, then (only on
    a miss) one index uniform over the wrong classes.
    """
    if not (0 <= truth < w.class_count):
        raise ValueError(f"truth {truth} outside [0, {w.class_count})")
    latency = sample_latency(w.latency, rng)
    if rng.random() < w.top1_accuracy:
        return latency, truth
    wrong = int(rng.integers(0, w.class_count - 1))
    return latency, wrong + (wrong >= truth)


@dataclass(frozen=True)
class CollageModel:
    """Oracle stand-in for the grid-collage detector.

    Prediction quality decomposes into ``p_detect`` (a cell yields any
    surviving detection at all) times ``cell_accuracy`` (a detected
    cell's class is right); their product is the per-cell top-1
    accuracy. ``box_jitter`` (< 0.5, as a fraction of the cell size)
    offsets predicted box centers; below 0.5 the jittered box always
    stays argmax-assigned to its own cell.
    """

    latency: LatencyModel
    p_detect: float
    cell_accuracy: float
    box_jitter: float
    class_count: int

    def __post_init__(self) -> None:
        for name in ("p_detect", "cell_accuracy"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} {v} outside [0, 1]")
        if not (0.0 <= self.box_jitter < 0.5):
            raise ValueError(f"box_jitter {self.box_jitter} outside [0, 0.5)")
        if self.class_count < 2:
            raise ValueError(f"class_count must be >= 2, got {self.class_count}")


def sample_collage(
    m: CollageModel,
    truths: Sequence[int],
    layout: CollageLayout,
    rng: np.random.Generator,
) -> tuple[float, list[Detection]]:
    """One collage inference: (latency_s, detections).

    Draw order: latency first, then per cell in index order: the
    detection gate; on detection, the two jitter offsets, the confidence,
    the correctness gate, and (only on a miss) the wrong-class index.
    Confidences are uniform in [detection threshold, 1) so every emitted
    detection survives decoding and tie paths stay exercised.
    """
    if len(truths) != layout.n:
        raise ValueError(f"need {layout.n} truths for k={layout.k}, got {len(truths)}")
    latency = sample_latency(m.latency, rng)
    floor = DEFAULT_DETECTION_THRESHOLD
    dets: list[Detection] = []
    for i, cell in enumerate(layout.cells):
        if rng.random() >= m.p_detect:
            continue
        dx = rng.uniform(-m.box_jitter, m.box_jitter) * cell.w
        dy = rng.uniform(-m.box_jitter, m.box_jitter) * cell.h
        confidence = floor + (1.0 - floor) * rng.random()
        truth = truths[i]
        if not (0 <= truth < m.class_count):
            raise ValueError(f"truth {truth} outside [0, {m.class_count})")
        if rng.random() < m.cell_accuracy:
            class_id = truth
        else:
            wrong = int(rng.integers(0, m.class_count - 1))
            class_id = wrong + (wrong >= truth)
        box = Box(cell.cx + dx, cell.cy + dy, cell.w, cell.h)
        dets.append(Detection(box=box, class_id=class_id, confidence=confidence))
    return latency, dets


# Measured per-grid-size overheads (seconds) for the encode and decode
# steps at k = 3, 4, 5.
_ENCODE_TABLE = ((3, 0.01), (4, 0.013), (5, 0.017))
_DECODE_TABLE = ((3, 0.01), (4, 0.028), (5, 0.047))


@dataclass(frozen=True)
class CostModel:
    """Fixed encode/decode overheads of the collage path, by grid size.

    Tables map k to seconds; lookups between table entries interpolate
    linearly and lookups outside clamp to the nearest endpoint (linear
    extrapolation below k=3 would go negative for the decode costs).
    """

    encode_table: tuple[tuple[int, float], ...] = _ENCODE_TABLE
    decode_table: tuple[tuple[int, float], ...] = _DECODE_TABLE

    def __post_init__(self) -> None:
        for table in (self.encode_table, self.decode_table):
            if not table:
                raise ValueError("cost table must not be empty")
            ks = [k for k, _ in table]
            if ks != sorted(set(ks)):
                raise ValueError(f"cost table keys must be sorted and unique: {ks}")
            if any(v < 0 for _, v in table):
                raise ValueError("cost table values must be nonnegative")

    @classmethod
    def constant(cls, encode_s: float, decode_s: float) -> "CostModel":
        return cls(encode_table=((1, encode_s),), decode_table=((1, decode_s),))

    def encode_s(self, k: int) -> float:
        return _interpolate(self.encode_table, k)

    def decode_s(self, k: int) -> float:
        return _interpolate(self.decode_table, k)


def _interpolate(table: tuple[tuple[int, float], ...], k: int) -> float:
    if k <= table[0][0]:
        return table[0][1]
    if k >= table[-1][0]:
        return table[-1][1]
    for (k0, v0), (k1, v1) in zip(table, table[1:]):
        if k == k1:
            return v1
        if k0 <= k < k1:
            return v0 + (v1 - v0) * (k - k0) / (k1 - k0)
    raise AssertionError("unreachable: table is sorted")


def load_latency_samples(lines: Iterable[str]) -> list[float]:
    """Parse an empirical latency file: one positive seconds value per line.

    '#' comments and blank lines are ignored; bad lines are reported with
    their line number.
    """
    out: list[float] = []
    for lineno, line in enumerate(lines, start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        try:
            value = float(body)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: not a number: {body!r}") from exc
        if value <= 0 or not math.isfinite(value):
            raise ValueError(f"line {lineno}: latency must be positive, got {body}")
        out.append(value)
    return out


def load_trace(lines: Iterable[str]) -> tuple[float, list[Detection]]:
    """Parse a recorded collage response: detections plus one latency line.

    The file holds detection records in the standard list format, plus
    exactly one sidecar line ``latency <seconds>``.
    """
    latency: float | None = None
    dets: list[Detection] = []
    for lineno, line in enumerate(lines, start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        fields = body.split()
        if fields[0] == "latency":
            if latency is not None:
                raise ValueError(f"line {lineno}: duplicate latency line")
            if len(fields) != 2:
                raise ValueError(f"line {lineno}: latency line needs one value")
            latency = float(fields[1])
            if latency <= 0:
                raise ValueError(f"line {lineno}: latency must be positive")
            continue
        det = parse_detection_line(body, lineno)
        if det is not None:
            dets.append(det)
    if latency is None:
        raise ValueError("trace has no `latency <seconds>` line")
    return latency, dets
