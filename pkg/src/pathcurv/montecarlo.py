"""Monte Carlo plumbing: counter-based streams, compensated accumulation, verdicts.

Streams are numpy Philox generators keyed by (master seed, tag, block start,
stage).  Philox is counter based, so any block of paths can be regenerated in
isolation; experiments consume whole fixed-size blocks and merge results in
block order, which makes every estimate bit-identical for any worker count.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from hashlib import blake2b

import numpy as np

# Fixed substream granularity. Worker scheduling happens at block level only.
BLOCK = 4096


class DesignMismatch(ValueError):
    """Raised when a paired comparison is requested without aligned samples."""


def _tag_word(tag: str) -> int:
    return int.from_bytes(blake2b(tag.encode("utf-8"), digest_size=8).digest(), "big")


@dataclass(frozen=True)
class StreamKey:
    """Address of one substream: master seed, free-form tag, block start, stage."""

    seed: int
    tag: str
    path_index: int = 0
    stage: int = 0


def derive_stream(key: StreamKey) -> np.random.Generator:
    """Independent generator for one (tag, path block, stage) triple.

    The same key always returns a generator producing the identical draw
    sequence; distinct keys give statistically independent streams.
    """
    ss = np.random.SeedSequence(
        entropy=key.seed,
        spawn_key=(_tag_word(key.tag), key.path_index, key.stage),
    )
    return np.random.Generator(np.random.Philox(ss))


def block_ranges(n_total: int) -> list[tuple[int, int]]:
    """Fixed decomposition of [0, n_total) into scheduling blocks."""
    return [(s, min(s + BLOCK, n_total)) for s in range(0, n_total, BLOCK)]


def worker_count(default: int = 1) -> int:
    raw = os.environ.get("PATHCURV_WORKERS", "")
    if not raw.strip():
        return default
    return max(1, int(raw))


def run_blocks(n_total, fn, workers=1):
    """Run fn(start, stop) over every block, returning results in block order.

    Results never depend on the worker count: blocks are disjoint and the
    collection order is fixed.
    """
    ranges = block_ranges(n_total)
    if workers <= 1 or len(ranges) <= 1:
        return [fn(s, e) for s, e in ranges]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futs = [pool.submit(fn, s, e) for s, e in ranges]
        return [f.result() for f in futs]


@dataclass(frozen=True)
class MonteCarloEstimate:
    mean: float
    se: float
    count: int
    seed: int = 0
    tag: str = ""

    @property
    def variance(self) -> float:
        return self.se * self.se * self.count


class RunningMoments:
    """Single-pass mean/variance with exact compensated batch sums.

    Batch totals use math.fsum (exactly rounded), and shards merge through
    the usual pairwise update, so the result is deterministic given the
    order in which batches arrive.
    """

    def __init__(self):
        self.count = 0
        self._mean = 0.0
        self._m2 = 0.0

    def add(self, values) -> None:
        xs = np.asarray(values, dtype=float).ravel()
        if xs.size == 0:
            return
        n = xs.size
        s = math.fsum(xs.tolist())
        bm = s / n
        bm2 = math.fsum(((xs - bm) ** 2).tolist())
        self._merge_parts(n, bm, bm2)

    def merge(self, other: "RunningMoments") -> None:
        if other.count:
            self._merge_parts(other.count, other._mean, other._m2)

    def _merge_parts(self, n, bm, bm2):
        if self.count == 0:
            self.count, self._mean, self._m2 = n, bm, bm2
            return
        total = self.count + n
        delta = bm - self._mean
        self._mean += delta * n / total
        self._m2 += bm2 + delta * delta * self.count * n / total
        self.count = total

    @property
    def mean(self) -> float:
        return self._mean

    @property
    def variance(self) -> float:
        if self.count < 2:
            return 0.0
        return self._m2 / (self.count - 1)

    @property
    def se(self) -> float:
        if self.count < 2:
            return 0.0
        return math.sqrt(self.variance / self.count)

    def estimate(self, seed: int = 0, tag: str = "") -> MonteCarloEstimate:
        return MonteCarloEstimate(self.mean, self.se, self.count, seed, tag)


def accumulate(values, seed: int = 0, tag: str = "") -> MonteCarloEstimate:
    acc = RunningMoments()
    acc.add(values)
    return acc.estimate(seed, tag)


@dataclass(frozen=True)
class Comparison:
    margin: float
    se: float
    z: float
    verdict: str  # "pass" | "fail" | "inconclusive"
    equality: bool


def _verdict(margin, se, z_crit, equality_predicted):
    z = margin / se if se > 0 else math.copysign(math.inf, margin) if margin else 0.0
    if margin < -z_crit * se:
        return Comparison(margin, se, z, "fail", equality_predicted)
    if not equality_predicted and margin <= z_crit * se:
        return Comparison(margin, se, z, "inconclusive", False)
    return Comparison(margin, se, z, "pass", equality_predicted)


def compare_leq(lhs, rhs, *, paired=False, diffs=None, z_crit=3.0,
                equality_predicted=False) -> Comparison:
    """Test lhs <= rhs. margin = rhs - lhs; fail when margin < -z_crit * se.

    With paired=True the per-sample differences (rhs_i - lhs_i) must be
    supplied so common random numbers cancel in the standard error.
    """
    if paired and diffs is None:
        raise DesignMismatch("paired comparison requires per-sample differences")
    lm, lse = _mean_se(lhs)
    rm, rse = _mean_se(rhs)
    margin = rm - lm
    if diffs is not None:
        ds = np.asarray(diffs, dtype=float).ravel()
        se = float(ds.std(ddof=1) / math.sqrt(ds.size)) if ds.size > 1 else 0.0
    else:
        se = math.sqrt(lse * lse + rse * rse)
    return _verdict(margin, se, z_crit, equality_predicted)


def compare_eq(a, b, *, tol=0.0, z_crit=3.0) -> Comparison:
    """Two-sided equality test: fail when |a - b| exceeds tol + z_crit * se."""
    am, ase = _mean_se(a)
    bm, bse = _mean_se(b)
    se = math.sqrt(ase * ase + bse * bse)
    diff = abs(am - bm)
    margin = tol + z_crit * se - diff
    z = diff / se if se > 0 else (math.inf if diff > tol else 0.0)
    verdict = "pass" if diff <= tol + z_crit * se else "fail"
    return Comparison(margin, se, z, verdict, True)


def _mean_se(x):
    if isinstance(x, MonteCarloEstimate):
        return x.mean, x.se
    if isinstance(x, (int, float)):
        return float(x), 0.0
    xs = np.asarray(x, dtype=float).ravel()
    if xs.size == 0:
        return 0.0, 0.0
    se = float(xs.std(ddof=1) / math.sqrt(xs.size)) if xs.size > 1 else 0.0
    return float(xs.mean()), se


def vector_mean_norm(vectors):
    """Norm of the mean vector with a delta-method standard error.

    Returns (norm, se, projections) where projections are the per-sample
    components along the mean direction; they let callers form paired
    covariances against other per-sample statistics.
    """
    vs = np.asarray(vectors, dtype=float)
    if vs.ndim == 1:
        vs = vs[:, None]
    m = vs.mean(axis=0)
    norm = float(np.linalg.norm(m))
    n = vs.shape[0]
    if norm == 0.0:
        # Direction undefined; bound the error by the largest component SE.
        se = float(np.max(vs.std(axis=0, ddof=1)) / math.sqrt(n)) if n > 1 else 0.0
        return 0.0, se, np.zeros(n)
    u = m / norm
    proj = vs @ u
    se = float(proj.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return norm, se, proj


def batched_statistic(fn, arrays, n_batches=32):
    """Nonlinear statistic with a batch-means standard error.

    fn takes the full arrays and returns a scalar; the SE comes from the
    spread of fn over contiguous equal batches (deterministic split).
    """
    arrays = [np.asarray(a) for a in arrays]
    n = arrays[0].shape[0]
    value = float(fn(*arrays))
    k = min(n_batches, n)
    if k < 2:
        return value, 0.0
    edges = np.linspace(0, n, k + 1).astype(int)
    parts = []
    for i in range(k):
        sl = slice(edges[i], edges[i + 1])
        if edges[i + 1] > edges[i]:
            parts.append(fn(*[a[sl] for a in arrays]))
    parts = np.asarray(parts, dtype=float)
    se = float(parts.std(ddof=1) / math.sqrt(parts.size))
    return value, se
