"""Compute-latency model fitting and gradient-exchange timestamp extraction.

A device is profiled by binary searching the largest batch that fits in
memory, measuring forward/backward latency at a handful of probe batches,
and fitting one linear segment between each pair of adjacent probes.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple, Protocol, Sequence

import numpy as np

from .core import (
    DomainError,
    ModelProfile,
    OutOfMemoryError,
    PiecewiseLatencyModel,
    Segment,
    write_text_atomic,
)

logger = logging.getLogger(__name__)

DEFAULT_PROBE_BUDGET = 4
DEFAULT_THRESHOLD_FRACTION = 0.9


class DoesNotFitError(DomainError):
    """The model does not fit on the device even at batch 1."""


class DegenerateFitError(DomainError):
    pass


class MalformedTraceError(DomainError):
    pass


@dataclass(frozen=True)
class LatencySample:
    batch: int
    fw_latency: float
    bw_latency: float
    replicate_index: int = 0

    def __post_init__(self):
        if self.batch < 1:
            raise DomainError("batch must be >= 1")
        if self.fw_latency <= 0 or self.bw_latency <= 0:
            raise DomainError("latencies must be > 0")

    def latency(self, pass_: str) -> float:
        if pass_ == "fw":
            return self.fw_latency
        if pass_ == "bw":
            return self.bw_latency
        if pass_ == "total":
            return self.fw_latency + self.bw_latency
        raise DomainError(f"unknown pass {pass_!r}")


@dataclass(frozen=True)
class BackwardTrace:
    layer_completion_times: tuple[float, ...]
    total_bw_time: float


class DeviationEstimate(NamedTuple):
    relative: float
    insufficient_replicates: bool


def find_max_batch(probe: Callable[[int], bool], upper_bound: int) -> int:
    """Largest ``B <= upper_bound`` with ``probe(B)`` true, for a monotone probe."""
    if upper_bound < 1:
        raise DomainError("upper_bound must be >= 1")
    if not probe(1):
        raise DoesNotFitError("model does not fit on device at batch 1")
    lo, hi = 1, upper_bound  # probe(lo) holds
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if probe(mid):
            lo = mid
        else:
            hi = mid - 1
    return lo


def probe_schedule(b_max: int, budget: int | None = DEFAULT_PROBE_BUDGET) -> list[int]:
    """Batch sizes to measure on a device whose memory limit is ``b_max``.

    Powers of two up to ``b_max`` (plus ``b_max`` itself). With a budget of
    4 the schedule is down-selected to ``{1, b_max/4, b_max/2, b_max}``.
    """
    if b_max < 1:
        raise DomainError("b_max must be >= 1")
    if budget is None:
        out = [1 << k for k in range(int(math.log2(b_max)) + 1)]
        out.append(b_max)
    elif budget >= 4:
        out = [1, b_max // 4, b_max // 2, b_max]
    else:
        out = [1, b_max][: max(budget, 1)]
    return sorted({b for b in out if b >= 1})


def _means_by_batch(samples: Iterable[LatencySample], pass_: str) -> tuple[np.ndarray, np.ndarray]:
    groups: dict[int, list[float]] = defaultdict(list)
    for s in samples:
        groups[s.batch].append(s.latency(pass_))
    batches = np.array(sorted(groups), dtype=float)
    means = np.array([np.mean(groups[int(b)]) for b in batches])
    return batches, means


def fit_latency_model(
    samples: Sequence[LatencySample], pass_: str = "fw", b_max: int | None = None
) -> PiecewiseLatencyModel:
    """Fit a continuous piecewise linear latency model anchored at the probed batches.

    Each segment is the least-squares line through the replicates at its two
    endpoint batches, i.e. the line through the two per-batch means. Means
    are made non-decreasing first so every slope is >= 0. Adjacent segments
    with equal slope are merged.
    """
    batches, means = _means_by_batch(samples, pass_)
    if len(batches) < 2:
        raise DegenerateFitError("need samples at >= 2 distinct batch sizes")
    if b_max is None:
        b_max = int(batches[-1])
    if b_max < batches[-1]:
        raise DomainError(f"b_max {b_max} is below the largest probed batch {int(batches[-1])}")

    means = np.maximum.accumulate(means)
    segs: list[Segment] = []
    for i in range(len(batches) - 1):
        b0, b1, m0, m1 = batches[i], batches[i + 1], means[i], means[i + 1]
        alpha = (m1 - m0) / (b1 - b0)
        segs.append(Segment(float(b0), float(b1), float(alpha), float(m0 - alpha * b0)))

    merged = [segs[0]]
    for s in segs[1:]:
        prev = merged[-1]
        if math.isclose(prev.alpha, s.alpha, rel_tol=1e-9, abs_tol=1e-15):
            merged[-1] = Segment(prev.batch_lo, s.batch_hi, prev.alpha, prev.beta)
        else:
            merged.append(s)

    first, last = merged[0], merged[-1]
    merged[0] = Segment(min(1.0, first.batch_lo), first.batch_hi, first.alpha, first.beta)
    last = merged[-1]
    merged[-1] = Segment(last.batch_lo, max(float(b_max), last.batch_hi), last.alpha, last.beta)
    return PiecewiseLatencyModel(tuple(merged), int(b_max))


def predict_latency(model: PiecewiseLatencyModel, batch: float) -> float:
    """``alpha * B + beta`` of the segment containing ``B``."""
    return model.predict(batch)


def find_threshold_batch(model: PiecewiseLatencyModel, fraction: float = DEFAULT_THRESHOLD_FRACTION,
                         batches: Iterable[int] | None = None) -> int:
    """Smallest probed batch whose throughput reaches ``fraction`` of the best probed throughput.

    ``batches`` are the probed batch sizes; they default to the model's
    breakpoints, which miss probes absorbed by merged collinear segments.
    """
    cands = model.breakpoints() if batches is None else batches
    points = sorted({int(round(b)) for b in cands if 1 <= b <= model.b_max})
    if not points:
        return 1
    tput = [b / model.predict(b) for b in points]
    best = max(tput)
    for b, t in zip(points, tput):
        if t >= fraction * best:
            return b
    return points[0]


def extract_exchange_fractions(trace: BackwardTrace) -> list[float]:
    """Per-layer completion times normalised by the backward pass duration.

    Order is preserved, so a reordered allreduce schedule stays reordered.
    """
    if trace.total_bw_time <= 0:
        raise MalformedTraceError("total_bw_time must be > 0")
    out = []
    for t in trace.layer_completion_times:
        if t < 0:
            raise MalformedTraceError(f"negative completion time {t}")
        out.append(min(1.0, t / trace.total_bw_time))
    return out


def estimate_stddev(samples: Sequence[LatencySample], pass_: str = "total") -> DeviationEstimate:
    """Relative latency deviation pooled across probed batches.

    Per-batch coefficients of variation (sample std / mean) are pooled with
    ``n - 1`` weights. ``pass_="each"`` pools the forward and backward
    replicate groups, which is the per-pass deviation the simulator draws. Without any replicated batch the estimate is 0 and
    flagged.
    """
    passes = ("fw", "bw") if pass_ == "each" else (pass_,)
    groups: dict[tuple, list[float]] = defaultdict(list)
    for s in samples:
        for p in passes:
            groups[(p, s.batch)].append(s.latency(p))
    num = 0.0
    dof = 0
    for vals in groups.values():
        if len(vals) < 2:
            continue
        v = np.asarray(vals)
        cv = v.std(ddof=1) / v.mean()
        num += (len(v) - 1) * cv * cv
        dof += len(v) - 1
    if dof == 0:
        logger.warning("no replicated batch sizes; latency deviation defaults to 0")
        return DeviationEstimate(0.0, True)
    return DeviationEstimate(math.sqrt(num / dof), False)


# -- orchestration ------------------------------------------------------------


class ProfilingTarget(Protocol):
    """What the profiler needs from a device it can run the model on."""

    def fits(self, device_kind: str, batch: int) -> bool: ...

    def measure(self, device_kind: str, batch: int, replicates: int) -> list[LatencySample]: ...

    def backward_trace(self, device_kind: str) -> BackwardTrace: ...


@dataclass(frozen=True)
class DeviceFit:
    device_kind: str
    b_max: int
    threshold_batch: int
    fw: PiecewiseLatencyModel
    bw: PiecewiseLatencyModel
    deviation: DeviationEstimate
    samples: tuple[LatencySample, ...]


def profile_device(
    target: ProfilingTarget,
    device_kind: str,
    upper_bound: int = 1 << 16,
    replicates: int = 5,
    probe_budget: int | None = DEFAULT_PROBE_BUDGET,
    threshold_fraction: float = DEFAULT_THRESHOLD_FRACTION,
) -> DeviceFit:
    b_max = find_max_batch(lambda b: target.fits(device_kind, b), upper_bound)
    samples: list[LatencySample] = []
    for b in probe_schedule(b_max, probe_budget):
        samples.extend(target.measure(device_kind, b, replicates))
    if len({s.batch for s in samples}) < 2:
        raise DegenerateFitError(f"{device_kind}: b_max {b_max} leaves fewer than 2 probe batches")
    fw = fit_latency_model(samples, "fw", b_max)
    bw = fit_latency_model(samples, "bw", b_max)
    total = _sum_models(fw, bw)
    return DeviceFit(
        device_kind=device_kind,
        b_max=b_max,
        threshold_batch=find_threshold_batch(total, threshold_fraction, sorted({x.batch for x in samples})),
        fw=fw,
        bw=bw,
        deviation=estimate_stddev(samples, "each"),
        samples=tuple(samples),
    )


def _sum_models(a: PiecewiseLatencyModel, b: PiecewiseLatencyModel) -> PiecewiseLatencyModel:
    points = sorted(set(a.breakpoints()) | set(b.breakpoints()))
    segs = []
    for lo, hi in zip(points, points[1:]):
        mid = 0.5 * (lo + hi)
        sa, sb = a.segment_for(mid), b.segment_for(mid)
        segs.append(Segment(lo, hi, sa.alpha + sb.alpha, sa.beta + sb.beta))
    return PiecewiseLatencyModel(tuple(segs), min(a.b_max, b.b_max))


def profile_model(
    target: ProfilingTarget,
    model_id: str,
    layer_sizes: Sequence[float],
    device_kinds: Sequence[str],
    **kwargs,
) -> tuple[ModelProfile, dict[str, DeviceFit]]:
    """Profile every device kind and assemble a :class:`ModelProfile`.

    Exchange fractions are averaged over the device kinds' backward traces.
    """
    fits = {kind: profile_device(target, kind, **kwargs) for kind in device_kinds}
    fractions = np.mean([extract_exchange_fractions(target.backward_trace(k)) for k in device_kinds], axis=0)
    profile = ModelProfile(
        model_id=model_id,
        layer_sizes=tuple(layer_sizes),
        exchange_fractions=tuple(float(f) for f in np.clip(fractions, 0.0, 1.0)),
        latency_models={k: {"fw": f.fw, "bw": f.bw} for k, f in fits.items()},
        latency_stddev={k: f.deviation.relative for k, f in fits.items()},
    )
    return profile, fits


# -- CSV ----------------------------------------------------------------------

SAMPLE_COLUMNS = ("batch", "pass", "latency_s", "replicate")


def write_samples_csv(samples: Iterable[LatencySample], path) -> None:
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SAMPLE_COLUMNS)
    for s in samples:
        w.writerow([s.batch, "fw", repr(s.fw_latency), s.replicate_index])
        w.writerow([s.batch, "bw", repr(s.bw_latency), s.replicate_index])
    write_text_atomic(path, buf.getvalue())


def read_samples_csv(path) -> list[LatencySample]:
    rows: dict[tuple[int, int], dict[str, float]] = defaultdict(dict)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(SAMPLE_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise DomainError(f"{path}: missing columns {sorted(missing)}")
        for r in reader:
            rows[(int(r["batch"]), int(r["replicate"]))][r["pass"]] = float(r["latency_s"])
    out = []
    for (batch, rep), passes in sorted(rows.items()):
        if set(passes) != {"fw", "bw"}:
            raise DomainError(f"{path}: batch {batch} replicate {rep} lacks fw or bw")
        out.append(LatencySample(batch, passes["fw"], passes["bw"], rep))
    return out


__all__ = [
    "BackwardTrace",
    "DegenerateFitError",
    "DeviationEstimate",
    "DeviceFit",
    "DoesNotFitError",
    "LatencySample",
    "MalformedTraceError",
    "OutOfMemoryError",
    "estimate_stddev",
    "extract_exchange_fractions",
    "find_max_batch",
    "find_threshold_batch",
    "fit_latency_model",
    "predict_latency",
    "probe_schedule",
    "profile_device",
    "profile_model",
    "read_samples_csv",
    "write_samples_csv",
]
