"""Iteration latency prediction.

``t_iter = t_fw + max(t_bw, t_pe)``: forward/backward compute latency is
sampled per VM and bounded by the slowest VM each iteration, while the
parameter-exchange span ``t_pe`` comes from an event-queue simulation of the
per-layer allreduces sharing the instance's bus bandwidth.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence, Union

import numpy as np

from .core import DomainError, ModelProfile, Plan, VmType
from .netmodel import BandwidthModel, ProbeFeatures, effective_bytes

DEFAULT_ITERS = 100
TRUNCATE_AT = 0.1  # fraction of the mean latency

# (vm_type, buffer bytes, world size, concurrent transfers) -> bus bandwidth
BandwidthFn = Callable[[VmType, float, int, int], float]


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SelectionEntry:
    vm_type: VmType
    count: int
    batch: int


@dataclass(frozen=True)
class Selection:
    entries: tuple[SelectionEntry, ...]

    def __post_init__(self):
        entries = tuple(e if isinstance(e, SelectionEntry) else SelectionEntry(*e) for e in self.entries)
        object.__setattr__(self, "entries", entries)
        if self.world_size < 1:
            raise DomainError("selection needs at least one instance")

    @property
    def world_size(self) -> int:
        return sum(e.count for e in self.entries)

    @property
    def vm_types(self) -> list[VmType]:
        return [e.vm_type for e in self.entries if e.count > 0]

    @property
    def b_cap(self) -> float:
        return min(t.bus_bandwidth_cap for t in self.vm_types)

    @classmethod
    def from_plan(cls, plan: Plan, types: Mapping[str, VmType]) -> "Selection":
        return cls(tuple(SelectionEntry(types[e.vm_type_id], e.count, e.batch) for e in plan.entries))

    def key(self) -> tuple:
        return tuple((e.vm_type.id, e.count, e.batch) for e in self.entries)


@dataclass
class TransferState:
    layer_index: int
    size: float  # effective bytes
    remaining: float
    predicted_bw: float
    current_bw: float = 0.0
    start: float = 0.0
    sent: float = 0.0
    version: int = 0


@dataclass
class ExchangeResult:
    finish_times: dict[int, float]
    sent: dict[int, float]
    sizes: dict[int, float]
    # one snapshot per processed event: (time, {layer: b_tra}, b_agg)
    trace: list[tuple[float, dict[int, float], float]] = field(default_factory=list)

    @property
    def t_end(self) -> float:
        return max(self.finish_times.values(), default=0.0)


_FINISH, _START = 0, 1


def run_exchange(
    starts: Sequence[tuple[float, int, float]],
    b_bus_fn: Callable[[int, int], float],
    b_cap: float,
    record_trace: bool = False,
) -> ExchangeResult:
    """Event-queue simulation of concurrent transfers sharing a bandwidth cap.

    ``starts`` holds ``(start_time, layer_index, effective_bytes)``;
    ``b_bus_fn(layer_index, concurrency)`` is queried once when a transfer
    activates. After every activation or completion each active transfer runs
    at ``b_bus`` while the aggregate demand stays below ``b_cap``, otherwise
    at ``min(b_bus, b_cap / c)``. At equal timestamps completions precede
    starts, then lower layer index first.
    """
    heap: list[tuple[float, int, int, int]] = [(float(t), _START, i, 0) for t, i, _ in starts]
    heapq.heapify(heap)
    sizes = {i: float(s) for _, i, s in starts}
    active: dict[int, TransferState] = {}
    result = ExchangeResult({}, {}, sizes)
    now = 0.0

    while heap:
        t, kind, i, version = heapq.heappop(heap)
        if kind == _FINISH and (i not in active or active[i].version != version):
            continue
        if t > now:
            dt = t - now
            for tr in active.values():
                moved = tr.current_bw * dt
                tr.remaining = max(0.0, tr.remaining - moved)
                tr.sent += moved
            now = t

        if kind == _FINISH:
            tr = active.pop(i)
            result.finish_times[i] = now
            result.sent[i] = tr.sent
        else:
            try:
                b = float(b_bus_fn(i, len(active) + 1))
            except Exception as exc:
                raise SimulationError(f"bandwidth prediction failed for layer {i}: {exc}") from exc
            if not b > 0:
                raise SimulationError(f"non-positive bandwidth {b} for layer {i}")
            active[i] = TransferState(i, sizes[i], sizes[i], b, start=now)

        c = len(active)
        b_agg = sum(tr.predicted_bw for tr in active.values())
        for tr in active.values():
            share = tr.predicted_bw if b_agg < b_cap else min(tr.predicted_bw, b_cap / c)
            if share != tr.current_bw:
                tr.current_bw = share
                tr.version += 1
                heapq.heappush(heap, (now + tr.remaining / share, _FINISH, tr.layer_index, tr.version))
        if record_trace:
            result.trace.append((now, {j: tr.current_bw for j, tr in active.items()}, b_agg))
    return result


def as_bandwidth_fn(bandwidth: Union[BandwidthModel, BandwidthFn]) -> BandwidthFn:
    if isinstance(bandwidth, BandwidthModel):
        model = bandwidth

        def fn(vm: VmType, s: float, n: int, c: int) -> float:
            return model.predict(ProbeFeatures.for_vm(vm, s, n, c))

        return fn
    return bandwidth


def simulate_parameter_exchange(
    profile: ModelProfile,
    selection: Selection,
    bandwidth: Union[BandwidthModel, BandwidthFn],
    t_bw: float,
    record_trace: bool = False,
) -> float | tuple[float, ExchangeResult]:
    """Span of the overlapped parameter exchange, measured from the start of the backward pass."""
    n = selection.world_size
    if n < 2:
        return (0.0, ExchangeResult({}, {}, {})) if record_trace else 0.0
    fn = as_bandwidth_fn(bandwidth)
    types = selection.vm_types
    sizes = profile.layer_sizes

    def b_bus(i: int, c: int) -> float:
        return min(fn(vm, sizes[i], n, c) for vm in types)

    starts = [(f * t_bw, i, effective_bytes(s, n)) for i, (s, f) in enumerate(zip(sizes, profile.exchange_fractions))]
    res = run_exchange(starts, b_bus, selection.b_cap, record_trace)
    return (res.t_end, res) if record_trace else res.t_end


def _compute_draws(selection: Selection, profile: ModelProfile, iters: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Per-iteration slowest-VM forward and backward latencies.

    Draws are taken VM by VM (forward then backward, ``iters`` each), so
    growing a selection only appends VMs and never changes earlier draws.
    """
    if iters < 1:
        raise DomainError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    fw = np.zeros(iters)
    bw = np.zeros(iters)
    for e in selection.entries:
        if e.count == 0:
            continue
        kind = e.vm_type.device_kind
        models = profile.models_for(kind)
        rel = profile.latency_stddev.get(kind, 0.0)
        mu = np.array([models["fw"].predict(e.batch), models["bw"].predict(e.batch)])
        z = rng.standard_normal((e.count, 2, iters))
        draws = mu[None, :, None] * (1.0 + rel * z)
        draws = np.maximum(draws, TRUNCATE_AT * mu[None, :, None])
        fw = np.maximum(fw, draws[:, 0, :].max(axis=0))
        bw = np.maximum(bw, draws[:, 1, :].max(axis=0))
    return fw, bw


def sample_compute(selection: Selection, profile: ModelProfile, iters: int = DEFAULT_ITERS, seed=0) -> tuple[float, float]:
    """Mean slowest-VM forward and backward latency over ``iters`` sampled iterations."""
    fw, bw = _compute_draws(selection, profile, iters, seed)
    return float(fw.mean()), float(bw.mean())


@dataclass(frozen=True)
class SimResult:
    t_iter_mean: float
    t_fw_mean: float
    t_bw_mean: float
    t_pe: float
    per_iteration_latencies: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "t_iter_mean": self.t_iter_mean,
            "t_fw_mean": self.t_fw_mean,
            "t_bw_mean": self.t_bw_mean,
            "t_pe": self.t_pe,
            "per_iteration_latencies": list(self.per_iteration_latencies),
        }


def simulate_iteration(
    profile: ModelProfile,
    selection: Selection,
    bandwidth: Union[BandwidthModel, BandwidthFn],
    iters: int = DEFAULT_ITERS,
    seed=0,
) -> SimResult:
    fw, bw = _compute_draws(selection, profile, iters, seed)
    t_pe = simulate_parameter_exchange(profile, selection, bandwidth, float(bw.mean()))
    lat = fw + np.maximum(bw, t_pe)
    return SimResult(float(lat.mean()), float(fw.mean()), float(bw.mean()), float(t_pe), tuple(lat.tolist()))


class Simulator:
    """Memoising ``selection -> t_iter`` callable handed to the optimizer.

    Every call uses the same seed, so candidates are compared under common
    random numbers.
    """

    def __init__(self, profile: ModelProfile, bandwidth: Union[BandwidthModel, BandwidthFn],
                 iters: int = DEFAULT_ITERS, seed=0):
        self.profile = profile
        self.bandwidth = as_bandwidth_fn(bandwidth)
        self.iters = iters
        self.seed = seed
        self._cache: dict[tuple, SimResult] = {}
        self.calls = 0

    def result(self, entries: Iterable[tuple[VmType, int, int]]) -> SimResult:
        sel = Selection(tuple(SelectionEntry(*e) for e in entries))
        key = sel.key()
        hit = self._cache.get(key)
        if hit is None:
            self.calls += 1
            hit = simulate_iteration(self.profile, sel, self.bandwidth, self.iters, self.seed)
            self._cache[key] = hit
        return hit

    def __call__(self, entries: Iterable[tuple[VmType, int, int]]) -> float:
        return self.result(entries).t_iter_mean
