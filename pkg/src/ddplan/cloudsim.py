"""Seeded synthetic cloud used as ground truth and as the source of probes.

The simulated cloud has three variance sources:

* allocation variance: one bandwidth factor per allocation, uniform over
  ``bw_factor_range`` (default ``[1/1.8, 1]``), plus a per-VM compute bias
  drawn from ``Normal(1, 0.03)`` clipped to ``[0.9, 1.1]``;
* temporal variance: per-transfer bandwidth noise and per-iteration compute
  noise;
* size efficiency: small buffers reach a smaller fraction of the base bus
  bandwidth, ``s / (s + s_half)``.

Ground-truth iteration latency reuses only the event-queue kernel of
:mod:`ddplan.simulator`; compute times, exchange start times and bandwidths
all come from the cloud's own true parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .core import (
    SPOT,
    DomainError,
    ModelProfile,
    PiecewiseLatencyModel,
    Segment,
    VmType,
    dump_json,
    load_json,
)
from .netmodel import ProbeFeatures, effective_bytes
from .profiler import BackwardTrace, DeviceFit, LatencySample
from .simulator import run_exchange

MB = 1 << 20
KB = 1 << 10
DEFAULT_S_HALF = 4 * MB
PROBE_SIZES = tuple(4 * 4**k for k in range(14)) + (512 * MB,)
PROBE_WORLD_SIZES = (2, 4, 8, 16, 32, 64)


class UnknownTypeError(DomainError):
    pass


@dataclass(frozen=True)
class CloudType:
    """Ground truth for one purchasable instance type."""

    id: str
    device_kind: str
    price_per_hour: float
    bus_bandwidth_cap: float
    base_bus_bw: float
    quota: int = 8
    billing: str = SPOT
    launch_time: float = 150.0
    region: str = "us-west-2"
    zone: str = "us-west-2a"
    placement_group: str = ""
    rated_network: float = 10e9
    cpu_kind: str = "xeon"

    def to_vm_type(self, memcap_batch: int, threshold_batch: int) -> VmType:
        return VmType(
            id=self.id,
            device_kind=self.device_kind,
            price_per_hour=self.price_per_hour,
            bus_bandwidth_cap=self.bus_bandwidth_cap,
            memcap_batch=memcap_batch,
            threshold_batch=threshold_batch,
            quota=self.quota,
            billing=self.billing,
            launch_overhead=self.launch_time,
            region=self.region,
            zone=self.zone,
            placement_group=self.placement_group,
            rated_network=self.rated_network,
            cpu_kind=self.cpu_kind,
        )

    def probe_features(self, s: float, n: int, concurrent: int = 1) -> ProbeFeatures:
        return ProbeFeatures(self.region, self.zone, self.device_kind, self.cpu_kind, self.rated_network,
                             float(s), int(n), int(concurrent), bool(self.placement_group))


@dataclass(frozen=True)
class Workload:
    """True behaviour of one network: layer gradients and per-device latency."""

    model_id: str
    layer_sizes: tuple[float, ...]
    exchange_fractions: tuple[float, ...]
    latency: Mapping[str, Mapping[str, PiecewiseLatencyModel]]
    max_batch: Mapping[str, int]

    def true_latency(self, device_kind: str, pass_: str, batch: int) -> float:
        return self.latency[device_kind][pass_].predict(batch)


@dataclass(frozen=True)
class PreemptionEvent:
    type_id: str
    count: int = 1
    time: float | None = None
    iteration: int | None = None


@dataclass(frozen=True)
class CloudSpec:
    types: Mapping[str, CloudType]
    workloads: Mapping[str, Workload]
    bw_factor_range: tuple[float, float] = (1 / 1.8, 1.0)
    bw_temporal_sd: float = 0.1
    compute_bias_sd: float = 0.03
    compute_bias_clip: tuple[float, float] = (0.9, 1.1)
    compute_temporal_sd: float = 0.02
    s_half: float = DEFAULT_S_HALF
    preemptions: tuple[PreemptionEvent, ...] = ()
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.bw_factor_range
        if not 0 < lo <= hi <= 1:
            raise DomainError("bw_factor_range must lie within (0, 1]")
        if min(self.bw_temporal_sd, self.compute_bias_sd, self.compute_temporal_sd) < 0:
            raise DomainError("standard deviations must be >= 0")

    def without_variance(self) -> "CloudSpec":
        return replace(self, bw_factor_range=(1.0, 1.0), bw_temporal_sd=0.0, compute_bias_sd=0.0,
                       compute_temporal_sd=0.0)

    def with_preemptions(self, events: Sequence[PreemptionEvent]) -> "CloudSpec":
        return replace(self, preemptions=tuple(events))

    def type(self, type_id: str) -> CloudType:
        try:
            return self.types[type_id]
        except KeyError:
            raise UnknownTypeError(f"unknown instance type {type_id!r}") from None

    def size_efficiency(self, s: float) -> float:
        return s / (s + self.s_half)

    # -- JSON --
    def to_dict(self) -> dict:
        return {
            "types": [vars(t).copy() for t in self.types.values()],
            "workloads": [
                {
                    "model_id": w.model_id,
                    "layer_sizes": list(w.layer_sizes),
                    "exchange_fractions": list(w.exchange_fractions),
                    "latency": {k: {p: m.to_dict() for p, m in v.items()} for k, v in w.latency.items()},
                    "max_batch": dict(w.max_batch),
                }
                for w in self.workloads.values()
            ],
            "bw_factor_range": list(self.bw_factor_range),
            "bw_temporal_sd": self.bw_temporal_sd,
            "compute_bias_sd": self.compute_bias_sd,
            "compute_bias_clip": list(self.compute_bias_clip),
            "compute_temporal_sd": self.compute_temporal_sd,
            "s_half": self.s_half,
            "preemptions": [vars(p).copy() for p in self.preemptions],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CloudSpec":
        types = {t["id"]: CloudType(**t) for t in d["types"]}
        workloads = {}
        for w in d["workloads"]:
            workloads[w["model_id"]] = Workload(
                model_id=w["model_id"],
                layer_sizes=tuple(float(s) for s in w["layer_sizes"]),
                exchange_fractions=tuple(float(f) for f in w["exchange_fractions"]),
                latency={k: {p: PiecewiseLatencyModel.from_dict(m) for p, m in v.items()}
                         for k, v in w["latency"].items()},
                max_batch={k: int(v) for k, v in w["max_batch"].items()},
            )
        return cls(
            types=types,
            workloads=workloads,
            bw_factor_range=tuple(d.get("bw_factor_range", (1 / 1.8, 1.0))),
            bw_temporal_sd=float(d.get("bw_temporal_sd", 0.1)),
            compute_bias_sd=float(d.get("compute_bias_sd", 0.03)),
            compute_bias_clip=tuple(d.get("compute_bias_clip", (0.9, 1.1))),
            compute_temporal_sd=float(d.get("compute_temporal_sd", 0.02)),
            s_half=float(d.get("s_half", DEFAULT_S_HALF)),
            preemptions=tuple(PreemptionEvent(**p) for p in d.get("preemptions", [])),
            seed=int(d.get("seed", 0)),
        )

    def save(self, path) -> None:
        dump_json(self.to_dict(), path)

    @classmethod
    def load(cls, path) -> "CloudSpec":
        return cls.from_dict(load_json(path))


# -- allocations ----------------------------------------------------------------


@dataclass
class Instance:
    type_id: str
    bw_factor: float
    compute_bias: float


@dataclass
class Allocation:
    """A set of running instances; stateful (probe/iteration counters)."""

    spec: CloudSpec
    instances: list[Instance]
    allocation_id: int
    seed: int
    probe_counter: int = 0
    run_counter: int = 0
    last_probe_bw: float | None = None

    @property
    def bw_factor(self) -> float:
        return self.instances[0].bw_factor if self.instances else 1.0

    @property
    def type_ids(self) -> list[str]:
        return sorted({i.type_id for i in self.instances})

    def count(self, type_id: str) -> int:
        return sum(1 for i in self.instances if i.type_id == type_id)

    def preempt(self, type_id: str, count: int) -> int:
        """Remove up to ``count`` instances of ``type_id`` (last launched first)."""
        removed = 0
        for idx in range(len(self.instances) - 1, -1, -1):
            if removed == count:
                break
            if self.instances[idx].type_id == type_id:
                del self.instances[idx]
                removed += 1
        return removed

    def _rng(self, stream: int, counter: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, self.allocation_id, stream, counter])

    def true_bus_bw(self, s: float, noise: float = 1.0) -> float:
        base = min(self.spec.type(t).base_bus_bw for t in self.type_ids)
        return base * self.bw_factor * noise * self.spec.size_efficiency(s)

    def b_cap(self) -> float:
        return min(self.spec.type(t).bus_bandwidth_cap for t in self.type_ids)


def allocate(spec: CloudSpec, request: Mapping[str, int], seed: int, allocation_id: int = 0) -> Allocation:
    """Draw an allocation: one bandwidth factor for it, one compute bias per VM."""
    for tid in request:
        spec.type(tid)
    rng = np.random.default_rng([seed, allocation_id, 0])
    lo, hi = spec.bw_factor_range
    factor = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    instances = []
    for tid in sorted(request):
        for _ in range(int(request[tid])):
            z = rng.standard_normal()
            bias = float(np.clip(1.0 + spec.compute_bias_sd * z, *spec.compute_bias_clip))
            instances.append(Instance(tid, factor, bias))
    return Allocation(spec, instances, allocation_id, seed)


def _temporal(rng: np.random.Generator, sd: float, size=None):
    if sd == 0:
        return 1.0 if size is None else np.ones(size)
    return np.clip(1.0 + sd * rng.standard_normal(size), 0.5, 1.5)


def probe_allreduce(allocation: Allocation, s: float, participants: int, concurrent: int = 1) -> float:
    """Measured seconds for one allreduce of ``s`` bytes over ``participants`` ranks.

    ``concurrent`` identical transfers share the instance cap by the same
    rule as the simulator.
    """
    if participants < 2:
        raise DomainError("an allreduce probe needs >= 2 participants")
    rng = allocation._rng(1, allocation.probe_counter)
    allocation.probe_counter += 1
    b = allocation.true_bus_bw(s, _temporal(rng, allocation.spec.bw_temporal_sd))
    cap = allocation.b_cap()
    if concurrent > 1 and concurrent * b >= cap:
        b = min(b, cap / concurrent)
    allocation.last_probe_bw = b
    return effective_bytes(s, participants) / b


def grid_probe(
    spec: CloudSpec,
    type_ids: Sequence[str] | None = None,
    sizes: Sequence[float] = PROBE_SIZES,
    world_sizes: Sequence[int] = PROBE_WORLD_SIZES,
    allocations: int = 3,
    seed: int = 0,
) -> list[tuple[ProbeFeatures, float]]:
    """Raw ``(features, seconds)`` probes over sizes x world sizes, per type and allocation."""
    out = []
    for t_index, tid in enumerate(type_ids or sorted(spec.types)):
        ct = spec.type(tid)
        for a in range(allocations):
            alloc = allocate(spec, {tid: 2}, seed, allocation_id=1000 * (t_index + 1) + a)
            for s in sizes:
                for n in world_sizes:
                    out.append((ct.probe_features(s, n), probe_allreduce(alloc, s, n)))
    return out


# -- ground-truth execution -------------------------------------------------------


@dataclass
class RunResult:
    latencies: list[float]
    end_time: float
    preemption: PreemptionEvent | None = None


def _due(ev: PreemptionEvent, clock: float, iteration: int) -> bool:
    return (ev.time is not None and clock >= ev.time) or (ev.iteration is not None and iteration >= ev.iteration)


def run_iterations(
    allocation: Allocation,
    workload: Workload,
    batches: Mapping[str, int],
    iters: int,
    start_time: float = 0.0,
    start_iteration: int = 0,
    pending: Sequence[PreemptionEvent] = (),
) -> RunResult:
    """Run ``iters`` synchronous iterations; ``batches`` maps type id to local batch.

    Stops early (between iterations) when a pending preemption is due,
    removing the preempted instances from the allocation.
    """
    spec = allocation.spec
    lat: list[float] = []
    clock = start_time
    for it in range(iters):
        for ev in pending:
            if _due(ev, clock, start_iteration + it) and allocation.count(ev.type_id) > 0:
                allocation.preempt(ev.type_id, ev.count)
                return RunResult(lat, clock, ev)
        t = _one_iteration(allocation, workload, batches, spec)
        lat.append(t)
        clock += t
    return RunResult(lat, clock)


def _one_iteration(allocation: Allocation, workload: Workload, batches: Mapping[str, int], spec: CloudSpec) -> float:
    rng = allocation._rng(2, allocation.run_counter)
    allocation.run_counter += 1
    inst = allocation.instances
    n = len(inst)
    fw = np.empty(n)
    bw = np.empty(n)
    for k, vm in enumerate(inst):
        kind = spec.type(vm.type_id).device_kind
        b = batches[vm.type_id]
        fw[k] = workload.true_latency(kind, "fw", b) * vm.compute_bias
        bw[k] = workload.true_latency(kind, "bw", b) * vm.compute_bias
    fw = fw * _temporal(rng, spec.compute_temporal_sd, n)
    bw = bw * _temporal(rng, spec.compute_temporal_sd, n)
    compute_end = float(np.max(fw + bw))
    if n < 2:
        return compute_end

    fr = np.asarray(workload.exchange_fractions)
    start_times = np.max(fw[None, :] + fr[:, None] * bw[None, :], axis=1)
    noise = _temporal(rng, spec.bw_temporal_sd, len(fr))
    sizes = workload.layer_sizes
    starts = [(float(start_times[i]), i, effective_bytes(sizes[i], n)) for i in range(len(sizes))]
    res = run_exchange(starts, lambda i, c: allocation.true_bus_bw(sizes[i], float(noise[i])), allocation.b_cap())
    return max(compute_end, res.t_end)


# -- truth as predictor inputs ------------------------------------------------------


def true_profile(spec: CloudSpec, model_id: str, with_deviation: bool = True) -> ModelProfile:
    """The workload's true latency models packaged as a profile."""
    w = spec.workloads[model_id]
    kinds = sorted(w.latency)
    return ModelProfile(
        model_id=w.model_id,
        layer_sizes=w.layer_sizes,
        exchange_fractions=w.exchange_fractions,
        latency_models={k: dict(w.latency[k]) for k in kinds},
        latency_stddev={k: (spec.compute_temporal_sd if with_deviation else 0.0) for k in kinds},
    )


def true_bandwidth_fn(spec: CloudSpec, bw_factor: float = 1.0):
    """Bus bandwidth the cloud delivers at a given allocation factor, without temporal noise."""
    by_kind: dict[tuple, float] = {}
    for t in spec.types.values():
        by_kind[(t.device_kind, t.region, t.zone)] = t.base_bus_bw

    def fn(vm: VmType, s: float, n: int, c: int) -> float:
        return by_kind[(vm.device_kind, vm.region, vm.zone)] * bw_factor * spec.size_efficiency(s)

    return fn


# -- profiling target -------------------------------------------------------------


class CloudProfiler:
    """Profiling runs of one workload on single instances of the simulated cloud."""

    def __init__(self, spec: CloudSpec, model_id: str, seed: int = 0):
        self.spec = spec
        self.workload = spec.workloads[model_id]
        self.seed = seed
        self._bias: dict[str, float] = {}
        self._counter = 0

    def _rng(self) -> np.random.Generator:
        self._counter += 1
        return np.random.default_rng([self.seed, 7, self._counter])

    def _vm_bias(self, kind: str) -> float:
        if kind not in self._bias:
            rng = np.random.default_rng([self.seed, 8, sorted(self.workload.latency).index(kind)])
            z = rng.standard_normal()
            self._bias[kind] = float(np.clip(1.0 + self.spec.compute_bias_sd * z, *self.spec.compute_bias_clip))
        return self._bias[kind]

    def fits(self, device_kind: str, batch: int) -> bool:
        return batch <= self.workload.max_batch[device_kind]

    def measure(self, device_kind: str, batch: int, replicates: int) -> list[LatencySample]:
        rng = self._rng()
        bias = self._vm_bias(device_kind)
        sd = self.spec.compute_temporal_sd
        fw = self.workload.true_latency(device_kind, "fw", batch) * bias * _temporal(rng, sd, replicates)
        bw = self.workload.true_latency(device_kind, "bw", batch) * bias * _temporal(rng, sd, replicates)
        return [LatencySample(batch, float(f), float(b), r) for r, (f, b) in enumerate(zip(fw, bw))]

    def backward_trace(self, device_kind: str) -> BackwardTrace:
        total = self.workload.true_latency(device_kind, "bw", self.workload.max_batch[device_kind])
        total *= self._vm_bias(device_kind)
        return BackwardTrace(tuple(f * total for f in self.workload.exchange_fractions), total)


def catalog_from_fits(spec: CloudSpec, fits: Mapping[str, DeviceFit], type_ids: Sequence[str] | None = None) -> list[VmType]:
    out = []
    for tid in type_ids or sorted(spec.types):
        ct = spec.type(tid)
        f = fits[ct.device_kind]
        out.append(ct.to_vm_type(f.b_max, f.threshold_batch))
    return out


def true_catalog(spec: CloudSpec, model_id: str, type_ids: Sequence[str] | None = None) -> list[VmType]:
    """Catalog with true memory limits and thresholds at ``max_batch / 4``."""
    w = spec.workloads[model_id]
    out = []
    for tid in type_ids or sorted(spec.types):
        ct = spec.type(tid)
        mb = w.max_batch[ct.device_kind]
        out.append(ct.to_vm_type(mb, max(1, mb // 4)))
    return out


# -- default desk-scale cloud ---------------------------------------------------------


def knee_model(per_sample: float, const: float, knee: int, b_max: int) -> PiecewiseLatencyModel:
    """Flat latency up to ``knee`` (latency-bound), linear beyond it."""
    flat = const + per_sample * knee
    segs = [Segment(1.0, float(knee), 0.0, flat), Segment(float(knee), float(b_max), per_sample, const)]
    return PiecewiseLatencyModel(tuple(segs), b_max)


def make_workload(model_id: str, layer_sizes, fractions, device_specs: Mapping[str, tuple[float, float, int]],
                  bw_share: float = 2.0 / 3.0) -> Workload:
    """``device_specs[kind] = (seconds per sample, fixed seconds, max batch)`` for fw+bw together."""
    latency = {}
    max_batch = {}
    for kind, (per_sample, const, b_max) in device_specs.items():
        total = knee_model(per_sample, const, max(1, b_max // 16), b_max)
        latency[kind] = {"fw": total.scaled(1.0 - bw_share), "bw": total.scaled(bw_share)}
        max_batch[kind] = b_max
    return Workload(model_id, tuple(float(s) for s in layer_sizes), tuple(fractions), latency, max_batch)


def default_cloud_spec(seed: int = 0) -> CloudSpec:
    """Three GPU instance families and three networks, sized for desk-scale runs.

    Layer sizes are gradient buckets chosen from the probe grid.
    """
    gbps = 1e9 / 8
    types = {
        "p3.8xl": CloudType("p3.8xl", "V100x4", 3.68, 10 * gbps, 1.0e9, quota=2, rated_network=10e9,
                            cpu_kind="xeon-e5-2686"),
        "g3.8xl": CloudType("g3.8xl", "M60x2", 0.69, 10 * gbps, 0.9e9, quota=8, rated_network=10e9,
                            cpu_kind="xeon-e5-2686"),
        "g4dn.8xl": CloudType("g4dn.8xl", "T4", 0.72, 50 * gbps, 2.4e9, quota=8, rated_network=50e9,
                              cpu_kind="xeon-8259cl"),
    }
    workloads = {
        "resnet50": make_workload(
            "resnet50",
            [16 * MB] * 6 + [4 * MB, 1 * MB, 256 * KB, 64 * KB],
            [0.10, 0.25, 0.40, 0.55, 0.70, 0.85, 0.93, 0.97, 0.99, 1.00],
            {"V100x4": (0.00055, 0.03, 512), "M60x2": (0.0055, 0.03, 64), "T4": (0.0030, 0.03, 128)},
        ),
        "vgg16": make_workload(
            "vgg16",
            [64 * MB] * 6 + [16 * MB] * 4 + [4 * MB, 1 * MB],
            [0.02, 0.04, 0.06, 0.30, 0.45, 0.60, 0.70, 0.80, 0.88, 0.94, 0.98, 1.00],
            {"V100x4": (0.0011, 0.04, 512), "M60x2": (0.012, 0.04, 64), "T4": (0.0065, 0.04, 128)},
        ),
        "squeezenet": make_workload(
            "squeezenet",
            [1 * MB] * 4 + [256 * KB] * 4 + [64 * KB] * 4,
            [0.08 * (i + 1) for i in range(12)],
            {"V100x4": (0.00006, 0.02, 2048), "M60x2": (0.0006, 0.02, 512), "T4": (0.00035, 0.02, 512)},
        ),
    }
    return CloudSpec(types=types, workloads=workloads, seed=seed)
