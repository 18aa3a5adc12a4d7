"""Shared domain types, unit conventions and plan validation.

Units are fixed across the package: seconds, bytes, bytes/second, samples,
currency per hour for prices. Billing is prorated continuously, so a run of
``t`` seconds on an instance costs ``price_per_hour * t / 3600``.

Every type round-trips through a plain ``dict`` (``to_dict`` / ``from_dict``)
whose keys match the attribute names; those dicts are the JSON interchange
format used by the command line tools.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

SECONDS_PER_HOUR = 3600.0

ON_DEMAND = "on_demand"
SPOT = "spot"
MIN_TIME = "min_time"
MIN_COST = "min_cost"


class DomainError(ValueError):
    """An input violates a type invariant or an operation's precondition."""


class UnknownVmTypeError(KeyError):
    """A plan references a VM type that the job does not offer."""


class UnsatError(Exception):
    """No configuration satisfies the job's constraints.

    UNSAT is a legitimate answer rather than a failure, so it carries the
    reason and, when available, the best infeasible plan for diagnostics.
    """

    def __init__(self, reason: str, best_infeasible: "Plan | None" = None, stats: Any = None):
        super().__init__(reason)
        self.reason = reason
        self.best_infeasible = best_infeasible
        self.stats = stats


@dataclass(frozen=True)
class VmType:
    id: str
    device_kind: str
    price_per_hour: float
    bus_bandwidth_cap: float
    memcap_batch: int
    threshold_batch: int
    quota: int
    billing: str = ON_DEMAND
    launch_overhead: float = 0.0
    region: str = ""
    zone: str = ""
    placement_group: str = ""
    rated_network: float = 0.0
    cpu_kind: str = ""

    def __post_init__(self):
        if self.price_per_hour <= 0:
            raise DomainError(f"{self.id}: price_per_hour must be > 0")
        if self.bus_bandwidth_cap <= 0:
            raise DomainError(f"{self.id}: bus_bandwidth_cap must be > 0")
        if not 1 <= self.threshold_batch <= self.memcap_batch:
            raise DomainError(
                f"{self.id}: need 1 <= threshold_batch ({self.threshold_batch}) "
                f"<= memcap_batch ({self.memcap_batch})"
            )
        if self.quota < 0:
            raise DomainError(f"{self.id}: quota must be >= 0")
        if self.billing not in (ON_DEMAND, SPOT):
            raise DomainError(f"{self.id}: billing must be {ON_DEMAND!r} or {SPOT!r}")

    @property
    def is_gpu(self) -> bool:
        return not self.device_kind.lower().startswith("cpu")

    @property
    def preemptible(self) -> bool:
        return self.billing == SPOT

    def replace(self, **changes) -> "VmType":
        return VmType(**{**self.to_dict(), **changes})

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "device_kind": self.device_kind,
            "price_per_hour": self.price_per_hour,
            "bus_bandwidth_cap": self.bus_bandwidth_cap,
            "memcap_batch": self.memcap_batch,
            "threshold_batch": self.threshold_batch,
            "quota": self.quota,
            "billing": self.billing,
            "launch_overhead": self.launch_overhead,
            "region": self.region,
            "zone": self.zone,
            "placement_group": self.placement_group,
            "rated_network": self.rated_network,
            "cpu_kind": self.cpu_kind,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "VmType":
        return cls(
            id=str(d["id"]),
            device_kind=str(d["device_kind"]),
            price_per_hour=float(d["price_per_hour"]),
            bus_bandwidth_cap=float(d["bus_bandwidth_cap"]),
            memcap_batch=int(d["memcap_batch"]),
            threshold_batch=int(d["threshold_batch"]),
            quota=int(d["quota"]),
            billing=str(d.get("billing", ON_DEMAND)),
            launch_overhead=float(d.get("launch_overhead", 0.0)),
            region=str(d.get("region", "")),
            zone=str(d.get("zone", "")),
            placement_group=str(d.get("placement_group", "")),
            rated_network=float(d.get("rated_network", 0.0)),
            cpu_kind=str(d.get("cpu_kind", "")),
        )


@dataclass(frozen=True)
class Segment:
    batch_lo: float
    batch_hi: float
    alpha: float
    beta: float

    def __call__(self, batch: float) -> float:
        return self.alpha * batch + self.beta


@dataclass(frozen=True)
class PiecewiseLatencyModel:
    """Latency ``alpha * B + beta`` on contiguous batch segments covering ``[1, b_max]``."""

    segments: tuple[Segment, ...]
    b_max: int

    def __post_init__(self):
        segs = tuple(s if isinstance(s, Segment) else Segment(*s) for s in self.segments)
        object.__setattr__(self, "segments", segs)
        if not segs:
            raise DomainError("latency model needs at least one segment")
        if segs[0].batch_lo > 1 or segs[-1].batch_hi < self.b_max:
            raise DomainError("segments must cover [1, b_max]")
        for a, b in zip(segs, segs[1:]):
            if a.batch_hi != b.batch_lo:
                raise DomainError("segments must be contiguous")
        if any(s.alpha < 0 for s in segs):
            raise DomainError("segment slopes must be >= 0")

    def segment_for(self, batch: float) -> Segment:
        for seg in self.segments:
            if batch <= seg.batch_hi:
                return seg
        return self.segments[-1]

    def predict(self, batch: float) -> float:
        if batch < 1:
            raise DomainError(f"batch {batch} < 1")
        if batch > self.b_max:
            raise OutOfMemoryError(f"batch {batch} exceeds b_max {self.b_max}")
        return self.segment_for(batch)(batch)

    def breakpoints(self) -> list[float]:
        return [self.segments[0].batch_lo] + [s.batch_hi for s in self.segments]

    def scaled(self, factor: float) -> "PiecewiseLatencyModel":
        return PiecewiseLatencyModel(
            tuple(Segment(s.batch_lo, s.batch_hi, s.alpha * factor, s.beta * factor) for s in self.segments),
            self.b_max,
        )

    def to_dict(self) -> dict:
        return {
            "segments": [
                {"batch_lo": s.batch_lo, "batch_hi": s.batch_hi, "alpha": s.alpha, "beta": s.beta}
                for s in self.segments
            ],
            "b_max": self.b_max,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PiecewiseLatencyModel":
        segs = tuple(
            Segment(float(s["batch_lo"]), float(s["batch_hi"]), float(s["alpha"]), float(s["beta"]))
            for s in d["segments"]
        )
        return cls(segs, int(d["b_max"]))


class OutOfMemoryError(DomainError):
    """Requested batch does not fit in device memory."""


@dataclass(frozen=True)
class ModelProfile:
    model_id: str
    layer_sizes: tuple[float, ...]
    exchange_fractions: tuple[float, ...]
    latency_models: Mapping[str, Mapping[str, PiecewiseLatencyModel]]
    latency_stddev: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(float(s) for s in self.layer_sizes))
        object.__setattr__(self, "exchange_fractions", tuple(float(f) for f in self.exchange_fractions))
        if len(self.layer_sizes) != len(self.exchange_fractions):
            raise DomainError("layer_sizes and exchange_fractions lengths differ")
        if any(s <= 0 for s in self.layer_sizes):
            raise DomainError("layer sizes must be > 0")
        if any(not 0.0 <= f <= 1.0 for f in self.exchange_fractions):
            raise DomainError("exchange fractions must lie in [0, 1]")
        for kind, passes in self.latency_models.items():
            if set(passes) != {"fw", "bw"}:
                raise DomainError(f"latency models for {kind} need exactly 'fw' and 'bw'")

    def latency(self, device_kind: str, batch: float) -> float:
        """Predicted forward + backward latency on one device."""
        m = self.models_for(device_kind)
        return m["fw"].predict(batch) + m["bw"].predict(batch)

    def models_for(self, device_kind: str) -> Mapping[str, PiecewiseLatencyModel]:
        try:
            return self.latency_models[device_kind]
        except KeyError:
            raise ProfileIncompleteError(f"profile {self.model_id!r} has no latency model for {device_kind!r}") from None

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "layer_sizes": list(self.layer_sizes),
            "exchange_fractions": list(self.exchange_fractions),
            "latency_models": {
                kind: {p: m.to_dict() for p, m in passes.items()} for kind, passes in self.latency_models.items()
            },
            "latency_stddev": dict(self.latency_stddev),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelProfile":
        return cls(
            model_id=str(d["model_id"]),
            layer_sizes=tuple(d["layer_sizes"]),
            exchange_fractions=tuple(d["exchange_fractions"]),
            latency_models={
                kind: {p: PiecewiseLatencyModel.from_dict(m) for p, m in passes.items()}
                for kind, passes in d["latency_models"].items()
            },
            latency_stddev={k: float(v) for k, v in d.get("latency_stddev", {}).items()},
        )


class ProfileIncompleteError(DomainError):
    """A device kind in the selection has no fitted latency model."""


@dataclass(frozen=True)
class PlanEntry:
    vm_type_id: str
    count: int
    batch: int


@dataclass(frozen=True)
class Plan:
    entries: tuple[PlanEntry, ...]
    predicted_t_iter: float | None = None
    predicted_time: float | None = None
    predicted_cost: float | None = None

    def __post_init__(self):
        object.__setattr__(
            self, "entries", tuple(e if isinstance(e, PlanEntry) else PlanEntry(*e) for e in self.entries)
        )

    @property
    def world_size(self) -> int:
        return sum(e.count for e in self.entries)

    @property
    def global_batch(self) -> int:
        return sum(e.count * e.batch for e in self.entries)

    def count_of(self, type_id: str) -> int:
        return sum(e.count for e in self.entries if e.vm_type_id == type_id)

    def hourly_price(self, types: Mapping[str, VmType]) -> float:
        return sum(e.count * types[e.vm_type_id].price_per_hour for e in self.entries)

    def describe(self) -> str:
        return " + ".join(f"{e.count}x{e.vm_type_id}@{e.batch}" for e in self.entries) or "(empty)"

    def to_dict(self) -> dict:
        return {
            "entries": [{"vm_type_id": e.vm_type_id, "count": e.count, "batch": e.batch} for e in self.entries],
            "predicted_t_iter": self.predicted_t_iter,
            "predicted_time": self.predicted_time,
            "predicted_cost": self.predicted_cost,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Plan":
        return cls(
            entries=tuple(PlanEntry(str(e["vm_type_id"]), int(e["count"]), int(e["batch"])) for e in d["entries"]),
            predicted_t_iter=d.get("predicted_t_iter"),
            predicted_time=d.get("predicted_time"),
            predicted_cost=d.get("predicted_cost"),
        )


@dataclass(frozen=True)
class TrainJob:
    profile: ModelProfile
    B_global: int
    N: int
    candidate_types: tuple[VmType, ...]
    T_lim: float | None = None
    budget: float | None = None
    objective: str = MIN_TIME

    def __post_init__(self):
        object.__setattr__(self, "candidate_types", tuple(self.candidate_types))
        if self.B_global < 1:
            raise DomainError("B_global must be >= 1")
        if self.N < 1:
            raise DomainError("N must be >= 1")
        if not self.candidate_types:
            raise DomainError("job needs at least one candidate type")
        if self.objective not in (MIN_TIME, MIN_COST):
            raise DomainError(f"objective must be {MIN_TIME!r} or {MIN_COST!r}")
        ids = [t.id for t in self.candidate_types]
        if len(set(ids)) != len(ids):
            raise DomainError("duplicate candidate type ids")

    @property
    def types_by_id(self) -> dict[str, VmType]:
        return {t.id: t for t in self.candidate_types}

    def replace(self, **changes) -> "TrainJob":
        kw = dict(
            profile=self.profile,
            B_global=self.B_global,
            N=self.N,
            candidate_types=self.candidate_types,
            T_lim=self.T_lim,
            budget=self.budget,
            objective=self.objective,
        )
        kw.update(changes)
        return TrainJob(**kw)

    def to_dict(self, embed_profile: bool = True) -> dict:
        return {
            "profile": self.profile.to_dict() if embed_profile else self.profile.model_id,
            "B_global": self.B_global,
            "N": self.N,
            "T_lim": self.T_lim,
            "budget": self.budget,
            "objective": self.objective,
            "candidate_types": [t.to_dict() for t in self.candidate_types],
        }

    @classmethod
    def from_dict(
        cls,
        d: Mapping[str, Any],
        profile: ModelProfile | None = None,
        catalog: Mapping[str, VmType] | None = None,
    ) -> "TrainJob":
        """Build a job; ``profile`` and string entries in ``candidate_types`` resolve externally."""
        if profile is None:
            if not isinstance(d.get("profile"), Mapping):
                raise DomainError("job does not embed a profile and none was supplied")
            profile = ModelProfile.from_dict(d["profile"])
        types = []
        for t in d["candidate_types"]:
            if isinstance(t, Mapping):
                types.append(VmType.from_dict(t))
            else:
                if catalog is None or t not in catalog:
                    raise UnknownVmTypeError(t)
                types.append(catalog[t])
        return cls(
            profile=profile,
            B_global=int(d["B_global"]),
            N=int(d["N"]),
            candidate_types=tuple(types),
            T_lim=None if d.get("T_lim") is None else float(d["T_lim"]),
            budget=None if d.get("budget") is None else float(d["budget"]),
            objective=str(d.get("objective", MIN_TIME)),
        )


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    quantity: float | None = None


def plan_time_and_cost(entries: Iterable[PlanEntry], types: Mapping[str, VmType], t_iter: float, N: int):
    """Total time ``N * t_iter`` and prorated cost of running ``entries`` for it."""
    time = N * t_iter
    hourly = sum(e.count * types[e.vm_type_id].price_per_hour for e in entries)
    return time, time * hourly / SECONDS_PER_HOUR


def validate_plan(plan: Plan, job: TrainJob) -> list[Violation]:
    """Return every constraint ``plan`` violates for ``job``; empty means valid.

    Raises :class:`UnknownVmTypeError` when the plan names a type the job
    does not offer, which is a structural error rather than a violation.
    """
    types = job.types_by_id
    for e in plan.entries:
        if e.vm_type_id not in types:
            raise UnknownVmTypeError(e.vm_type_id)

    out: list[Violation] = []
    total = plan.global_batch
    if total != job.B_global:
        out.append(Violation("batch_sum", f"sum of count*batch {total} != B_global {job.B_global}", total))

    per_type: dict[str, int] = {}
    for e in plan.entries:
        t = types[e.vm_type_id]
        if e.count < 1:
            out.append(Violation("count", f"{e.vm_type_id}: count {e.count} < 1", e.count))
        if not t.threshold_batch <= e.batch <= t.memcap_batch:
            out.append(
                Violation(
                    "batch_bounds",
                    f"{e.vm_type_id}: batch {e.batch} outside [{t.threshold_batch}, {t.memcap_batch}]",
                    e.batch,
                )
            )
        per_type[e.vm_type_id] = per_type.get(e.vm_type_id, 0) + e.count
    for tid, n in per_type.items():
        if n > types[tid].quota:
            out.append(Violation("quota", f"{tid}: count {n} > quota {types[tid].quota}", n))

    if plan.predicted_time is not None and job.T_lim is not None and plan.predicted_time > job.T_lim:
        out.append(Violation("time", f"predicted time {plan.predicted_time:.6g}s > T_lim {job.T_lim:.6g}s", plan.predicted_time))
    if plan.predicted_cost is not None and job.budget is not None and plan.predicted_cost > job.budget:
        out.append(Violation("budget", f"predicted cost {plan.predicted_cost:.6g} > budget {job.budget:.6g}", plan.predicted_cost))
    return out


# -- JSON helpers -------------------------------------------------------------


def load_json(path: str | os.PathLike) -> Any:
    with open(path) as fh:
        return json.load(fh)


def dump_json(obj: Any, path: str | os.PathLike) -> None:
    """Write JSON atomically (temp file in the same directory, then rename)."""
    write_text_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_text_atomic(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_catalog(path: str | os.PathLike) -> dict[str, VmType]:
    data = load_json(path)
    rows = data["types"] if isinstance(data, Mapping) else data
    return {t.id: t for t in (VmType.from_dict(r) for r in rows)}


def dump_catalog(types: Sequence[VmType], path: str | os.PathLike) -> None:
    dump_json({"types": [t.to_dict() for t in types]}, path)
