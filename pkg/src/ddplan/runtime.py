"""Live progress tracking, replanning and gradient reweighting.

The monitor keeps a window of recent throughput samples. It projects
completion from the optimistic end of that window (mean plus ``z`` sample
standard deviations), so a run is only switched when a miss is likely. A
preempted type is blacklisted: the instances that survive may keep running,
but no new ones of that type are requested.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .core import (
    SECONDS_PER_HOUR,
    DomainError,
    Plan,
    TrainJob,
    UnsatError,
    write_text_atomic,
)

logger = logging.getLogger(__name__)

DEFAULT_WINDOW_MINUTES = 5.0
DEFAULT_Z = 1.96
DEFAULT_LAUNCH_OVERHEAD = 150.0
DEFAULT_DETACH_OVERHEAD = 5.0
DEFAULT_CHECK_EVERY = 10  # iterations between periodic checks

KEEP, REPLAN, UNSAT = "keep", "replan", "unsat"
TERMINAL_EVENTS = ("completed", "unsat", "budget-exhausted")

Optimizer = Callable[[TrainJob], Plan]


# -- gradient reweighting ---------------------------------------------------------


def batch_fractions(plan: Plan, B_global: int) -> dict[str, float]:
    """Per-type share of the global batch, ``batch / B_global``."""
    if plan.global_batch != B_global:
        raise DomainError(f"plan covers {plan.global_batch} samples, not {B_global}")
    out = {}
    for e in plan.entries:
        if e.batch <= 0:
            raise DomainError(f"{e.vm_type_id}: zero local batch")
        out[e.vm_type_id] = e.batch / B_global
    return out


def reweight_coefficients(plan: Plan, B_global: int) -> dict[str, float]:
    """Weights that turn a uniform average of instance means into the per-sample mean.

    Frameworks average the instances' mean gradients uniformly. Scaling each
    instance's gradient by ``W * batch / B_global`` (``W`` instances in all)
    makes every sample count equally.
    """
    W = plan.world_size
    return {t: W * c for t, c in batch_fractions(plan, B_global).items()}


def aggregate_gradients(plan: Plan, weights: Mapping[str, float], grads: Mapping[str, Sequence[np.ndarray]]) -> np.ndarray:
    """Framework-style aggregation: uniform mean over instances of weighted local means.

    ``grads[type_id]`` holds one ``(batch, ...)`` array of per-sample
    gradients per instance of that type.
    """
    local = []
    for e in plan.entries:
        for g in grads[e.vm_type_id]:
            local.append(weights[e.vm_type_id] * np.mean(g, axis=0))
    return np.mean(local, axis=0)


# -- throughput window ------------------------------------------------------------


class ThroughputStats(NamedTuple):
    mean: float
    stddev: float
    optimistic: float


def windowed_throughput(window: Iterable[tuple[float, float]], now: float,
                        window_minutes: float = DEFAULT_WINDOW_MINUTES, z: float = DEFAULT_Z,
                        ddof: int = 1) -> ThroughputStats | None:
    """Mean, sample deviation and optimistic bound of the samples in the last ``window_minutes``.

    Returns ``None`` when the window holds no samples; the caller then
    defers its decision.
    """
    lo = now - window_minutes * 60.0
    vals = np.array([v for ts, v in window if lo <= ts <= now], dtype=float)
    if vals.size == 0:
        return None
    mean = float(vals.mean())
    sd = float(vals.std(ddof=ddof)) if vals.size > ddof else 0.0
    return ThroughputStats(mean, sd, mean + z * sd)


@dataclass
class RuntimeConfig:
    window_minutes: float = DEFAULT_WINDOW_MINUTES
    z: float = DEFAULT_Z
    launch_overhead: float = DEFAULT_LAUNCH_OVERHEAD
    detach_overhead: float = DEFAULT_DETACH_OVERHEAD
    check_every: int = DEFAULT_CHECK_EVERY
    reset_window_on_switch: bool = True

    @property
    def switch_overhead(self) -> float:
        return self.launch_overhead + self.detach_overhead


@dataclass
class ProgressState:
    active_plan: Plan
    elapsed: float = 0.0
    spent: float = 0.0
    iterations_done: int = 0
    window: deque = field(default_factory=deque)
    blacklisted_types: set = field(default_factory=set)
    # surviving instances of blacklisted types; never grows
    survivors: dict = field(default_factory=dict)
    window_minutes: float = DEFAULT_WINDOW_MINUTES

    def record(self, now: float, throughput: float) -> None:
        self.window.append((now, throughput))
        lo = now - self.window_minutes * 60.0
        while self.window and self.window[0][0] < lo:
            self.window.popleft()

    def reset_window(self) -> None:
        self.window.clear()

    def adopt(self, plan: Plan) -> None:
        self.active_plan = plan
        for t in self.blacklisted_types:
            self.survivors[t] = min(self.survivors.get(t, 0), plan.count_of(t))


@dataclass(frozen=True)
class SwitchDecision:
    action: str
    optimistic_throughput: float | None
    reason: str
    plan: Plan | None = None
    residual_job: TrainJob | None = None

    def to_dict(self) -> dict:
        return {
            "action": self.action,
            "optimistic_throughput": self.optimistic_throughput,
            "reason": self.reason,
            "plan": self.plan.to_dict() if self.plan else None,
        }


def residual_job(state: ProgressState, job: TrainJob, config: RuntimeConfig) -> TrainJob:
    """The remaining work under the remaining limits, minus switch overheads.

    Blacklisted types stay available only up to their surviving count.
    """
    types_by_id = job.types_by_id
    burn = state.active_plan.hourly_price(types_by_id) / SECONDS_PER_HOUR
    candidates = []
    for t in job.candidate_types:
        if t.id in state.blacklisted_types:
            left = state.survivors.get(t.id, 0)
            if left > 0:
                candidates.append(t.replace(quota=min(t.quota, left)))
        else:
            candidates.append(t)
    if not candidates:
        raise UnsatError("every candidate type is blacklisted")
    T = None if job.T_lim is None else job.T_lim - state.elapsed - config.switch_overhead
    budget = None if job.budget is None else job.budget - state.spent - burn * config.switch_overhead
    if T is not None and T <= 0:
        raise UnsatError(f"no time left after switch overheads ({T:.1f} s)")
    if budget is not None and budget <= 0:
        raise UnsatError(f"no budget left after switch overheads ({budget:.4f})")
    return job.replace(N=job.N - state.iterations_done, T_lim=T, budget=budget, candidate_types=tuple(candidates))


def _replan(state: ProgressState, job: TrainJob, optimizer: Optimizer, config: RuntimeConfig,
            optimistic: float | None, why: str) -> SwitchDecision:
    try:
        rjob = residual_job(state, job, config)
        plan = optimizer(rjob)
    except UnsatError as exc:
        return SwitchDecision(UNSAT, optimistic, f"{why}; residual job unsat: {exc.reason}")
    if rjob.T_lim is not None and plan.predicted_time > rjob.T_lim:
        return SwitchDecision(UNSAT, optimistic, f"{why}; optimizer plan misses residual time")
    if rjob.budget is not None and plan.predicted_cost > rjob.budget:
        return SwitchDecision(UNSAT, optimistic, f"{why}; optimizer plan exceeds residual budget")
    return SwitchDecision(REPLAN, optimistic, why, plan, rjob)


def check_and_replan(state: ProgressState, job: TrainJob, optimizer: Optimizer,
                     config: RuntimeConfig | None = None) -> SwitchDecision:
    config = config or RuntimeConfig()
    remaining = job.N - state.iterations_done
    if remaining <= 0:
        return SwitchDecision(KEEP, None, "job finished")
    stats = windowed_throughput(state.window, state.elapsed, config.window_minutes, config.z)
    if stats is None or stats.optimistic <= 0:
        return SwitchDecision(KEEP, None, "no throughput samples yet")
    eta = remaining / stats.optimistic
    finish = state.elapsed + eta
    cost = state.spent + state.active_plan.hourly_price(job.types_by_id) / SECONDS_PER_HOUR * eta
    time_ok = job.T_lim is None or finish <= job.T_lim
    cost_ok = job.budget is None or cost <= job.budget
    if time_ok and cost_ok:
        return SwitchDecision(KEEP, stats.optimistic, f"projected finish {finish:.1f} s, cost {cost:.4f}")
    why = "projected " + ("time" if not time_ok else "cost") + " violation"
    decision = _replan(state, job, optimizer, config, stats.optimistic, why)
    if decision.action == REPLAN and decision.plan.entries == state.active_plan.entries:
        return SwitchDecision(KEEP, stats.optimistic, f"{why}; best residual plan is the active one")
    return decision


def on_preemption(state: ProgressState, type_id: str, job: TrainJob, optimizer: Optimizer,
                  config: RuntimeConfig | None = None, count: int = 1) -> tuple[ProgressState, SwitchDecision]:
    """Blacklist ``type_id``, drop the lost instances and replan immediately."""
    config = config or RuntimeConfig()
    active = state.active_plan.count_of(type_id)
    if active == 0:
        logger.warning("preemption of %s ignored: not in the active plan", type_id)
        return state, SwitchDecision(KEEP, None, f"{type_id} not active; ignored")
    left = max(0, min(active, state.survivors.get(type_id, active)) - count)
    state.blacklisted_types.add(type_id)
    state.survivors[type_id] = left
    stats = windowed_throughput(state.window, state.elapsed, config.window_minutes, config.z)
    return state, _replan(state, job, optimizer, config, stats.optimistic if stats else None,
                          f"preemption of {count} x {type_id}")


# -- event log ------------------------------------------------------------------


@dataclass
class EventLog:
    events: list[dict] = field(default_factory=list)

    def append(self, t: float, kind: str, **payload) -> dict:
        ev = {"t": round(float(t), 9), "kind": kind, "payload": payload}
        self.events.append(ev)
        return ev

    def kinds(self) -> list[str]:
        return [e["kind"] for e in self.events]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)

    def save(self, path) -> None:
        write_text_atomic(path, self.to_jsonl())

    @classmethod
    def load(cls, path) -> "EventLog":
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


# -- closed loop against the simulated cloud ----------------------------------------------


@dataclass
class RunOutcome:
    status: str
    state: ProgressState | None
    log: EventLog
    replans: int = 0


def _counts(plan: Plan) -> dict[str, int]:
    return {e.vm_type_id: e.count for e in plan.entries if e.count > 0}


def _batches(plan: Plan) -> dict[str, int]:
    return {e.vm_type_id: e.batch for e in plan.entries if e.count > 0}


def run_job(cloud, job: TrainJob, optimizer: Optimizer, config: RuntimeConfig | None = None,
            seed: int = 0, log: EventLog | None = None) -> RunOutcome:
    """Plan, execute on ``cloud`` (a :class:`~ddplan.cloudsim.CloudSpec`), monitor and replan.

    Instances bill from launch; surviving instances keep billing through a
    switch. The log always ends with one of ``completed``, ``unsat`` or
    ``budget-exhausted``.
    """
    from . import cloudsim

    config = config or RuntimeConfig()
    log = log or EventLog()
    types = job.types_by_id
    workload = cloud.workloads[job.profile.model_id]

    first = job.replace(T_lim=None if job.T_lim is None else job.T_lim - config.launch_overhead)
    try:
        plan = optimizer(first)
    except UnsatError as exc:
        log.append(0.0, "unsat", reason=exc.reason)
        return RunOutcome("unsat", None, log)
    log.append(0.0, "plan", plan=plan.to_dict())

    state = ProgressState(active_plan=plan, window_minutes=config.window_minutes)
    pending = list(cloud.preemptions)
    replans = 0
    alloc_id = 0

    def launch(p: Plan, overhead: float, reason: str):
        nonlocal alloc_id
        hourly = p.hourly_price(types)
        state.elapsed += overhead
        state.spent += hourly * overhead / SECONDS_PER_HOUR
        alloc = cloudsim.allocate(cloud, _counts(p), seed, allocation_id=alloc_id)
        alloc_id += 1
        log.append(state.elapsed, "launch", plan=p.describe(), overhead_s=overhead, reason=reason,
                   bw_factor=alloc.bw_factor)
        return alloc

    alloc = launch(plan, config.launch_overhead, "initial")
    while state.iterations_done < job.N:
        if job.budget is not None and state.spent >= job.budget:
            log.append(state.elapsed, "budget-exhausted", spent=state.spent, iterations_done=state.iterations_done)
            return RunOutcome("budget-exhausted", state, log, replans)
        chunk = min(config.check_every, job.N - state.iterations_done)
        res = cloudsim.run_iterations(alloc, workload, _batches(state.active_plan), chunk, state.elapsed,
                                      state.iterations_done, pending)
        hourly = state.active_plan.hourly_price(types)
        for lat in res.latencies:
            state.elapsed += lat
            state.spent += hourly * lat / SECONDS_PER_HOUR
            state.iterations_done += 1
            state.record(state.elapsed, 1.0 / lat)
        if res.latencies:
            log.append(state.elapsed, "progress", iterations_done=state.iterations_done, spent=state.spent,
                       mean_latency=float(np.mean(res.latencies)))

        if res.preemption is not None:
            ev = res.preemption
            pending.remove(ev)
            log.append(state.elapsed, "preemption", type_id=ev.type_id, count=ev.count,
                       iterations_done=state.iterations_done)
            state, decision = on_preemption(state, ev.type_id, job, optimizer, config, ev.count)
        elif state.iterations_done < job.N:
            decision = check_and_replan(state, job, optimizer, config)
        else:
            break

        if decision.action == KEEP:
            continue
        log.append(state.elapsed, "decision", **decision.to_dict())
        if decision.action == UNSAT:
            log.append(state.elapsed, "unsat", reason=decision.reason)
            return RunOutcome("unsat", state, log, replans)
        replans += 1
        # survivors bill through the switch, then the new plan launches
        kept = {t: min(c, decision.plan.count_of(t)) for t, c in _counts(state.active_plan).items()}
        if res.preemption is not None:
            kept[res.preemption.type_id] = min(kept.get(res.preemption.type_id, 0),
                                               state.survivors.get(res.preemption.type_id, 0))
        kept_hourly = sum(types[t].price_per_hour * c for t, c in kept.items())
        state.spent += kept_hourly * config.detach_overhead / SECONDS_PER_HOUR
        state.elapsed += config.detach_overhead
        state.adopt(decision.plan)
        if config.reset_window_on_switch:
            state.reset_window()
        alloc = launch(decision.plan, config.launch_overhead, decision.reason)

    status = "completed"
    if job.T_lim is not None and state.elapsed > job.T_lim:
        logger.warning("completed after the time limit (%.1f > %.1f s)", state.elapsed, job.T_lim)
    log.append(state.elapsed, status, iterations_done=state.iterations_done, spent=state.spent,
               within_time=job.T_lim is None or state.elapsed <= job.T_lim,
               within_budget=job.budget is None or state.spent <= job.budget)
    return RunOutcome(status, state, log, replans)


# -- report ---------------------------------------------------------------------


def render_report(events: Sequence[Mapping[str, Any]]) -> tuple[str, dict]:
    """Text timeline plus a summary table of a run log."""
    summary = {
        "events": len(events),
        "iterations_done": 0,
        "spent": 0.0,
        "elapsed": 0.0,
        "replans": 0,
        "preemptions": 0,
        "status": None,
    }
    lines = []
    for ev in events:
        kind, p, t = ev["kind"], ev.get("payload", {}), float(ev["t"])
        summary["elapsed"] = max(summary["elapsed"], t)
        if "iterations_done" in p:
            summary["iterations_done"] = p["iterations_done"]
        if "spent" in p:
            summary["spent"] = p["spent"]
        if kind == "progress":
            continue
        if kind == "decision" and p.get("action") == REPLAN:
            summary["replans"] += 1
        if kind == "preemption":
            summary["preemptions"] += 1
        if kind in TERMINAL_EVENTS:
            summary["status"] = kind
        detail = p.get("plan") if kind == "launch" else p.get("reason", p.get("type_id", ""))
        if kind == "plan":
            detail = Plan.from_dict(p["plan"]).describe()
        if kind == "decision":
            detail = f"{p['action']}: {p['reason']}"
        lines.append(f"{t:10.1f} s  {kind:<17} {detail or ''}".rstrip())
    table = "\n".join(f"{k:<16} {v}" for k, v in summary.items())
    text = ("\n".join(lines) + "\n\n" if lines else "") + table + "\n"
    return text, summary
