"""Constrained VM configuration search.

The search space is pruned to power-of-two local batches within each type's
``[threshold_batch, memcap_batch]`` with one batch per type. When the
number of feasible ``(batch, count)`` tuples is under the exhaustive gate
every candidate is simulated; otherwise an anchor sweep derives
latency-balanced batches from each candidate anchor batch and solves for the
fewest instances exactly.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import (
    MIN_TIME,
    SECONDS_PER_HOUR,
    Plan,
    PlanEntry,
    TrainJob,
    UnsatError,
    VmType,
    validate_plan,
)

logger = logging.getLogger(__name__)

DEFAULT_GATE = 10_000

# list of (vm_type, count, batch) -> predicted mean iteration latency
SimFn = Callable[[Sequence[tuple[VmType, int, int]]], float]



@dataclass
class SearchSpaceStats:
    candidate_batch_sets: dict[str, list[int]]
    estimated_sim_invocations: int
    search_space_bound: int
    mode_used: str = ""
    sims_executed: int = 0
    wall_time_s: float = 0.0
    dropped_types: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "candidate_batch_sets": self.candidate_batch_sets,
            "estimated_sim_invocations": self.estimated_sim_invocations,
            "search_space_bound": self.search_space_bound,
            "mode_used": self.mode_used,
            "sims_executed": self.sims_executed,
            "wall_time_s": self.wall_time_s,
            "dropped_types": self.dropped_types,
        }


@dataclass
class SearchSpace:
    types: list[VmType]
    batches: list[list[int]]
    stats: SearchSpaceStats


def powers_of_two(lo: int, hi: int) -> list[int]:
    out = []
    b = 1
    while b <= hi:
        if b >= lo:
            out.append(b)
        b <<= 1
    return out


def _count_tuples(batches: list[list[int]], quotas: list[int], target: int) -> int:
    """Number of (batch, count) choices per type with ``sum(count * batch) == target``."""
    ways = np.zeros(target + 1, dtype=np.int64)
    ways[0] = 1
    for bs, q in zip(batches, quotas):
        nxt = ways.copy()  # type unused
        for b in bs:
            for k in range(1, q + 1):
                step = k * b
                if step > target:
                    break
                nxt[step:] += ways[: target + 1 - step]
        ways = nxt
    return int(ways[target]) - (1 if target == 0 else 0)


def prune_search_space(job: TrainJob, gate: int = DEFAULT_GATE) -> SearchSpace:
    types = [t for t in job.candidate_types if t.quota > 0]
    dropped = [t.id for t in job.candidate_types if t.quota <= 0]
    if any(t.is_gpu for t in types):
        dropped += [t.id for t in types if not t.is_gpu]
        types = [t for t in types if t.is_gpu]
    batches = [powers_of_two(t.threshold_batch, min(t.memcap_batch, job.B_global)) for t in types]
    keep = [i for i, b in enumerate(batches) if b]
    dropped += [types[i].id for i in range(len(types)) if i not in keep]
    types = [types[i] for i in keep]
    batches = [batches[i] for i in keep]

    quotas = [t.quota for t in types]
    estimate = _count_tuples(batches, quotas, job.B_global) if types else 0
    bound = math.prod(len(b) * q + 1 for b, q in zip(batches, quotas)) - 1 if types else 0
    stats = SearchSpaceStats(
        candidate_batch_sets={t.id: b for t, b in zip(types, batches)},
        estimated_sim_invocations=estimate,
        search_space_bound=bound,
        mode_used="exhaustive" if estimate <= gate else "anchor_approx",
        dropped_types=dropped,
    )
    if estimate == 0:
        raise UnsatError("batch bounds/quota eliminate all configurations", stats=stats)
    return SearchSpace(types, batches, stats)


def enumerate_candidates(space: SearchSpace, B_global: int):
    """Yield every pruned candidate, depth-first over types in catalog order."""
    types, batches = space.types, space.batches

    def rec(i: int, remaining: int, acc: list):
        if i == len(types):
            if remaining == 0 and acc:
                yield tuple(acc)
            return
        yield from rec(i + 1, remaining, acc)
        for b in batches[i]:
            for k in range(1, types[i].quota + 1):
                if k * b > remaining:
                    break
                acc.append((i, k, b))
                yield from rec(i + 1, remaining - k * b, acc)
                acc.pop()

    yield from rec(0, B_global, [])


@dataclass(frozen=True)
class Evaluation:
    plan: Plan
    objective: float
    feasible: bool
    hourly: float

    def rank(self) -> tuple:
        """Deterministic order: objective, fewer instances, cheaper, type ids."""
        e = self.plan.entries
        return (self.objective, sum(x.count for x in e), self.hourly,
                tuple((x.vm_type_id, x.count, x.batch) for x in e))


def evaluate(job: TrainJob, entries: Sequence[tuple[VmType, int, int]], sim: SimFn) -> Evaluation:
    t_iter = float(sim(entries))
    total_time = job.N * t_iter
    hourly = sum(c * t.price_per_hour for t, c, _ in entries)
    cost = total_time * hourly / SECONDS_PER_HOUR
    plan = Plan(
        tuple(PlanEntry(t.id, c, b) for t, c, b in entries),
        predicted_t_iter=t_iter,
        predicted_time=total_time,
        predicted_cost=cost,
    )
    feasible = (job.T_lim is None or total_time <= job.T_lim) and (job.budget is None or cost <= job.budget)
    objective = total_time if job.objective == MIN_TIME else cost
    return Evaluation(plan, objective, feasible, hourly)


class _Best:
    def __init__(self):
        self.feasible: Evaluation | None = None
        self.infeasible: Evaluation | None = None

    def offer(self, ev: Evaluation) -> None:
        slot = "feasible" if ev.feasible else "infeasible"
        cur = getattr(self, slot)
        if cur is None or ev.rank() < cur.rank():
            setattr(self, slot, ev)


class _CountingSim:
    def __init__(self, sim: SimFn):
        self.sim = sim
        self.calls = 0

    def __call__(self, entries):
        self.calls += 1
        return self.sim(entries)


def exhaustive_search(job: TrainJob, sim: SimFn, space: SearchSpace | None = None) -> Plan:
    """Simulate every pruned candidate and return the best feasible plan."""
    space = space or prune_search_space(job)
    counting = _CountingSim(sim)
    best = _Best()
    for cand in enumerate_candidates(space, job.B_global):
        entries = [(space.types[i], k, b) for i, k, b in cand]
        best.offer(evaluate(job, entries, counting))
    space.stats.sims_executed += counting.calls
    if best.feasible is None:
        raise UnsatError(
            "no candidate satisfies the time/budget constraints",
            best.infeasible.plan if best.infeasible else None,
            space.stats,
        )
    return best.feasible.plan


def _total_latency(job: TrainJob, vm: VmType, batch: int) -> float:
    return job.profile.latency(vm.device_kind, batch)


def anchor_batches(
    B_anchor: int, anchor_type: VmType, types: Sequence[VmType], job: TrainJob
) -> dict[str, int]:
    """Latency-balanced batches: for each type, the largest power-of-two batch no slower than the anchor.

    Types that cannot match the anchor latency even at their smallest
    allowed batch are left out.
    """
    if not anchor_type.threshold_batch <= B_anchor <= anchor_type.memcap_batch:
        raise ValueError(f"B_anchor {B_anchor} outside {anchor_type.id} bounds")
    target = _total_latency(job, anchor_type, B_anchor)
    limit = target * (1.0 + 1e-12)
    out: dict[str, int] = {}
    for t in types:
        if t.id == anchor_type.id:
            out[t.id] = B_anchor
            continue
        cands = powers_of_two(t.threshold_batch, t.memcap_batch)
        lo, hi = 0, len(cands) - 1
        found = None
        while lo <= hi:  # latency is non-decreasing in batch
            mid = (lo + hi) // 2
            if _total_latency(job, t, cands[mid]) <= limit:
                found = cands[mid]
                lo = mid + 1
            else:
                hi = mid - 1
        if found is not None:
            out[t.id] = found
    return out


def solve_counts(
    batches: Mapping[str, int],
    B_global: int,
    quotas: Mapping[str, int],
    prices: Mapping[str, float] | None = None,
) -> dict[str, int] | None:
    """Fewest instances with ``sum(count * batch) == B_global`` and ``count <= quota``.

    Bounded change-making by dynamic programming over the remaining batch
    sum; among minimum-count solutions the cheapest hourly price wins.
    Returns ``None`` when no exact decomposition exists.
    """
    ids = list(batches)
    if any(batches[i] < 1 for i in ids):
        raise ValueError("batches must be >= 1")
    prices = prices or {}
    if not ids:
        return None
    g = 0
    for i in ids:
        g = math.gcd(g, batches[i])
    if B_global % g:
        return None
    target = B_global // g
    INF = np.iinfo(np.int64).max // 4
    cnt = np.full(target + 1, INF, dtype=np.int64)
    cost = np.zeros(target + 1)
    cnt[0] = 0
    choices = []
    for i in ids:
        b = batches[i] // g
        q = quotas.get(i, 0)
        p = float(prices.get(i, 0.0))
        new_cnt, new_cost = cnt.copy(), cost.copy()
        choice = np.zeros(target + 1, dtype=np.int64)
        for k in range(1, q + 1):
            step = k * b
            if step > target:
                break
            c2 = np.full(target + 1, INF, dtype=np.int64)
            c2[step:] = cnt[: target + 1 - step] + k
            p2 = np.zeros(target + 1)
            p2[step:] = cost[: target + 1 - step] + k * p
            valid = c2 < INF
            better = valid & ((c2 < new_cnt) | ((c2 == new_cnt) & (p2 < new_cost - 1e-12)))
            new_cnt[better] = c2[better]
            new_cost[better] = p2[better]
            choice[better] = k
        cnt, cost = new_cnt, new_cost
        choices.append(choice)
    if cnt[target] >= INF:
        return None
    out: dict[str, int] = {}
    rem = target
    for i, choice in zip(reversed(ids), reversed(choices)):
        k = int(choice[rem])
        out[i] = k
        rem -= k * (batches[i] // g)
    assert rem == 0
    return {i: out[i] for i in ids}


def approx_solve(job: TrainJob, sim: SimFn, space: SearchSpace | None = None) -> Plan:
    """Anchor sweep: balanced batches per anchor, fewest instances, one simulation each."""
    space = space or prune_search_space(job)
    types = space.types
    by_id = {t.id: t for t in types}
    counting = _CountingSim(sim)
    best = _Best()
    seen: set[tuple] = set()
    for anchor, anchor_bs in zip(types, space.batches):
        for B_anchor in anchor_bs:
            batches = anchor_batches(B_anchor, anchor, types, job)
            key = tuple(sorted(batches.items()))
            if key in seen:
                continue
            seen.add(key)
            counts = solve_counts(
                batches, job.B_global, {t.id: t.quota for t in types}, {t.id: t.price_per_hour for t in types}
            )
            if counts is None:
                continue
            entries = [(by_id[tid], counts[tid], batches[tid]) for tid in by_id if counts.get(tid, 0) > 0]
            best.offer(evaluate(job, entries, counting))
    space.stats.sims_executed += counting.calls
    if best.feasible is None:
        raise UnsatError(
            "no anchor yields a configuration within the constraints",
            best.infeasible.plan if best.infeasible else None,
            space.stats,
        )
    return best.feasible.plan


def solve(job: TrainJob, sim: SimFn, gate: int = DEFAULT_GATE, mode: str | None = None) -> tuple[Plan, SearchSpaceStats]:
    """Prune, then search exhaustively under the gate or fall back to the anchor sweep.

    ``mode`` forces ``"exhaustive"`` or ``"anchor_approx"``. Raises
    :class:`UnsatError` (carrying the stats) when nothing is feasible.
    """
    start = time.perf_counter()
    space = prune_search_space(job, gate)
    if mode is not None:
        space.stats.mode_used = mode
    try:
        if space.stats.mode_used == "exhaustive":
            plan = exhaustive_search(job, sim, space)
        else:
            plan = approx_solve(job, sim, space)
    except UnsatError as exc:
        exc.stats = space.stats
        space.stats.wall_time_s = time.perf_counter() - start
        raise
    space.stats.wall_time_s = time.perf_counter() - start
    problems = validate_plan(plan, job)
    if problems:  # pragma: no cover - guarded by construction
        raise AssertionError(f"optimizer produced an invalid plan: {problems}")
    logger.info("plan %s (%s, %d sims)", plan.describe(), space.stats.mode_used, space.stats.sims_executed)
    return plan, space.stats


__all__ = [
    "DEFAULT_GATE",
    "SearchSpace",
    "SearchSpaceStats",
    "anchor_batches",
    "approx_solve",
    "enumerate_candidates",
    "evaluate",
    "exhaustive_search",
    "powers_of_two",
    "prune_search_space",
    "solve",
    "solve_counts",
]
