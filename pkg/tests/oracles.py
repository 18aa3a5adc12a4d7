"""Independent reference implementations used as test oracles."""

import itertools

import numpy as np

from ddplan.core import MIN_COST, MIN_TIME, SECONDS_PER_HOUR, TrainJob

from conftest import make_profile, make_vm


def fluid_exchange(starts, bus_bw, b_cap):
    """Step from event to event recomputing every rate from scratch.

    ``starts``: list of (start_time, layer, bytes); ``bus_bw[layer]`` is the
    uncontended rate. Returns {layer: finish_time}.
    """
    pending = sorted(starts)
    remaining = {}
    finish = {}
    now = 0.0
    order = []  # activation order for concurrency counts
    while pending or remaining:
        active = list(remaining)
        c = len(active)
        agg = sum(bus_bw[i] for i in active)
        rate = {i: (bus_bw[i] if agg < b_cap else min(bus_bw[i], b_cap / c)) for i in active}
        next_start = pending[0][0] if pending else float("inf")
        next_finish = min((now + remaining[i] / rate[i] for i in active), default=float("inf"))
        t = min(next_start, next_finish)
        for i in active:
            remaining[i] -= rate[i] * (t - now)
        now = t
        if next_finish <= next_start:
            done = min(active, key=lambda i: (now + remaining[i] / rate[i] if remaining[i] > 0 else now, i))
            finish[done] = now
            del remaining[done]
        else:
            _, i, s = pending.pop(0)
            remaining[i] = s
            order.append(i)
    return finish


def brute_force_plans(types, B_global):
    """Every (type, count, batch) assignment with one batch per type, counts 0..quota."""
    per_type = []
    for t in types:
        opts = [None]
        b = 1
        while b <= min(t.memcap_batch, B_global):
            if b >= t.threshold_batch:
                opts += [(t, k, b) for k in range(1, t.quota + 1)]
            b *= 2
        per_type.append(opts)
    for combo in itertools.product(*per_type):
        chosen = [c for c in combo if c is not None]
        if chosen and sum(k * b for _, k, b in chosen) == B_global:
            yield chosen


def brute_force_counts(batches, B_global, quotas):
    ids = list(batches)
    best = None
    for counts in itertools.product(*(range(quotas[i] + 1) for i in ids)):
        if sum(c * batches[i] for c, i in zip(counts, ids)) == B_global:
            if best is None or sum(counts) < best:
                best = sum(counts)
    return best


def synthetic_sim(profile):
    """Slowest VM plus a world-size dependent exchange term; deterministic."""

    def sim(entries):
        n = sum(c for _, c, _ in entries)
        compute = max(profile.latency(t.device_kind, b) for t, _, b in entries)
        return compute + (0.02 * np.log2(n) if n > 1 else 0.0)

    return sim


def objective(job, entries, sim):
    t = job.N * sim(entries)
    return t if job.objective == MIN_TIME else t * sum(c * v.price_per_hour for v, c, _ in entries) / SECONDS_PER_HOUR


def brute_force_best(job, sim):
    best = None
    for entries in brute_force_plans(job.candidate_types, job.B_global):
        t = job.N * sim(entries)
        cost = t * sum(c * v.price_per_hour for v, c, _ in entries) / SECONDS_PER_HOUR
        if job.T_lim is not None and t > job.T_lim:
            continue
        if job.budget is not None and cost > job.budget:
            continue
        val = objective(job, entries, sim)
        best = val if best is None else min(best, val)
    return best


def random_job(rng, max_types=3, max_quota=4, max_B=512):
    k = int(rng.integers(1, max_types + 1))
    speeds = {f"d{i}": float(rng.uniform(0.5, 3.0)) for i in range(k)}
    types = []
    for i in range(k):
        memcap = int(2 ** rng.integers(4, 10))
        threshold = int(2 ** rng.integers(0, int(np.log2(memcap)) + 1))
        types.append(make_vm(f"t{i}", kind=f"d{i}", price=float(rng.uniform(0.2, 4.0)), memcap=memcap,
                             threshold=threshold, quota=int(rng.integers(0, max_quota + 1))))
    prof = make_profile(speeds, alpha=0.001, beta=0.02)
    B = int(2 ** rng.integers(3, int(np.log2(max_B)) + 1))
    if rng.random() < 0.3:
        B = int(rng.integers(1, max_B + 1))
    obj = MIN_TIME if rng.random() < 0.5 else MIN_COST
    T = float(rng.uniform(5, 40)) if rng.random() < 0.5 else None
    budget = float(rng.uniform(0.001, 0.05)) if rng.random() < 0.3 else None
    return TrainJob(prof, B, 100, tuple(types), T_lim=T, budget=budget, objective=obj)
