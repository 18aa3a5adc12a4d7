"""
Choosing instances and local batches
====================================

Plan a resnet50 job under a time limit, once minimising time and once
minimising cost, and compare the exhaustive search with the anchor
approximation. Ground-truth profiles keep the demo fast.
"""

from ddplan import cloudsim
from ddplan.core import MIN_COST, MIN_TIME, TrainJob
from ddplan.optimizer import solve
from ddplan.simulator import Simulator

spec = cloudsim.default_cloud_spec(seed=0)
profile = cloudsim.true_profile(spec, "resnet50")
catalog = cloudsim.true_catalog(spec, "resnet50", sorted(spec.types))
sim = Simulator(profile, cloudsim.true_bandwidth_fn(spec))

for t in catalog:
    print(f"{t.id:10s} {t.device_kind:8s} ${t.price_per_hour:.2f}/h  quota {t.quota}  "
          f"batches {t.threshold_batch}..{t.memcap_batch}")

job = TrainJob(profile, B_global=1024, N=2000, candidate_types=catalog, T_lim=1800.0)

# same job, two objectives, two search modes
for objective in (MIN_TIME, MIN_COST):
    for mode in ("exhaustive", "anchor_approx"):
        plan, stats = solve(job.replace(objective=objective), sim, mode=mode)
        print(f"\n{objective} / {mode}: {plan.describe()}")
        print(f"  t_iter {plan.predicted_t_iter:.4f} s, time {plan.predicted_time:.0f} s, "
              f"cost ${plan.predicted_cost:.3f}, {stats.sims_executed} simulations")

# tightening the limit forces a faster, pricier mix
plan, _ = solve(job.replace(objective=MIN_COST, T_lim=600.0), sim)
print(f"\nmin_cost with T_lim=600 s: {plan.describe()}  (time {plan.predicted_time:.0f} s, "
      f"cost ${plan.predicted_cost:.3f})")
