"""
Recovering from a spot preemption
=================================

A min-cost job runs on the simulated cloud. Halfway through, one p3
instance is reclaimed. The runtime blacklists the type, replans the
remaining iterations under the remaining time (less launch and detach
overheads) and finishes on a heterogeneous mix.
"""

from ddplan import cloudsim
from ddplan.core import MIN_COST, TrainJob
from ddplan.netmodel import build_dataset, train_model
from ddplan.optimizer import solve
from ddplan.profiler import profile_model
from ddplan.runtime import render_report, run_job
from ddplan.simulator import Simulator

spec = cloudsim.default_cloud_spec(seed=0).with_preemptions(
    [cloudsim.PreemptionEvent("p3.8xl", count=1, iteration=200)])

model = train_model(build_dataset(cloudsim.grid_probe(spec, seed=1)))
w = spec.workloads["resnet50"]
profile, fits = profile_model(cloudsim.CloudProfiler(spec, "resnet50", seed=2), "resnet50",
                              w.layer_sizes, sorted(w.latency))
catalog = cloudsim.catalog_from_fits(spec, fits, ["g3.8xl", "p3.8xl"])
sim = Simulator(profile, model)

job = TrainJob(profile, B_global=1024, N=400, candidate_types=catalog, T_lim=500.0, objective=MIN_COST)
outcome = run_job(spec, job, lambda j: solve(j, sim)[0], seed=0)

text, summary = render_report(outcome.log.events)
print(text)
print(f"status {outcome.status}, {outcome.replans} replan(s), "
      f"{outcome.state.elapsed:.1f} s of {job.T_lim:.0f} s, ${outcome.state.spent:.3f} spent")
