"""
Predicting iteration latency on a simulated cloud
=================================================

Probe allreduce bandwidth, fit the bandwidth model, profile one workload,
then compare predicted iteration latency with what the simulated cloud
actually measures for a handful of instance mixes.
"""

import numpy as np

from ddplan import cloudsim
from ddplan.netmodel import build_dataset, train_model
from ddplan.profiler import profile_model
from ddplan.simulator import Simulator

spec = cloudsim.default_cloud_spec(seed=0)

# grid-probe every instance type over buffer sizes and world sizes, three allocations each
probes = build_dataset(cloudsim.grid_probe(spec, allocations=3, seed=1))
model = train_model(probes)
print(f"{len(probes)} probe rows, large-buffer holdout MAPE {model.metadata['large']['holdout_mape']:.1f}%")

# profile resnet50 on each device kind: latency models, thresholds, exchange fractions
w = spec.workloads["resnet50"]
profile, fits = profile_model(cloudsim.CloudProfiler(spec, "resnet50", seed=2), "resnet50",
                              w.layer_sizes, sorted(w.latency))
catalog = {v.id: v for v in cloudsim.catalog_from_fits(spec, fits)}
for kind, f in sorted(fits.items()):
    print(f"{kind:8s} memcap {f.b_max:4d}  threshold {f.threshold_batch:4d}  deviation {f.deviation.relative:.3f}")

sim = Simulator(profile, model)

# a few mixes, predicted vs measured over 20 iterations on a fresh allocation
mixes = [
    {"g4dn.8xl": (2, 128)},
    {"g3.8xl": (4, 64)},
    {"p3.8xl": (2, 512)},
    {"g3.8xl": (2, 64), "g4dn.8xl": (2, 128)},
    {"p3.8xl": (1, 512), "g3.8xl": (4, 64)},
]
print(f"\n{'mix':40s} {'predicted':>10s} {'measured':>10s} {'error':>8s}")
for k, mix in enumerate(mixes):
    pred = sim([(catalog[t], c, b) for t, (c, b) in sorted(mix.items())])
    alloc = cloudsim.allocate(spec, {t: c for t, (c, _) in mix.items()}, seed=100 + k)
    truth = float(np.mean(cloudsim.run_iterations(alloc, w, {t: b for t, (_, b) in mix.items()}, 20).latencies))
    label = " + ".join(f"{c}x{t}@{b}" for t, (c, b) in sorted(mix.items()))
    print(f"{label:40s} {pred:10.4f} {truth:10.4f} {100 * (pred - truth) / truth:+7.2f}%")
