"""Command-line front end: probe, fit-net, profile, plan, simulate, run, report.

All randomness derives from ``--seed``: each command draws its stream from
``SeedSequence([seed, crc32(purpose)])`` so commands never share a stream.
Exit codes: 0 success, 2 UNSAT, 1 error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import cloudsim
from .core import (
    DomainError,
    ModelProfile,
    Plan,
    TrainJob,
    UnknownVmTypeError,
    UnsatError,
    dump_catalog,
    dump_json,
    load_catalog,
    load_json,
)
from .netmodel import BandwidthModel, TrainConfig, build_dataset, read_probes_csv, train_model, write_probes_csv
from .optimizer import DEFAULT_GATE, solve
from .profiler import profile_model
from .runtime import EventLog, RuntimeConfig, render_report, run_job
from .simulator import DEFAULT_ITERS, Selection, Simulator, simulate_iteration

logger = logging.getLogger("ddplan")

EXIT_OK, EXIT_ERROR, EXIT_UNSAT = 0, 1, 2


class InputError(Exception):
    """A referenced file is missing or does not match its schema."""


def derive_seed(seed: int, purpose: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(purpose.encode())]).generate_state(1)[0])


@dataclass
class RunConfig:
    catalog: Path | None = None
    profile: Path | None = None
    net_model: Path | None = None
    cloudspec: Path | None = None
    job: Path | None = None
    seed: int = 0
    out: Path | None = None
    exhaustive_gate: int = DEFAULT_GATE

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "RunConfig":
        def p(name):
            v = getattr(args, name, None)
            return Path(v) if v else None

        return cls(p("catalog"), p("profile"), p("net_model"), p("cloudspec"), p("job"), args.seed, p("out"),
                   getattr(args, "exhaustive_gate", DEFAULT_GATE))


def _load(path: Path | None, what: str, parse: Callable[[Path], Any]):
    if path is None:
        raise InputError(f"--{what.replace('_', '-')} is required")
    if not path.exists():
        raise InputError(f"{path}: {what} file not found")
    try:
        return parse(path)
    except KeyError as exc:
        raise InputError(f"{path}: invalid {what}: missing field {exc}") from exc
    except (TypeError, ValueError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: invalid {what}: {exc}") from exc


def _cloud(cfg: RunConfig) -> cloudsim.CloudSpec:
    if cfg.cloudspec is None:
        return cloudsim.default_cloud_spec(cfg.seed)
    return _load(cfg.cloudspec, "cloudspec", cloudsim.CloudSpec.load)


def _out(cfg: RunConfig, default: str) -> Path:
    return cfg.out or Path(default)


def _parse_list(text: str | None, conv) -> list | None:
    if text is None:
        return None
    return [conv(x) for x in text.split(",") if x.strip()]


def _job(cfg: RunConfig, profile: ModelProfile, catalog: dict) -> TrainJob:
    def parse(path):
        d = dict(load_json(path))
        d.setdefault("candidate_types", sorted(catalog))
        try:
            return TrainJob.from_dict(d, profile=profile, catalog=catalog)
        except UnknownVmTypeError as exc:
            raise ValueError(f"candidate_types: unknown type {exc}") from exc

    return _load(cfg.job, "job", parse)


def _simulator(cfg: RunConfig, profile: ModelProfile) -> Simulator:
    model = _load(cfg.net_model, "net_model", BandwidthModel.load)
    return Simulator(profile, model, seed=derive_seed(cfg.seed, "simulate"))


# -- commands -------------------------------------------------------------------


def cmd_probe(cfg: RunConfig, sizes=None, world_sizes=None, allocations: int = 3, types=None) -> int:
    spec = _cloud(cfg)
    raw = cloudsim.grid_probe(
        spec,
        types,
        cloudsim.PROBE_SIZES if sizes is None else sizes,
        cloudsim.PROBE_WORLD_SIZES if world_sizes is None else world_sizes,
        allocations,
        derive_seed(cfg.seed, "probe"),
    )
    if not raw:
        logger.warning("empty probe grid; writing a CSV with no rows")
    n = write_probes_csv(build_dataset(raw), _out(cfg, "probes.csv"))
    print(f"{n} rows")
    return EXIT_OK


def cmd_fit_net(cfg: RunConfig, probes: Path) -> int:
    records = _load(probes, "probes", read_probes_csv)
    model = train_model(records, TrainConfig(seed=derive_seed(cfg.seed, "netmodel") % (2**31)))
    out = _out(cfg, "net_model.json")
    model.save(out)
    print(f"trained on {len(records)} rows -> {out}")
    return EXIT_OK


def cmd_profile(cfg: RunConfig, model_id: str, types=None) -> int:
    spec = _cloud(cfg)
    if model_id not in spec.workloads:
        raise InputError(f"unknown model id {model_id!r}; cloudspec has {sorted(spec.workloads)}")
    w = spec.workloads[model_id]
    target = cloudsim.CloudProfiler(spec, model_id, derive_seed(cfg.seed, "profile"))
    profile, fits = profile_model(target, model_id, w.layer_sizes, sorted(w.latency))
    out = _out(cfg, ".")
    dump_json(profile.to_dict(), out / "profile.json")
    dump_catalog(cloudsim.catalog_from_fits(spec, fits, types), out / "catalog.json")
    for kind, f in sorted(fits.items()):
        print(f"{kind}: b_max={f.b_max} threshold={f.threshold_batch} deviation={f.deviation.relative:.4f}")
    return EXIT_OK


def cmd_plan(cfg: RunConfig, mode: str | None = None) -> int:
    catalog = _load(cfg.catalog, "catalog", load_catalog)
    profile = _load(cfg.profile, "profile", lambda p: ModelProfile.from_dict(load_json(p)))
    job = _job(cfg, profile, catalog)
    sim = _simulator(cfg, profile)
    out = _out(cfg, "plan.json")
    try:
        plan, stats = solve(job, sim, cfg.exhaustive_gate, mode)
    except UnsatError as exc:
        dump_json({"status": "unsat", "reason": exc.reason,
                   "best_infeasible": exc.best_infeasible.to_dict() if exc.best_infeasible else None,
                   "stats": exc.stats.to_dict() if exc.stats else None}, out)
        print(f"UNSAT: {exc.reason}")
        return EXIT_UNSAT
    dump_json({"status": "ok", "plan": plan.to_dict(), "stats": stats.to_dict()}, out)
    print(f"{plan.describe()}  t_iter={plan.predicted_t_iter:.4f} s  time={plan.predicted_time:.1f} s  "
          f"cost={plan.predicted_cost:.4f}  ({stats.mode_used}, {stats.sims_executed} sims)")
    return EXIT_OK


def _read_plan(path: Path) -> Plan:
    d = load_json(path)
    return Plan.from_dict(d["plan"] if "plan" in d else d)


def cmd_simulate(cfg: RunConfig, plan_path: Path, iters: int = DEFAULT_ITERS) -> int:
    catalog = _load(cfg.catalog, "catalog", load_catalog)
    profile = _load(cfg.profile, "profile", lambda p: ModelProfile.from_dict(load_json(p)))
    plan = _load(plan_path, "plan", _read_plan)
    for e in plan.entries:
        if e.vm_type_id not in catalog:
            raise InputError(f"{plan_path}: entries: unknown type {e.vm_type_id!r}")
    model = _load(cfg.net_model, "net_model", BandwidthModel.load)
    res = simulate_iteration(profile, Selection.from_plan(plan, catalog), model, iters,
                             derive_seed(cfg.seed, "simulate"))
    dump_json(res.to_dict(), _out(cfg, "sim.json"))
    print(f"t_iter={res.t_iter_mean:.6f} s  t_fw={res.t_fw_mean:.6f}  t_bw={res.t_bw_mean:.6f}  t_pe={res.t_pe:.6f}")
    return EXIT_OK


def cmd_run(cfg: RunConfig, rt: RuntimeConfig, preempt: Sequence[str] = ()) -> int:
    spec = _cloud(cfg)
    events = list(spec.preemptions)
    for item in preempt:
        try:
            tid, at = item.split(":")
            events.append(cloudsim.PreemptionEvent(tid, 1, iteration=int(at)))
        except ValueError:
            raise InputError(f"--preempt expects TYPE:ITERATION, got {item!r}") from None
    spec = spec.with_preemptions(events)
    catalog = _load(cfg.catalog, "catalog", load_catalog)
    profile = _load(cfg.profile, "profile", lambda p: ModelProfile.from_dict(load_json(p)))
    job = _job(cfg, profile, catalog)
    sim = _simulator(cfg, profile)
    outcome = run_job(spec, job, lambda j: solve(j, sim, cfg.exhaustive_gate)[0], rt,
                      derive_seed(cfg.seed, "cloud"))
    out = _out(cfg, "run.jsonl")
    outcome.log.save(out)
    last = outcome.log.events[-1]
    print(f"{outcome.status} at {last['t']:.1f} s, {outcome.replans} replan(s) -> {out}")
    return EXIT_UNSAT if outcome.status == "unsat" else EXIT_OK


def cmd_report(log_path: Path, out: Path | None = None) -> int:
    log = _load(log_path, "log", EventLog.load)
    text, summary = render_report(log.events)
    sys.stdout.write(text)
    if out is not None:
        dump_json(summary, out)
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output file (directory for profile)")
    common.add_argument("--cloudspec", help="cloudsim spec JSON (default: built-in cloud)")
    common.add_argument("--catalog")
    common.add_argument("--profile")
    common.add_argument("--net-model")
    common.add_argument("--job")
    common.add_argument("--exhaustive-gate", type=int, default=DEFAULT_GATE)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ddplan", description="Plan data-parallel training on heterogeneous cloud instances.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("probe", parents=[common], help="grid-probe allreduce on the simulated cloud")
    s.add_argument("--sizes", help="comma-separated buffer sizes in bytes")
    s.add_argument("--world-sizes", help="comma-separated world sizes")
    s.add_argument("--allocations", type=int, default=3)
    s.add_argument("--types", help="comma-separated instance types")

    s = sub.add_parser("fit-net", parents=[common], help="train the bandwidth model on a probe CSV")
    s.add_argument("--probes", required=True)

    s = sub.add_parser("profile", parents=[common], help="profile a workload; writes profile.json and catalog.json")
    s.add_argument("--model-id", default="resnet50")
    s.add_argument("--types", help="comma-separated instance types for the catalog")

    s = sub.add_parser("plan", parents=[common], help="choose instances and batches for a job")
    s.add_argument("--mode", choices=["exhaustive", "anchor_approx"])

    s = sub.add_parser("simulate", parents=[common], help="predict iteration latency of a plan")
    s.add_argument("--plan", required=True)
    s.add_argument("--iters", type=int, default=DEFAULT_ITERS)

    s = sub.add_parser("run", parents=[common], help="closed-loop run on the simulated cloud")
    s.add_argument("--window-minutes", type=float, default=5.0)
    s.add_argument("--launch-overhead-s", type=float, default=150.0)
    s.add_argument("--detach-overhead-s", type=float, default=5.0)
    s.add_argument("--check-every", type=int, default=10, help="iterations between throughput checks")
    s.add_argument("--preempt", action="append", default=[], metavar="TYPE:ITERATION")

    s = sub.add_parser("report", parents=[common], help="render a run log as a timeline")
    s.add_argument("--log", required=True)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = RunConfig.from_args(args)
    try:
        if args.command == "probe":
            return cmd_probe(cfg, _parse_list(args.sizes, float), _parse_list(args.world_sizes, int),
                             args.allocations, _parse_list(args.types, str))
        if args.command == "fit-net":
            return cmd_fit_net(cfg, Path(args.probes))
        if args.command == "profile":
            return cmd_profile(cfg, args.model_id, _parse_list(args.types, str))
        if args.command == "plan":
            return cmd_plan(cfg, args.mode)
        if args.command == "simulate":
            return cmd_simulate(cfg, Path(args.plan), args.iters)
        if args.command == "run":
            rt = RuntimeConfig(window_minutes=args.window_minutes, launch_overhead=args.launch_overhead_s,
                               detach_overhead=args.detach_overhead_s, check_every=args.check_every)
            return cmd_run(cfg, rt, args.preempt)
        if args.command == "report":
            return cmd_report(Path(args.log), cfg.out)
    except (InputError, DomainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_ERROR  # pragma: no cover


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
