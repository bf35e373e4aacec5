"""Command line entry points.

Exit codes are part of the contract:

* 0 success
* 1 unexpected internal failure
* 2 invalid input (bad files, bad arguments, instance too large)
* 3 determinate negative result (infeasible instance, failed
  validation, oracle mismatch, gradient check above tolerance)
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import math
import sys
from importlib import resources
from pathlib import Path
from typing import Any

from . import __version__
from .core import (
    GIB,
    InfeasibleError,
    InputError,
    bytes_to_gib,
    dump_json,
    load_cluster,
    load_model,
    load_plan,
    load_profiles,
    save_plan,
    validate_plan,
)
from .gradcheck import DEFAULT_TOLERANCE, run_check
from .perf import ClusterPerf, fit_perf_model, load_perf, save_perf
from .planner import (
    brute_force_optimize,
    complexity_budget,
    dp_optimize_detailed,
)
from .sim import (
    DEFAULT_ACTIVATION_BYTES_PER_SAMPLE,
    SimConfig,
    simulate_iteration,
    trace_to_chrome,
    trace_to_jsonl,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_NEGATIVE = 3

# coarse single-pass sweep rate used only for budget warnings
TRANSITIONS_PER_SECOND = 5.0e7


def _sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _err(msg: str) -> None:
    print(f"hetplan: {msg}", file=sys.stderr)


def _fit_from_args(args: argparse.Namespace) -> ClusterPerf:
    if getattr(args, "fitted", None):
        return load_perf(args.fitted)
    if not getattr(args, "profiles", None):
        raise InputError("either --profiles or --fitted is required")
    models = {}
    for compute, memory in load_profiles(args.profiles):
        models[compute.profile_key] = fit_perf_model(
            compute, memory, getattr(args, "linear_regime_start", None))
    return ClusterPerf(models)


def _input_digests(args: argparse.Namespace, names: tuple[str, ...]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for name in names:
        path = getattr(args, name, None)
        if path:
            out[name] = {"path": str(path), "sha256": _sha256(path)}
    return out


# ---------------------------------------------------------------------------
# fit


def cmd_fit(args: argparse.Namespace) -> int:
    perf = _fit_from_args(args)
    save_perf(perf, args.out)
    for key in sorted(perf.models):
        pm = perf.models[key]
        print(f"{key}: fwd {pm.fwd.slope_ms:.4f} ms/sample + {pm.fwd.intercept_ms:.4f} ms, "
              f"bwd {pm.bwd.slope_ms:.4f} ms/sample + {pm.bwd.intercept_ms:.4f} ms, "
              f"mem {bytes_to_gib(pm.memory.slope_bytes):.4f} GiB/sample "
              f"(fit residual fwd {pm.fwd.max_rel_residual:.2%}, "
              f"continuity gap {pm.fwd.continuity_gap:.2%})")
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# plan


def cmd_plan(args: argparse.Namespace) -> int:
    cluster = load_cluster(args.cluster)
    model = load_model(args.model)
    perf = _fit_from_args(args)

    raw = complexity_budget(cluster.n_gpus, model.global_batch)
    estimate_s = raw / TRANSITIONS_PER_SECOND
    if args.time_budget is not None and estimate_s > args.time_budget:
        _err(f"warning: full sweep is ~{raw:.3g} transitions (~{estimate_s:.1f}s), "
             f"over the {args.time_budget:.1f}s budget; pruning usually cuts this "
             "sharply, continuing")

    result = dp_optimize_detailed(
        cluster, model, perf,
        allow_idle=args.allow_idle,
        recompute_multiplier=args.recompute_multiplier,
        threads=args.threads,
        prune=not args.no_prune,
    )
    plan, report = result.plan, result.report
    save_plan(plan, args.out)

    if args.report:
        dump_json({
            "tool": {"name": "hetplan", "version": __version__},
            "inputs": _input_digests(args, ("cluster", "model", "profiles", "fitted")),
            "optimizer": report.to_dict(),
            "plan": {"path": str(args.out), "sha256": _sha256(args.out)},
        }, args.report)
    if args.emit_csv:
        _write_plan_csv(plan, args.emit_csv)

    print(f"predicted iteration: {plan.predicted_iteration_ms:.3f} ms "
          f"(layer fwd {plan.predicted_layer_fwd_ms:.3f} ms, "
          f"layer bwd {plan.predicted_layer_bwd_ms:.3f} ms)")
    print(f"uneven sharding: {'yes' if plan.uneven_sharding_used else 'no'}; "
          f"pairs evaluated {report.pairs_evaluated}/{report.pairs_total} "
          f"(memory pruned {report.pairs_memory_pruned}, "
          f"bound pruned {report.pairs_bound_pruned}); "
          f"wall time {report.wall_time_s:.2f}s")
    for a in plan.assignments:
        shape = "idle" if a.idle else f"b={a.batch} m={a.microbatch} l={a.num_microbatches}"
        print(f"  {a.gpu_id}: {shape}, state {a.state_ratio:.4f}, "
              f"mem {bytes_to_gib(a.predicted_compute_mem + a.predicted_state_mem):.2f} GiB")
    print(f"wrote {args.out}")
    return EXIT_OK


def _write_plan_csv(plan, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["gpu_id", "microbatch", "num_microbatches", "batch",
                         "state_ratio", "compute_mem_gib", "state_mem_gib"])
        for a in plan.assignments:
            writer.writerow([
                a.gpu_id, a.microbatch, a.num_microbatches, a.batch,
                f"{a.state_ratio:.12g}",
                f"{bytes_to_gib(a.predicted_compute_mem):.12g}",
                f"{bytes_to_gib(a.predicted_state_mem):.12g}",
            ])


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args: argparse.Namespace) -> int:
    cluster = load_cluster(args.cluster)
    model = load_model(args.model)
    perf = _fit_from_args(args)
    plan = load_plan(args.plan)

    bandwidth = math.inf
    if args.offload_bandwidth is not None:
        bandwidth = args.offload_bandwidth * GIB / 1000.0  # GiB/s -> bytes/ms
    cfg = SimConfig(
        plan=plan, cluster=cluster, model=model, perf=perf,
        offload_enabled=args.offload,
        offload_bandwidth=bandwidth,
        activation_bytes_per_sample=args.activation_bytes,
        recompute_multiplier=args.recompute_multiplier,
    )
    result = simulate_iteration(cfg)

    if args.out:
        trace_to_jsonl(result, args.out)
        print(f"wrote {args.out}")
    if args.chrome:
        trace_to_chrome(result, cfg, args.chrome)
        print(f"wrote {args.chrome}")
    if args.summary:
        dump_json({
            "iteration_ms": result.iteration_ms,
            "per_layer_fwd_ms": result.per_layer_fwd_ms,
            "per_layer_bwd_ms": result.per_layer_bwd_ms,
            "peak_gpu_memory_gib": {g: bytes_to_gib(v) for g, v in result.peak_gpu_memory.items()},
            "peak_cpu_buffer_gib": {g: bytes_to_gib(v) for g, v in result.peak_cpu_buffer.items()},
            "peak_activation_gib": {g: bytes_to_gib(v)
                                    for g, v in result.peak_activation_bytes.items()},
            "exposed_comm_ms": result.exposed_comm_ms,
            "exposed_transfer_ms": result.exposed_transfer_ms,
        }, args.summary)
        print(f"wrote {args.summary}")

    rel = abs(result.iteration_ms - plan.predicted_iteration_ms) / result.iteration_ms
    print(f"simulated iteration: {result.iteration_ms:.3f} ms "
          f"(plan predicted {plan.predicted_iteration_ms:.3f} ms, "
          f"gap {rel:.2%})")
    print(f"per layer: fwd {result.per_layer_fwd_ms:.3f} ms, "
          f"bwd {result.per_layer_bwd_ms:.3f} ms")
    worst = max(result.peak_gpu_memory.items(), key=lambda kv: kv[1])
    print(f"peak gpu memory: {bytes_to_gib(worst[1]):.2f} GiB on {worst[0]}; "
          f"exposed comm {max(result.exposed_comm_ms.values()):.3f} ms, "
          f"exposed transfers {max(result.exposed_transfer_ms.values()):.3f} ms")
    return EXIT_OK


# ---------------------------------------------------------------------------
# check


def cmd_check_plan(args: argparse.Namespace) -> int:
    cluster = load_cluster(args.cluster)
    model = load_model(args.model)
    plan = load_plan(args.plan)
    memory_models = None
    if args.profiles or args.fitted:
        memory_models = _fit_from_args(args).memory_models()
    violations = validate_plan(plan, cluster, model, memory_models)
    if violations:
        for v in violations:
            print(f"violation [{v.constraint}] {v.gpu_id or '-'}: {v.message}")
        print(f"plan fails validation: {len(violations)} violation(s)")
        return EXIT_NEGATIVE
    print("plan ok: batch conserved, memory within capacity, state fully placed")
    return EXIT_OK


def cmd_check_grad(args: argparse.Namespace) -> int:
    report = run_check(fixtures=args.fixtures, seed=args.seed, tolerance=args.tolerance)
    print(f"{report.fixtures} fixtures: weighted max rel error {report.max_rel_error:.3e} "
          f"(tolerance {report.tolerance:.1e}), "
          f"unweighted max rel error {report.max_unweighted_rel_error:.3e}")
    if not report.passed:
        print("gradient check FAILED")
        return EXIT_NEGATIVE
    print("gradient check passed")
    return EXIT_OK


def cmd_check_oracle(args: argparse.Namespace) -> int:
    cluster = load_cluster(args.cluster)
    model = load_model(args.model)
    perf = _fit_from_args(args)

    def attempt(fn):
        try:
            return fn(cluster, model, perf, allow_idle=args.allow_idle,
                      recompute_multiplier=args.recompute_multiplier), None
        except InfeasibleError as exc:
            return None, str(exc)

    dp_plan, dp_reason = attempt(
        lambda *a, **kw: dp_optimize_detailed(*a, **kw).plan)
    bf_plan, bf_reason = attempt(brute_force_optimize)

    if (dp_plan is None) != (bf_plan is None):
        print(f"MISMATCH: dp {'infeasible: ' + dp_reason if dp_plan is None else 'feasible'}, "
              f"brute force {'infeasible: ' + bf_reason if bf_plan is None else 'feasible'}")
        return EXIT_NEGATIVE
    if dp_plan is None:
        print(f"agreement: both infeasible ({dp_reason})")
        return EXIT_OK
    a, b = dp_plan.predicted_iteration_ms, bf_plan.predicted_iteration_ms
    rel = abs(a - b) / max(a, b)
    if rel > 1e-9:
        print(f"MISMATCH: dp {a:.9f} ms vs brute force {b:.9f} ms (rel {rel:.3e})")
        return EXIT_NEGATIVE
    print(f"agreement: optimal latency {a:.6f} ms (rel gap {rel:.3e})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fixtures


def cmd_fixtures(args: argparse.Namespace) -> int:
    root = resources.files("hetplan").joinpath("fixtures")
    names = sorted(p.name for p in root.iterdir() if p.name.endswith(".json"))
    if args.export:
        selected = [n for n in names if not args.name or n == args.name]
        if not selected:
            _err(f"no bundled fixture named {args.name!r}")
            return EXIT_USAGE
        dest = Path(args.export)
        dest.mkdir(parents=True, exist_ok=True)
        for name in selected:
            (dest / name).write_text(root.joinpath(name).read_text())
            print(f"wrote {dest / name}")
        return EXIT_OK
    for name in names:
        print(name)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_perf_opts(p: argparse.ArgumentParser) -> None:
    group = p.add_argument_group("performance model")
    group.add_argument("--profiles", help="raw profile table json")
    group.add_argument("--fitted", help="previously fitted model json (overrides --profiles)")
    group.add_argument("--linear-regime-start", type=int, default=None,
                       help="first microbatch size of the affine tail (default: max_m/2)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hetplan",
        description="Plan, validate and simulate training iterations on "
                    "heterogeneous gpu clusters.")
    parser.add_argument("--version", action="version", version=f"hetplan {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit latency and memory models from profile tables")
    _add_perf_opts(p_fit)
    p_fit.add_argument("--out", required=True, help="fitted model json to write")
    p_fit.set_defaults(func=cmd_fit)

    p_plan = sub.add_parser("plan", help="compute the optimal batch and memory plan")
    p_plan.add_argument("--cluster", required=True)
    p_plan.add_argument("--model", required=True)
    _add_perf_opts(p_plan)
    p_plan.add_argument("--out", required=True, help="plan json to write")
    p_plan.add_argument("--report", help="optimizer report json to write")
    p_plan.add_argument("--emit-csv", help="assignment table csv to write")
    p_plan.add_argument("--allow-idle", action="store_true",
                        help="permit leaving gpus unused")
    p_plan.add_argument("--recompute-multiplier", type=float, default=1.0,
                        help="recompute cost as a multiple of forward time (default 1.0)")
    p_plan.add_argument("--threads", type=int, default=None,
                        help="dp worker threads (default: HETPLAN_THREADS or auto)")
    p_plan.add_argument("--no-prune", action="store_true",
                        help="disable upper-bound pruning (diagnostics only)")
    p_plan.add_argument("--time-budget", type=float, default=None,
                        help="warn if the unpruned sweep estimate exceeds this many seconds")
    p_plan.set_defaults(func=cmd_plan)

    p_sim = sub.add_parser("simulate", help="simulate one iteration under a plan")
    p_sim.add_argument("--plan", required=True)
    p_sim.add_argument("--cluster", required=True)
    p_sim.add_argument("--model", required=True)
    _add_perf_opts(p_sim)
    p_sim.add_argument("--out", help="event trace jsonl to write")
    p_sim.add_argument("--chrome", help="chrome trace json to write")
    p_sim.add_argument("--summary", help="metric summary json to write")
    p_sim.add_argument("--offload", action="store_true",
                       help="offload boundary activations and gradients to host memory")
    p_sim.add_argument("--offload-bandwidth", type=float, default=None,
                       help="host link bandwidth in GiB/s (default: unlimited)")
    p_sim.add_argument("--activation-bytes", type=float,
                       default=DEFAULT_ACTIVATION_BYTES_PER_SAMPLE,
                       help="boundary activation bytes per sample")
    p_sim.add_argument("--recompute-multiplier", type=float, default=1.0)
    p_sim.set_defaults(func=cmd_simulate)

    p_check = sub.add_parser("check", help="validation and self-check utilities")
    check_sub = p_check.add_subparsers(dest="check_command", required=True)

    c_plan = check_sub.add_parser("plan", help="validate a plan against its inputs")
    c_plan.add_argument("--plan", required=True)
    c_plan.add_argument("--cluster", required=True)
    c_plan.add_argument("--model", required=True)
    _add_perf_opts(c_plan)
    c_plan.set_defaults(func=cmd_check_plan)

    c_grad = check_sub.add_parser("grad", help="verify weighted gradient combination")
    c_grad.add_argument("--fixtures", type=int, default=1000)
    c_grad.add_argument("--seed", type=int, default=0)
    c_grad.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    c_grad.set_defaults(func=cmd_check_grad)

    c_oracle = check_sub.add_parser(
        "oracle", help="compare the dp against exhaustive search on a small instance")
    c_oracle.add_argument("--cluster", required=True)
    c_oracle.add_argument("--model", required=True)
    _add_perf_opts(c_oracle)
    c_oracle.add_argument("--allow-idle", action="store_true")
    c_oracle.add_argument("--recompute-multiplier", type=float, default=1.0)
    c_oracle.set_defaults(func=cmd_check_oracle)

    p_fx = sub.add_parser("fixtures", help="list or export bundled example inputs")
    p_fx.add_argument("--export", help="directory to copy fixtures into")
    p_fx.add_argument("--name", help="restrict --export to one fixture")
    p_fx.set_defaults(func=cmd_fixtures)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InfeasibleError as exc:
        _err(f"infeasible: {exc}")
        return EXIT_NEGATIVE
    except (InputError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    except Exception as exc:  # pragma: no cover - defensive
        _err(f"internal error: {exc.__class__.__name__}: {exc}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
