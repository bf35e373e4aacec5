"""Batch-assignment optimizer for heterogeneous data-parallel training.

The planner picks a per-gpu microbatch size m and microbatch count l so
that every gpu processes b = m * l samples per iteration, the global
batch is covered exactly, per-gpu and aggregate memory fit, and the
slowest gpu's per-layer latency is minimal. The search is an exact
dynamic program over (gpus processed, samples assigned, microbatch mass
k = sum of m); a brute-force enumerator with the same cost model serves
as a desk-scale oracle.
"""
from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .core import (
    ClusterSpec,
    CommProfile,
    GpuAssignment,
    GpuSpec,
    InfeasibleError,
    InputError,
    ModelSpec,
    TrainPlan,
)
from .perf import ClusterPerf, collective_latency
from .sharding import assign_unit_shards

STATE_QUANTA = 1024
BRUTE_FORCE_MAX_GPUS = 5
BRUTE_FORCE_MAX_BATCH = 16
_DP_MAX_BATCH = 30000  # choice arrays are int16
_CAP_SLACK = 1 + 1e-12  # absorbs float dust in byte comparisons


class SizeGuardError(InputError):
    """Instance too large for the brute-force enumerator."""


@dataclass(frozen=True)
class LayerLatency:
    """Per-layer forward and backward wall time for one gpu's (m, l)."""

    t_fwd_ms: float
    t_bwd_ms: float
    used_uneven_comm: bool

    @property
    def total_ms(self) -> float:
        return self.t_fwd_ms + self.t_bwd_ms


@dataclass
class DpTable:
    """DP state for inspection: final slab always, full cube on request."""

    batch: int
    d_final: np.ndarray  # (B+1, B+1): j samples, k microbatch mass
    choices_m: list[np.ndarray]
    choices_l: list[np.ndarray]
    d_full: np.ndarray | None = None


@dataclass
class OptimizerReport:
    n_gpus: int
    batch: int
    allow_idle: bool
    threads: int
    wall_time_s: float
    transitions_raw: int
    pairs_total: int
    pairs_memory_pruned: int
    pairs_bound_pruned: int
    pairs_evaluated: int
    cell_transitions_evaluated: int
    states_finite: int
    upper_bound_ms: float
    chosen_mass: int
    optimal_latency_ms: float
    assumed_uneven: list[bool]
    realized_uneven: bool
    assumption_matched: bool

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class OptimizeResult:
    plan: TrainPlan
    report: OptimizerReport
    table: DpTable | None = None


def per_gpu_layer_latency(
    gpu: GpuSpec,
    perf: ClusterPerf,
    comm: CommProfile,
    m: int,
    num_microbatches: int,
    even_state_share: float,
    *,
    mem_cap_fraction: float = 0.80,
    recompute_multiplier: float = 1.0,
) -> LayerLatency:
    """Eqs. for one gpu: compute under the collective floors.

    Forward waits at least one allgather per layer; backward at least an
    allgather plus a reducescatter. If the gpu cannot hold its even
    share of optimizer state next to the compute footprint, its shard
    must shrink, someone else's must grow, and the collectives run at
    the uneven (padded) rate.
    """
    if m < 1 or num_microbatches < 1:
        raise InputError("m and num_microbatches must be >= 1")
    pm = perf[gpu.profile_key]
    cap = mem_cap_fraction * gpu.memory_capacity
    compute_mem = pm.memory.eval(m)
    if compute_mem > cap * _CAP_SLACK:
        raise InfeasibleError(
            f"constraint II: gpu {gpu.id} compute memory at m={m} exceeds effective capacity")
    uneven = compute_mem + even_state_share > cap * _CAP_SLACK
    ag, rs = collective_latency(comm, uneven)
    tf = pm.fwd.eval(m)
    tb_total = num_microbatches * (pm.bwd.eval(m) + recompute_multiplier * tf)
    return LayerLatency(
        t_fwd_ms=max(num_microbatches * tf, ag),
        t_bwd_ms=max(tb_total, ag + rs),
        used_uneven_comm=uneven,
    )


def complexity_budget(n_gpus: int, batch: int) -> int:
    """Exact raw transition count of the unpruned DP loops.

    Counts every (i, j, k, m, l) tuple visited by the nested loops:
    sum over i, j, k<=j, m<=k of floor(j/m) choices of l.
    """
    if n_gpus < 1 or batch < 1:
        raise InputError("n_gpus and batch must be >= 1")
    total = 0
    for j in range(1, batch + 1):
        m = np.arange(1, j + 1)
        # m appears for every k in [m, j]: j - m + 1 times
        total += int(((j - m + 1) * (j // m)).sum())
    return n_gpus * total


# ---------------------------------------------------------------------------
# Shared plan assembly


def _resolve_threads(threads: int | None) -> int:
    if threads is None:
        raw = os.environ.get("HETPLAN_THREADS", "0")
        try:
            threads = int(raw)
        except ValueError:
            raise InputError(f"HETPLAN_THREADS must be an integer, got {raw!r}") from None
    if threads < 0:
        raise InputError("thread count must be >= 0")
    if threads == 0:
        threads = min(8, os.cpu_count() or 1)
    return threads


def _greedy_state_quanta(
    eff_caps: Sequence[float], compute_mem: Sequence[float], state_bytes: float
) -> list[int]:
    """Spread optimizer state in fixed quanta, always onto the gpu with
    the lowest utilization-to-capacity ratio (ties to the lowest index)."""
    n = len(eff_caps)
    quantum = state_bytes / STATE_QUANTA
    counts = [0] * n
    used = [float(c) for c in compute_mem]
    for _ in range(STATE_QUANTA):
        best = -1
        best_ratio = math.inf
        for i in range(n):
            if used[i] + quantum > eff_caps[i] * _CAP_SLACK:
                continue
            ratio = used[i] / eff_caps[i]
            if ratio < best_ratio:
                best, best_ratio = i, ratio
        if best < 0:
            raise InfeasibleError(
                "constraint III: optimizer state does not fit next to the "
                "compute footprint on any gpu")
        counts[best] += 1
        used[best] += quantum
    return counts


def _finalize_plan(
    cluster: ClusterSpec,
    model: ModelSpec,
    perf: ClusterPerf,
    choices: Sequence[tuple[int, int]],
    recompute_multiplier: float,
) -> tuple[TrainPlan, list[bool]]:
    """Turn per-gpu (m, l) choices into a full plan with state partitioning."""
    es = model.state_bytes / cluster.n_gpus
    eff_caps = [cluster.effective_capacity(g) for g in cluster.gpus]
    compute_mem = []
    lat: list[LayerLatency | None] = []
    assumed_uneven = []
    for gpu, (m, l), cap in zip(cluster.gpus, choices, eff_caps):
        pm = perf[gpu.profile_key]
        compute_mem.append(pm.memory.eval(m))
        assumed_uneven.append(compute_mem[-1] + es > cap * _CAP_SLACK)
        if m == 0:
            lat.append(None)
        else:
            lat.append(per_gpu_layer_latency(
                gpu, perf, cluster.comm, m, l, es,
                mem_cap_fraction=cluster.mem_cap_fraction,
                recompute_multiplier=recompute_multiplier))

    counts = _greedy_state_quanta(eff_caps, compute_mem, model.state_bytes)
    ratios = [c / STATE_QUANTA for c in counts]
    shard_plan = assign_unit_shards(ratios, model)
    uneven_used = shard_plan.uneven_units > 0

    active = [x for x in lat if x is not None]
    fwd = max(x.t_fwd_ms for x in active)
    bwd = max(x.t_bwd_ms for x in active)
    assignments = tuple(
        GpuAssignment(
            gpu_id=gpu.id,
            microbatch=m,
            num_microbatches=l,
            batch=m * l,
            state_ratio=ratios[i],
            predicted_compute_mem=compute_mem[i],
            predicted_state_mem=ratios[i] * model.state_bytes,
        )
        for i, (gpu, (m, l)) in enumerate(zip(cluster.gpus, choices))
    )
    plan = TrainPlan(
        assignments=assignments,
        predicted_layer_fwd_ms=fwd,
        predicted_layer_bwd_ms=bwd,
        predicted_iteration_ms=model.layers * (fwd + bwd),
        uneven_sharding_used=uneven_used,
        unit_shards=shard_plan,
    )
    return plan, assumed_uneven


def partition_state(
    plan: TrainPlan,
    cluster: ClusterSpec,
    model: ModelSpec,
    perf: ClusterPerf | None = None,
) -> TrainPlan:
    """Re-derive state ratios and unit shards for an existing assignment.

    Latency predictions are carried over unchanged; only the state
    placement fields are recomputed.
    """
    by_id = {a.gpu_id: a for a in plan.assignments}
    if set(by_id) != {g.id for g in cluster.gpus}:
        raise InputError("plan gpus do not match cluster gpus")
    eff_caps = [cluster.effective_capacity(g) for g in cluster.gpus]
    compute_mem = []
    for gpu in cluster.gpus:
        a = by_id[gpu.id]
        if perf is not None:
            compute_mem.append(perf[gpu.profile_key].memory.eval(a.microbatch))
        else:
            compute_mem.append(a.predicted_compute_mem)
    counts = _greedy_state_quanta(eff_caps, compute_mem, model.state_bytes)
    ratios = [c / STATE_QUANTA for c in counts]
    shard_plan = assign_unit_shards(ratios, model)
    assignments = tuple(
        GpuAssignment(
            gpu_id=gpu.id,
            microbatch=by_id[gpu.id].microbatch,
            num_microbatches=by_id[gpu.id].num_microbatches,
            batch=by_id[gpu.id].batch,
            state_ratio=ratios[i],
            predicted_compute_mem=compute_mem[i],
            predicted_state_mem=ratios[i] * model.state_bytes,
        )
        for i, gpu in enumerate(cluster.gpus)
    )
    return TrainPlan(
        assignments=assignments,
        predicted_layer_fwd_ms=plan.predicted_layer_fwd_ms,
        predicted_layer_bwd_ms=plan.predicted_layer_bwd_ms,
        predicted_iteration_ms=plan.predicted_iteration_ms,
        uneven_sharding_used=shard_plan.uneven_units > 0,
        unit_shards=shard_plan,
    )


# ---------------------------------------------------------------------------
# Per-gpu transition tables


def _gpu_pair_table(
    gpu: GpuSpec,
    cluster: ClusterSpec,
    model: ModelSpec,
    perf: ClusterPerf,
    batch: int,
    recompute_multiplier: float,
    upper_bound: float,
) -> tuple[list[tuple[int, np.ndarray]], int, int, int]:
    """All (m, T(m, l) for l=1..) transitions for one gpu.

    Returns (options, memory_pruned, bound_pruned, evaluated) where the
    prune counters are in (m, l) pair units. T is nondecreasing in l, so
    the upper-bound cut keeps a prefix of each l range.
    """
    pm = perf[gpu.profile_key]
    cap = cluster.effective_capacity(gpu)
    es = model.state_bytes / cluster.n_gpus
    options: list[tuple[int, np.ndarray]] = []
    memory_pruned = bound_pruned = evaluated = 0
    for m in range(1, batch + 1):
        l_count = batch // m
        if pm.memory.eval(m) > cap * _CAP_SLACK:
            memory_pruned += l_count
            continue
        uneven = pm.memory.eval(m) + es > cap * _CAP_SLACK
        ag, rs = collective_latency(cluster.comm, uneven)
        tf = pm.fwd.eval(m)
        tbe = pm.bwd.eval(m) + recompute_multiplier * tf
        l = np.arange(1, l_count + 1, dtype=np.float64)
        t = np.maximum(l * tf, ag) + np.maximum(l * tbe, ag + rs)
        if math.isfinite(upper_bound):
            keep = int(np.searchsorted(t, upper_bound, side="right"))
            bound_pruned += l_count - keep
            t = t[:keep]
        if t.size:
            evaluated += t.size
            options.append((m, t))
    return options, memory_pruned, bound_pruned, evaluated


def _feasible_mass(
    cluster: ClusterSpec, model: ModelSpec, perf: ClusterPerf
) -> tuple[float, float]:
    """(intercept_sum + state, shared slope) for the aggregate memory bound.

    Aggregate compute memory for microbatch mass k is bounded by
    sum of intercepts + shared_slope * k; adding the full optimizer
    state gives the left side of the aggregate constraint.
    """
    slope = perf.shared_memory_slope(cluster)
    intercepts = sum(perf[g.profile_key].memory.eval(0) for g in cluster.gpus)
    return intercepts + model.state_bytes, slope


def _aggregate_ok(base: float, slope: float, mass: int, total_cap: float) -> bool:
    return base + slope * mass <= total_cap * _CAP_SLACK


# ---------------------------------------------------------------------------
# Greedy seed for the upper-bound prune


def _best_factorization(
    gpu: GpuSpec,
    cluster: ClusterSpec,
    model: ModelSpec,
    perf: ClusterPerf,
    b: int,
    recompute_multiplier: float,
) -> tuple[float, int, int] | None:
    es = model.state_bytes / cluster.n_gpus
    best = None
    for m in range(1, b + 1):
        if b % m:
            continue
        try:
            lat = per_gpu_layer_latency(
                gpu, perf, cluster.comm, m, b // m, es,
                mem_cap_fraction=cluster.mem_cap_fraction,
                recompute_multiplier=recompute_multiplier)
        except InfeasibleError:
            continue
        if best is None or lat.total_ms < best[0]:
            best = (lat.total_ms, m, b // m)
    return best


def _greedy_upper_bound(
    cluster: ClusterSpec,
    model: ModelSpec,
    perf: ClusterPerf,
    recompute_multiplier: float,
) -> float:
    """Latency of one feasible plan, or inf when the heuristic finds none.

    Used only to prune DP transitions; any feasible plan's latency is a
    safe bound because transitions costlier than it cannot lie on an
    optimal path.
    """
    n, batch = cluster.n_gpus, model.global_batch
    if batch < n:
        return math.inf
    speeds = []
    for gpu in cluster.gpus:
        pm = perf[gpu.profile_key]
        per_sample = pm.fwd.eval(1) + pm.bwd.eval(1) + recompute_multiplier * pm.fwd.eval(1)
        speeds.append(1.0 / per_sample)
    total_speed = sum(speeds)
    bs = [max(1, int(batch * s / total_speed)) for s in speeds]
    order = sorted(range(n), key=lambda i: -speeds[i])
    idx = 0
    while sum(bs) != batch:  # settle rounding drift on the fastest gpus
        i = order[idx % n]
        if sum(bs) < batch:
            bs[i] += 1
        elif bs[i] > 1:
            bs[i] -= 1
        idx += 1
        if idx > 4 * n + batch:
            return math.inf

    latency = 0.0
    mass = 0
    for gpu, b in zip(cluster.gpus, bs):
        best = _best_factorization(gpu, cluster, model, perf, b, recompute_multiplier)
        if best is None:
            return math.inf
        latency = max(latency, best[0])
        mass += best[1]
    base, slope = _feasible_mass(cluster, model, perf)
    if not _aggregate_ok(base, slope, mass, cluster.total_effective_capacity()):
        return math.inf
    return latency


# ---------------------------------------------------------------------------
# The DP itself


def _update_rows(
    prev: np.ndarray,
    cur: np.ndarray,
    cm: np.ndarray,
    cl: np.ndarray,
    options: list[tuple[int, np.ndarray]],
    r0: int,
    r1: int,
    size: int,
) -> None:
    """Apply every (m, l) transition to target rows [r0, r1).

    Rows are the j (samples assigned) axis. Each cell takes the first
    strict improvement in ascending (m, l) order, which makes ties
    resolve to the lexicographically smallest choice.
    """
    for m, t_arr in options:
        src_cols = prev[:, : size - m]
        for li, t in enumerate(t_arr):
            b = m * (li + 1)
            lo = max(r0, b)
            if lo >= r1:
                break
            cand = np.maximum(src_cols[lo - b : r1 - b, :], t)
            dst = cur[lo:r1, m:]
            better = cand < dst
            if better.any():
                dst[better] = cand[better]
                cm[lo:r1, m:][better] = m
                cl[lo:r1, m:][better] = li + 1

def dp_optimize_detailed(
    cluster: ClusterSpec,
    model: ModelSpec,
    perf: ClusterPerf,
    *,
    allow_idle: bool = False,
    recompute_multiplier: float = 1.0,
    threads: int | None = None,
    prune: bool = True,
    keep_table: bool = False,
) -> OptimizeResult:
    """Exact DP over (gpu, samples, microbatch mass) with pruning counters."""
    t_start = time.perf_counter()
    perf.validate_for(cluster)
    n, batch = cluster.n_gpus, model.global_batch
    if batch > _DP_MAX_BATCH:
        raise InputError(f"global batch {batch} exceeds supported maximum {_DP_MAX_BATCH}")
    if batch < n and not allow_idle:
        raise InfeasibleError(
            f"constraint I: global batch {batch} < {n} gpus; every gpu needs at "
            "least one sample (enable idle gpus to drop some)")
    workers = _resolve_threads(threads)

    upper_bound = math.inf
    if prune:
        upper_bound = _greedy_upper_bound(cluster, model, perf, recompute_multiplier)

    size = batch + 1
    pairs_total = n * sum(batch // m for m in range(1, batch + 1))
    memory_pruned = bound_pruned = evaluated = 0
    cell_transitions = 0
    states_finite = 0

    prev = np.full((size, size), np.inf)
    prev[0, 0] = 0.0
    choices_m: list[np.ndarray] = []
    choices_l: list[np.ndarray] = []
    slabs = [prev.copy()] if keep_table else None

    row_blocks: list[tuple[int, int]]
    if workers > 1 and size >= 64:
        step = math.ceil(size / (workers * 4))
        row_blocks = [(r, min(r + step, size)) for r in range(0, size, step)]
    else:
        row_blocks = [(0, size)]

    pool = ThreadPoolExecutor(max_workers=workers) if len(row_blocks) > 1 else None
    try:
        for gpu in cluster.gpus:
            options, mp, bp, ev = _gpu_pair_table(
                gpu, cluster, model, perf, batch, recompute_multiplier, upper_bound)
            memory_pruned += mp
            bound_pruned += bp
            evaluated += ev
            if not options and not allow_idle:
                raise InfeasibleError(
                    f"constraint II: gpu {gpu.id} cannot fit any microbatch size "
                    "within its effective capacity")
            for m, t_arr in options:
                for li in range(t_arr.size):
                    b = m * (li + 1)
                    cell_transitions += (size - b) * (size - m)

            cm = np.full((size, size), -1, dtype=np.int16)
            cl = np.full((size, size), -1, dtype=np.int16)
            if allow_idle:
                cur = prev.copy()
                reachable = np.isfinite(prev)
                cm[reachable] = 0
                cl[reachable] = 0
            else:
                cur = np.full((size, size), np.inf)

            if pool is not None:
                futures = [
                    pool.submit(_update_rows, prev, cur, cm, cl, options, r0, r1, size)
                    for r0, r1 in row_blocks
                ]
                for f in futures:
                    f.result()
            else:
                _update_rows(prev, cur, cm, cl, options, 0, size, size)

            choices_m.append(cm)
            choices_l.append(cl)
            states_finite += int(np.isfinite(cur).sum())
            prev = cur
            if slabs is not None:
                slabs.append(cur.copy())
    finally:
        if pool is not None:
            pool.shutdown(wait=False)

    # answer: min over feasible microbatch mass, smallest mass on ties
    base, slope = _feasible_mass(cluster, model, perf)
    total_cap = cluster.total_effective_capacity()
    final_row = prev[batch, :]
    best_k = -1
    best_val = math.inf
    saw_finite = False
    for k in range(size):
        v = final_row[k]
        if not math.isfinite(v):
            continue
        saw_finite = True
        if not _aggregate_ok(base, slope, k, total_cap):
            continue
        if v < best_val:
            best_val = v
            best_k = k
    if best_k < 0:
        if saw_finite:
            raise InfeasibleError(
                "constraint III: every batch split overflows the aggregate "
                "effective capacity once optimizer state is added")
        raise InfeasibleError(
            "constraints I/II: no assignment covers the global batch within "
            "per-gpu memory capacities")

    # backtrack from the chosen cell
    choices: list[tuple[int, int]] = []
    j, k = batch, best_k
    for i in range(n - 1, -1, -1):
        m = int(choices_m[i][j, k])
        l = int(choices_l[i][j, k])
        if m < 0:
            raise RuntimeError("backtrack reached an unreached cell")
        choices.append((m, l))
        j -= m * l
        k -= m
    choices.reverse()
    assert j == 0 and k == 0

    plan, assumed_uneven = _finalize_plan(cluster, model, perf, choices, recompute_multiplier)
    realized = plan.uneven_sharding_used
    report = OptimizerReport(
        n_gpus=n,
        batch=batch,
        allow_idle=allow_idle,
        threads=workers,
        wall_time_s=time.perf_counter() - t_start,
        transitions_raw=complexity_budget(n, batch),
        pairs_total=pairs_total,
        pairs_memory_pruned=memory_pruned,
        pairs_bound_pruned=bound_pruned,
        pairs_evaluated=evaluated,
        cell_transitions_evaluated=cell_transitions,
        states_finite=states_finite,
        upper_bound_ms=upper_bound,
        chosen_mass=best_k,
        optimal_latency_ms=best_val,
        assumed_uneven=assumed_uneven,
        realized_uneven=realized,
        assumption_matched=(any(assumed_uneven) == realized),
    )
    table = None
    if keep_table:
        table = DpTable(
            batch=batch,
            d_final=prev,
            choices_m=choices_m,
            choices_l=choices_l,
            d_full=np.stack(slabs) if slabs is not None else None,
        )
    return OptimizeResult(plan=plan, report=report, table=table)


def dp_optimize(
    cluster: ClusterSpec,
    model: ModelSpec,
    perf: ClusterPerf,
    *,
    allow_idle: bool = False,
    recompute_multiplier: float = 1.0,
    threads: int | None = None,
    prune: bool = True,
) -> TrainPlan:
    """Optimal plan for the cluster and model; see dp_optimize_detailed."""
    return dp_optimize_detailed(
        cluster, model, perf,
        allow_idle=allow_idle,
        recompute_multiplier=recompute_multiplier,
        threads=threads,
        prune=prune,
    ).plan


# ---------------------------------------------------------------------------
# Brute-force oracle


def brute_force_optimize(
    cluster: ClusterSpec,
    model: ModelSpec,
    perf: ClusterPerf,
    *,
    allow_idle: bool = False,
    recompute_multiplier: float = 1.0,
) -> TrainPlan:
    """Exhaustive reference optimizer for desk-scale instances.

    Shares the cost model and tie-breaking with dp_optimize: least
    latency, then least microbatch mass, then, from the highest-indexed
    gpu down, the smallest (m, l) that still attains the exact optimum
    of the remaining lower-gpu subproblem. Enumerates every reachable
    (samples, mass) prefix state with no pruning.
    """
    perf.validate_for(cluster)
    n, batch = cluster.n_gpus, model.global_batch
    if n > BRUTE_FORCE_MAX_GPUS or batch > BRUTE_FORCE_MAX_BATCH:
        raise SizeGuardError(
            f"brute force limited to {BRUTE_FORCE_MAX_GPUS} gpus and batch "
            f"{BRUTE_FORCE_MAX_BATCH}; got {n} gpus, batch {batch}")
    if batch < n and not allow_idle:
        raise InfeasibleError(
            f"constraint I: global batch {batch} < {n} gpus; every gpu needs at "
            "least one sample (enable idle gpus to drop some)")

    es = model.state_bytes / n
    # per gpu: every (m, l, T) with m * l <= batch, ascending in (m, l) so
    # the reconstruction below resolves ties exactly like the dp cells do
    per_gpu: list[list[tuple[int, int, float]]] = []
    for gpu in cluster.gpus:
        entries: list[tuple[int, int, float]] = []
        if allow_idle:
            entries.append((0, 0, 0.0))
        for m in range(1, batch + 1):
            for l in range(1, batch // m + 1):
                try:
                    lat = per_gpu_layer_latency(
                        gpu, perf, cluster.comm, m, l, es,
                        mem_cap_fraction=cluster.mem_cap_fraction,
                        recompute_multiplier=recompute_multiplier)
                except InfeasibleError:
                    break  # the memory gate depends on m only
                entries.append((m, l, lat.total_ms))
        per_gpu.append(entries)

    # exact minima of the prefix maximum for every (samples, mass) state
    minima: list[dict[tuple[int, int], float]] = [{(0, 0): 0.0}]
    for entries in per_gpu:
        nxt: dict[tuple[int, int], float] = {}
        for (j, k), v in minima[-1].items():
            for m, l, t in entries:
                if j + m * l > batch:
                    continue
                key = (j + m * l, k + m)
                cand = max(v, t)
                if cand < nxt.get(key, math.inf):
                    nxt[key] = cand
        minima.append(nxt)

    base, slope = _feasible_mass(cluster, model, perf)
    total_cap = cluster.total_effective_capacity()
    best_k = -1
    best_val = math.inf
    saw_finite = False
    for k in range(batch + 1):
        v = minima[n].get((batch, k))
        if v is None:
            continue
        saw_finite = True
        if not _aggregate_ok(base, slope, k, total_cap):
            continue
        if v < best_val:
            best_val = v
            best_k = k
    if best_k < 0:
        if saw_finite:
            raise InfeasibleError(
                "constraint III: every batch split overflows the aggregate "
                "effective capacity once optimizer state is added")
        raise InfeasibleError(
            "constraints I/II: no assignment covers the global batch within "
            "per-gpu memory capacities")

    choices: list[tuple[int, int]] = []
    j, k = batch, best_k
    for i in range(n - 1, -1, -1):
        target = minima[i + 1][(j, k)]
        sub = minima[i]
        for m, l, t in per_gpu[i]:
            v = sub.get((j - m * l, k - m))
            if v is not None and max(v, t) == target:
                choices.append((m, l))
                j -= m * l
                k -= m
                break
        else:
            raise RuntimeError("backtrack reached an unreached state")
    choices.reverse()

    plan, _ = _finalize_plan(cluster, model, perf, choices, recompute_multiplier)
    return plan
