"""Event-driven simulation of one training iteration under a plan.

Per gpu the simulator runs one compute stream, one host-to-device and
one device-to-host copy stream; collectives serialize on a single
shared network resource in issue order. Units run in order: allgather,
then the unit's microbatches; the next unit's allgather is issued when
a unit begins. The backward pass mirrors this with a reducescatter
after each unit's last microbatch, and activation checkpointing adds
one recompute ahead of each backward microbatch.

With offloading enabled, boundary activations and activation gradients
move to host memory right after they are produced and are prefetched
back one microbatch ahead of their consumer, overlapping the copies
with compute. The residency ledger counts a buffer on the gpu from
production (or prefetch completion) to consumption (or offload
completion); checkpoint storage that sits parked across the pass is
part of the fitted memory model, not this ledger.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable

from .core import (
    ClusterSpec,
    InputError,
    ModelSpec,
    TrainPlan,
    validate_plan,
)
from .perf import ClusterPerf, collective_latency

DEFAULT_ACTIVATION_BYTES_PER_SAMPLE = 2 * 1024 * 1024

COMPUTE_KINDS = ("fwd_compute", "recompute", "bwd_compute")
COLLECTIVE_KINDS = ("allgather", "reducescatter")
H2D_KINDS = ("prefetch_act", "prefetch_grad")
D2H_KINDS = ("offload_act", "offload_grad")


@dataclass(frozen=True)
class Event:
    """One scheduled interval. Transfer events carry the compute event
    they serve (consumer for prefetches, producer for offloads)."""

    gpu_id: str
    kind: str
    unit: int
    microbatch: int  # 0 for collectives
    phase: str  # "fwd" or "bwd"
    start_ms: float
    end_ms: float

    @property
    def duration_ms(self) -> float:
        return self.end_ms - self.start_ms


@dataclass(frozen=True)
class SimConfig:
    plan: TrainPlan
    cluster: ClusterSpec
    model: ModelSpec
    perf: ClusterPerf
    offload_enabled: bool = False
    offload_bandwidth: float = math.inf  # bytes per ms
    activation_bytes_per_sample: float = DEFAULT_ACTIVATION_BYTES_PER_SAMPLE
    recompute_multiplier: float = 1.0

    def __post_init__(self) -> None:
        if self.offload_bandwidth <= 0:
            raise InputError("offload_bandwidth must be > 0")
        if self.activation_bytes_per_sample <= 0:
            raise InputError("activation_bytes_per_sample must be > 0")
        if self.recompute_multiplier < 0:
            raise InputError("recompute_multiplier must be >= 0")


@dataclass
class SimResult:
    iteration_ms: float
    per_layer_fwd_ms: float
    per_layer_bwd_ms: float
    peak_gpu_memory: dict[str, float]  # bytes, incl. fitted model + state
    peak_cpu_buffer: dict[str, float]  # bytes parked on the host
    peak_activation_bytes: dict[str, float]  # boundary-activation ledger
    exposed_comm_ms: dict[str, float]
    exposed_transfer_ms: dict[str, float]
    trace: tuple[Event, ...]


@dataclass(frozen=True)
class CrosscheckReport:
    predicted_ms: float
    simulated_ms: float
    rel_error: float


def _peak(intervals: Iterable[tuple[float, float, float]]) -> float:
    """Max simultaneous size over [start, end) intervals.

    Frees sort before allocations at the same timestamp: a buffer handed
    from producer to consumer at one instant is counted once.
    """
    points: list[tuple[float, float]] = []
    for start, end, size in intervals:
        if end < start:
            raise RuntimeError("negative-length residency interval")
        if end == start:
            continue
        points.append((start, size))
        points.append((end, -size))
    points.sort(key=lambda p: (p[0], p[1]))
    level = peak = 0.0
    for _, delta in points:
        level += delta
        peak = max(peak, level)
    return peak


class _Walk:
    """Scheduler state for one simulated iteration."""

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        plan, cluster = cfg.plan, cfg.cluster
        self.gpus = cluster.gpus
        self.layers = cfg.model.layers
        self.ag, self.rs = collective_latency(cluster.comm, plan.uneven_sharding_used)

        self.m: dict[str, int] = {}
        self.l: dict[str, int] = {}
        self.tf: dict[str, float] = {}
        self.trec: dict[str, float] = {}
        self.tb: dict[str, float] = {}
        self.xfer: dict[str, float] = {}
        self.item: dict[str, float] = {}  # bytes of one boundary buffer
        for gpu in self.gpus:
            a = plan.assignment_for(gpu.id)
            pm = cfg.perf[gpu.profile_key]
            self.m[gpu.id] = a.microbatch
            self.l[gpu.id] = a.num_microbatches
            if a.idle:
                self.tf[gpu.id] = self.trec[gpu.id] = self.tb[gpu.id] = 0.0
                self.item[gpu.id] = 0.0
            else:
                self.tf[gpu.id] = pm.fwd.eval(a.microbatch)
                self.trec[gpu.id] = cfg.recompute_multiplier * self.tf[gpu.id]
                self.tb[gpu.id] = pm.bwd.eval(a.microbatch)
                self.item[gpu.id] = a.microbatch * cfg.activation_bytes_per_sample
            self.xfer[gpu.id] = (0.0 if math.isinf(cfg.offload_bandwidth)
                                 else self.item[gpu.id] / cfg.offload_bandwidth)

        self.events: list[Event] = []
        self.cfree = {g.id: 0.0 for g in self.gpus}
        self.h2d_free = {g.id: 0.0 for g in self.gpus}
        self.d2h_free = {g.id: 0.0 for g in self.gpus}
        self.net_free = 0.0
        self.exposed_comm = {g.id: 0.0 for g in self.gpus}
        self.exposed_transfer = {g.id: 0.0 for g in self.gpus}

        # residency ledgers: (start, end, bytes)
        self.act_iv: dict[str, list[tuple[float, float, float]]] = {g.id: [] for g in self.gpus}
        self.grad_iv: dict[str, list[tuple[float, float, float]]] = {g.id: [] for g in self.gpus}
        self.cpu_iv: dict[str, list[tuple[float, float, float]]] = {g.id: [] for g in self.gpus}

        # per-gpu bookkeeping keyed by (unit, microbatch)
        self.fwd_in_ready: dict[str, dict[tuple[int, int], float]] = {g.id: {} for g in self.gpus}
        self.bwd_act_ready: dict[str, dict[tuple[int, int], float]] = {g.id: {} for g in self.gpus}
        self.grad_in_ready: dict[str, dict[tuple[int, int], float]] = {g.id: {} for g in self.gpus}
        self.cpu_act_ready: dict[str, dict[tuple[int, int], float]] = {g.id: {} for g in self.gpus}
        self.cpu_grad_ready: dict[str, dict[tuple[int, int], float]] = {g.id: {} for g in self.gpus}
        self.cpu_act_free: dict[str, dict[tuple[int, int], float]] = {g.id: {} for g in self.gpus}
        self.act_open: dict[str, dict[tuple[int, int], float]] = {g.id: {} for g in self.gpus}
        self.grad_open: dict[str, dict[tuple[int, int], float]] = {g.id: {} for g in self.gpus}

        self.first_fwd_start: dict[tuple[str, int], float] = {}
        self.first_bwd_start: dict[tuple[str, int], float] = {}
        self.last_fwd_end: dict[str, float] = {}
        self.last_bwd_end: dict[str, float] = {g.id: 0.0 for g in self.gpus}
        self.ag_end: dict[int, float] = {}
        self.agb_end: dict[int, float] = {}
        self.turn_start = 0.0

    # -- helpers ----------------------------------------------------------

    def _collective(self, kind: str, unit: int, phase: str,
                    issue_points: list[float]) -> tuple[float, float]:
        dur = self.ag if kind == "allgather" else self.rs
        start = max(self.net_free, max(issue_points))
        end = start + dur
        self.net_free = end
        for gpu in self.gpus:
            self.events.append(Event(gpu.id, kind, unit, 0, phase, start, end))
        return start, end

    def _h2d(self, g: str, unit: int, mb: int, phase: str, kind: str,
             issue: float, src_ready: float) -> float:
        start = max(self.h2d_free[g], issue, src_ready)
        end = start + self.xfer[g]
        self.h2d_free[g] = end
        self.events.append(Event(g, kind, unit, mb, phase, start, end))
        return end

    def _d2h(self, g: str, unit: int, mb: int, phase: str, kind: str, ready: float) -> float:
        start = max(self.d2h_free[g], ready)
        end = start + self.xfer[g]
        self.d2h_free[g] = end
        self.events.append(Event(g, kind, unit, mb, phase, start, end))
        return end

    def _attribute_stall(self, g: str, base: float, coll: float | None, transfer: float | None) -> None:
        c = coll if coll is not None else -math.inf
        t = transfer if transfer is not None else -math.inf
        self.exposed_comm[g] += max(0.0, c - max(base, t))
        self.exposed_transfer[g] += max(0.0, t - max(base, c))

    def _active(self) -> list:
        return [g for g in self.gpus if self.m[g.id] > 0]

    # -- forward ----------------------------------------------------------

    def _forward_unit(self, u: int) -> None:
        offload = self.cfg.offload_enabled
        for gpu in self._active():
            g = gpu.id
            size = self.item[g]
            for j in range(1, self.l[g] + 1):
                inr = self.fwd_in_ready[g].get((u, j)) if (offload and u > 1) else None
                base = self.cfree[g]
                start = max(base, self.ag_end[u], inr if inr is not None else 0.0)
                self._attribute_stall(g, base, self.ag_end[u], inr)
                end = start + self.tf[g]
                self.cfree[g] = end
                self.events.append(Event(g, "fwd_compute", u, j, "fwd", start, end))
                self.last_fwd_end[g] = end
                if j == 1:
                    self.first_fwd_start[(g, u)] = start

                if offload:
                    if u > 1:  # prefetched input leaves with its consumer
                        arrived = self.fwd_in_ready[g][(u, j)]
                        self.act_iv[g].append((arrived, end, size))
                    off_end = self._d2h(g, u, j, "fwd", "offload_act", end)
                    self.act_iv[g].append((end, off_end, size))
                    self.cpu_act_ready[g][(u, j)] = off_end
                else:
                    if u > 1:  # consumed the previous unit's output
                        self.act_iv[g].append((self.act_open[g].pop((u - 1, j)), end, size))
                    self.act_open[g][(u, j)] = end

                if offload:
                    self._issue_fwd_prefetch(g, u, j, start)

    def _issue_fwd_prefetch(self, g: str, u: int, j: int, issue: float) -> None:
        """Prefetch the input of the next compute microbatch in order."""
        if j < self.l[g]:
            v, jj = u, j + 1
            if v > 1:
                end = self._h2d(g, v, jj, "fwd", "prefetch_act",
                                issue, self.cpu_act_ready[g][(v - 1, jj)])
                self.fwd_in_ready[g][(v, jj)] = end
        elif u < self.layers:
            end = self._h2d(g, u + 1, 1, "fwd", "prefetch_act",
                            issue, self.cpu_act_ready[g][(u, 1)])
            self.fwd_in_ready[g][(u + 1, 1)] = end
        else:  # turnaround: first backward block recomputes from A[L-1, 1]
            if self.layers > 1:
                end = self._h2d(g, self.layers, 1, "bwd", "prefetch_act",
                                issue, self.cpu_act_ready[g][(self.layers - 1, 1)])
                self.bwd_act_ready[g][(self.layers, 1)] = end

    # -- backward ---------------------------------------------------------

    def _backward_unit(self, u: int) -> None:
        offload = self.cfg.offload_enabled
        for gpu in self._active():
            g = gpu.id
            size = self.item[g]
            for j in range(1, self.l[g] + 1):
                act_in = self.bwd_act_ready[g].get((u, j)) if (offload and u > 1) else None
                base = self.cfree[g]
                ra_start = max(base, self.agb_end[u], act_in if act_in is not None else 0.0)
                self._attribute_stall(g, base, self.agb_end[u], act_in)
                ra_end = ra_start + self.trec[g]
                self.events.append(Event(g, "recompute", u, j, "bwd", ra_start, ra_end))
                if j == 1:
                    self.first_bwd_start[(g, u)] = ra_start

                grad_in = self.grad_in_ready[g].get((u, j)) if (offload and u < self.layers) else None
                b_start = max(ra_end, grad_in if grad_in is not None else 0.0)
                self._attribute_stall(g, ra_end, None, grad_in)
                b_end = b_start + self.tb[g]
                self.cfree[g] = b_end
                self.events.append(Event(g, "bwd_compute", u, j, "bwd", b_start, b_end))
                self.last_bwd_end[g] = b_end

                if offload:
                    if u > 1:
                        self.act_iv[g].append((self.bwd_act_ready[g][(u, j)], b_end, size))
                        self.cpu_act_free[g][(u - 1, j)] = self.bwd_act_ready[g][(u, j)]
                    if u < self.layers:
                        self.grad_iv[g].append((self.grad_in_ready[g][(u, j)], b_end, size))
                    if u > 1:  # offload the produced activation gradient
                        off_end = self._d2h(g, u, j, "bwd", "offload_grad", b_end)
                        self.grad_iv[g].append((b_end, off_end, size))
                        self.cpu_grad_ready[g][(u - 1, j)] = off_end
                else:
                    if u > 1:  # recompute window for the checkpointed input
                        self.act_iv[g].append((ra_start, b_end, size))
                    if u < self.layers:  # upstream gradient produced earlier
                        self.grad_iv[g].append((self.grad_open[g].pop((u, j)), b_end, size))
                    if u > 1:
                        self.grad_open[g][(u - 1, j)] = b_end
                    if u == self.layers:  # the last unit's outputs drain here
                        self.act_iv[g].append((self.act_open[g].pop((u, j)), b_start, size))

                if offload:
                    self._issue_bwd_prefetches(g, u, j, ra_start, b_start)

    def _issue_bwd_prefetches(self, g: str, u: int, j: int, ra_start: float, b_start: float) -> None:
        if j < self.l[g]:
            v, jj = u, j + 1
        elif u > 1:
            v, jj = u - 1, 1
        else:
            return
        if v > 1:  # next block's recompute input
            end = self._h2d(g, v, jj, "bwd", "prefetch_act",
                            ra_start, self.cpu_act_ready[g][(v - 1, jj)])
            self.bwd_act_ready[g][(v, jj)] = end
        if v < self.layers:  # next block's upstream gradient
            end = self._h2d(g, v, jj, "bwd", "prefetch_grad",
                            b_start, self.cpu_grad_ready[g][(v, jj)])
            self.grad_in_ready[g][(v, jj)] = end

    # -- main -------------------------------------------------------------

    def run(self) -> SimResult:
        layers = self.layers
        # cold start: the first allgather is not overlapped with anything
        _, self.ag_end[1] = self._collective("allgather", 1, "fwd", [0.0])
        for u in range(1, layers + 1):
            self._forward_unit(u)
            if u < layers:
                issue = [self.first_fwd_start.get((g.id, u), self.ag_end[u])
                         for g in self.gpus]
                _, self.ag_end[u + 1] = self._collective("allgather", u + 1, "fwd", issue)
            else:
                # re-gather the last unit for its backward pass; a rank can only
                # enter once its own forward work has drained
                issue = [self.last_fwd_end.get(g.id, self.ag_end[u]) for g in self.gpus]
                self.turn_start, self.agb_end[layers] = self._collective(
                    "allgather", layers, "bwd", issue)

        for u in range(layers, 0, -1):
            self._backward_unit(u)
            issue = [self.first_bwd_start.get((g.id, u), self.agb_end[u]) for g in self.gpus]
            if u > 1:
                _, self.agb_end[u - 1] = self._collective("allgather", u - 1, "bwd", issue)
            rs_issue = [
                self.last_bwd_end[g.id] if self.m[g.id] > 0 else self.agb_end[u]
                for g in self.gpus
            ]
            self._collective("reducescatter", u, "bwd", rs_issue)

        iteration = max(e.end_ms for e in self.events)

        # host-side copies: activations live until their last prefetch back
        if self.cfg.offload_enabled:
            for gpu in self._active():
                g = gpu.id
                for key, ready in self.cpu_act_ready[g].items():
                    freed = self.cpu_act_free[g].get(key, iteration)
                    self.cpu_iv[g].append((ready, max(freed, ready), self.item[g]))
                for key, ready in self.cpu_grad_ready[g].items():
                    freed = self.grad_in_ready[g].get(key, iteration)
                    self.cpu_iv[g].append((ready, max(freed, ready), self.item[g]))

        per_layer_fwd, per_layer_bwd = self._per_layer_metrics()

        peak_gpu: dict[str, float] = {}
        peak_cpu: dict[str, float] = {}
        peak_act: dict[str, float] = {}
        for gpu in self.gpus:
            g = gpu.id
            a = self.cfg.plan.assignment_for(g)
            ledger = _peak(self.act_iv[g] + self.grad_iv[g]) + a.predicted_state_mem
            fitted = a.predicted_compute_mem + a.predicted_state_mem
            peak_gpu[g] = max(fitted, ledger)
            peak_cpu[g] = _peak(self.cpu_iv[g])
            peak_act[g] = _peak(self.act_iv[g])

        trace = tuple(sorted(
            self.events,
            key=lambda e: (e.start_ms, e.gpu_id, e.kind, e.phase, e.unit, e.microbatch)))
        return SimResult(
            iteration_ms=iteration,
            per_layer_fwd_ms=per_layer_fwd,
            per_layer_bwd_ms=per_layer_bwd,
            peak_gpu_memory=peak_gpu,
            peak_cpu_buffer=peak_cpu,
            peak_activation_bytes=peak_act,
            exposed_comm_ms=dict(self.exposed_comm),
            exposed_transfer_ms=dict(self.exposed_transfer),
            trace=trace,
        )

    def _per_layer_metrics(self) -> tuple[float, float]:
        layers = self.layers
        active = self._active()
        s = {u: max(self.first_fwd_start[(g.id, u)] for g in active)
             for u in range(1, layers + 1)}
        bs = {u: max(self.first_bwd_start[(g.id, u)] for g in active)
              for u in range(1, layers + 1)}
        s[layers + 1] = self.turn_start  # forward drains into the re-gather
        fwd = max(s[u + 1] - s[u] for u in range(1, layers + 1))
        if layers > 1:
            bwd = max(bs[u - 1] - bs[u] for u in range(layers, 1, -1))
        else:  # single unit: no steady-state gap to measure, use the span
            bwd = max(self.last_bwd_end[g.id] - bs[1] for g in active)
        return fwd, bwd


def simulate_iteration(cfg: SimConfig) -> SimResult:
    """Simulate one iteration; the plan must validate against the inputs."""
    violations = validate_plan(cfg.plan, cfg.cluster, cfg.model, cfg.perf.memory_models())
    if violations:
        raise InputError("plan fails validation: " + "; ".join(str(v) for v in violations))
    result = _Walk(cfg).run()
    problems = lint_trace(result, cfg)
    if problems:
        raise RuntimeError("trace linter found causality violations: " + "; ".join(problems))
    return result


def peak_activation_memory(cfg: SimConfig) -> dict[str, float]:
    """Per-gpu peak boundary-activation residency in bytes."""
    return simulate_iteration(cfg).peak_activation_bytes


def crosscheck_optimizer(plan: TrainPlan, cfg: SimConfig) -> CrosscheckReport:
    """Compare the plan's predicted iteration latency with a simulation."""
    if cfg.plan is not plan:
        cfg = replace(cfg, plan=plan)
    result = simulate_iteration(cfg)
    predicted = plan.predicted_iteration_ms
    rel = abs(result.iteration_ms - predicted) / result.iteration_ms
    return CrosscheckReport(predicted, result.iteration_ms, rel)


# ---------------------------------------------------------------------------
# Trace linter


def lint_trace(result: SimResult, cfg: SimConfig) -> list[str]:
    """Structural causality checks over a finished trace."""
    problems: list[str] = []
    by_gpu_kind: dict[tuple[str, str], list[Event]] = {}
    for e in result.trace:
        if e.end_ms < e.start_ms or e.start_ms < 0:
            problems.append(f"bad interval on {e.kind} u{e.unit} j{e.microbatch}")
        by_gpu_kind.setdefault((e.gpu_id, e.kind), []).append(e)

    def stream(gpu_id: str, kinds: tuple[str, ...]) -> list[Event]:
        evs = [e for k in kinds for e in by_gpu_kind.get((gpu_id, k), [])]
        return sorted(evs, key=lambda e: (e.start_ms, e.end_ms))

    for gpu in cfg.cluster.gpus:
        for kinds, label in ((COMPUTE_KINDS, "compute"), (H2D_KINDS, "h2d"), (D2H_KINDS, "d2h")):
            evs = stream(gpu.id, kinds)
            for a, b in zip(evs, evs[1:]):
                if b.start_ms < a.end_ms - 1e-9:
                    problems.append(f"{label} overlap on {gpu.id} at {b.start_ms}")

    # collectives: identical window on every gpu, serialized on the wire
    coll: dict[tuple[str, str, int], list[Event]] = {}
    for e in result.trace:
        if e.kind in COLLECTIVE_KINDS:
            coll.setdefault((e.kind, e.phase, e.unit), []).append(e)
    windows = []
    for key, evs in coll.items():
        if len(evs) != cfg.cluster.n_gpus:
            problems.append(f"collective {key} missing ranks")
        if len({(e.start_ms, e.end_ms) for e in evs}) != 1:
            problems.append(f"collective {key} window differs across ranks")
        windows.append((evs[0].start_ms, evs[0].end_ms, key))
    windows.sort()
    for (s0, e0, k0), (s1, e1, k1) in zip(windows, windows[1:]):
        if s1 < e0 - 1e-9:
            problems.append(f"collectives {k0} and {k1} overlap on the wire")

    # compute gated by its collective and its prefetches
    index: dict[tuple[str, str, str, int, int], Event] = {
        (e.gpu_id, e.kind, e.phase, e.unit, e.microbatch): e
        for e in result.trace if e.kind not in COLLECTIVE_KINDS
    }

    def coll_end(kind: str, phase: str, unit: int) -> float:
        return coll[(kind, phase, unit)][0].end_ms

    for e in result.trace:
        g, u, j = e.gpu_id, e.unit, e.microbatch
        if e.kind == "fwd_compute":
            if e.start_ms < coll_end("allgather", "fwd", u) - 1e-9:
                problems.append(f"F u{u} j{j} on {g} starts before its allgather")
            pf = index.get((g, "prefetch_act", "fwd", u, j))
            if pf and e.start_ms < pf.end_ms - 1e-9:
                problems.append(f"F u{u} j{j} on {g} starts before its input prefetch")
        elif e.kind == "recompute":
            if e.start_ms < coll_end("allgather", "bwd", u) - 1e-9:
                problems.append(f"RA u{u} j{j} on {g} starts before its allgather")
            pf = index.get((g, "prefetch_act", "bwd", u, j))
            if pf and e.start_ms < pf.end_ms - 1e-9:
                problems.append(f"RA u{u} j{j} on {g} starts before its input prefetch")
        elif e.kind == "bwd_compute":
            ra = index.get((g, "recompute", "bwd", u, j))
            if ra and e.start_ms < ra.end_ms - 1e-9:
                problems.append(f"B u{u} j{j} on {g} starts before its recompute")
            pf = index.get((g, "prefetch_grad", "bwd", u, j))
            if pf and e.start_ms < pf.end_ms - 1e-9:
                problems.append(f"B u{u} j{j} on {g} starts before its gradient prefetch")
        elif e.kind in ("offload_act", "offload_grad"):
            src_kind = "fwd_compute" if e.kind == "offload_act" else "bwd_compute"
            src = index.get((g, src_kind, e.phase, u, j))
            if src and e.start_ms < src.end_ms - 1e-9:
                problems.append(f"{e.kind} u{u} j{j} on {g} starts before its producer")

    # reducescatter waits for the unit's last backward microbatch everywhere
    for (kind, phase, unit), evs in coll.items():
        if kind != "reducescatter":
            continue
        for gpu in cfg.cluster.gpus:
            last = max((e.end_ms for e in result.trace
                        if e.gpu_id == gpu.id and e.kind == "bwd_compute" and e.unit == unit),
                       default=None)
            if last is not None and evs[0].start_ms < last - 1e-9:
                problems.append(f"reducescatter u{unit} starts before {gpu.id} finished")
    return problems


# ---------------------------------------------------------------------------
# Trace export


def trace_to_jsonl(result: SimResult, path: str | Path) -> None:
    """One event per line, schema-stable for downstream tooling."""
    with open(path, "w") as fh:
        for e in result.trace:
            fh.write(json.dumps({
                "gpu": e.gpu_id,
                "kind": e.kind,
                "unit": e.unit,
                "microbatch": e.microbatch,
                "phase": e.phase,
                "start_ms": e.start_ms,
                "end_ms": e.end_ms,
            }, sort_keys=True) + "\n")


_STREAM_TID = {"compute": 0, "h2d": 1, "d2h": 2, "network": 3}


def _stream_of(kind: str) -> str:
    if kind in COMPUTE_KINDS:
        return "compute"
    if kind in H2D_KINDS:
        return "h2d"
    if kind in D2H_KINDS:
        return "d2h"
    return "network"


def trace_to_chrome(result: SimResult, cfg: SimConfig, path: str | Path) -> None:
    """Catapult-compatible trace: one process per gpu, one thread per stream."""
    pid = {g.id: i for i, g in enumerate(cfg.cluster.gpus)}
    events: list[dict[str, Any]] = []
    for g, p in pid.items():
        events.append({"name": "process_name", "ph": "M", "pid": p, "tid": 0,
                       "args": {"name": g}})
        for stream, tid in _STREAM_TID.items():
            events.append({"name": "thread_name", "ph": "M", "pid": p, "tid": tid,
                           "args": {"name": stream}})
    for e in result.trace:
        events.append({
            "name": f"{e.kind} u{e.unit}" + (f" j{e.microbatch}" if e.microbatch else ""),
            "cat": e.phase,
            "ph": "X",
            "ts": e.start_ms * 1000.0,  # microseconds
            "dur": e.duration_ms * 1000.0,
            "pid": pid[e.gpu_id],
            "tid": _STREAM_TID[_stream_of(e.kind)],
            "args": {"unit": e.unit, "microbatch": e.microbatch},
        })
    Path(path).write_text(json.dumps(
        {"traceEvents": events, "displayTimeUnit": "ms"}, sort_keys=True) + "\n")
