"""Domain types and file formats for heterogeneous training plans.

Memory is held in bytes internally; the JSON formats use GiB floats.
Spec documents (cluster, model, profile, plan) reject unknown fields so
typos fail loudly instead of silently falling back to defaults.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

GIB = 2**30

DEFAULT_MEM_CAP_FRACTION = 0.80
DEFAULT_BYTES_PER_PARAM_STATE = 16
DEFAULT_UNEVEN_OVERHEAD = 0.15


class HetplanError(Exception):
    """Base class for errors raised by this package."""


class InputError(HetplanError):
    """Malformed or inconsistent input (bad file, bad schema, bad argument)."""


class InfeasibleError(HetplanError):
    """No plan satisfies the memory and batch constraints."""


def gib_to_bytes(gib: float) -> int:
    return int(round(float(gib) * GIB))


def bytes_to_gib(b: float) -> float:
    return b / GIB


def _require_keys(obj: Mapping[str, Any], allowed: Iterable[str], required: Iterable[str], ctx: str) -> None:
    allowed = set(allowed)
    unknown = set(obj) - allowed
    if unknown:
        raise InputError(f"{ctx}: unknown fields {sorted(unknown)}")
    missing = set(required) - set(obj)
    if missing:
        raise InputError(f"{ctx}: missing fields {sorted(missing)}")


def _number(obj: Mapping[str, Any], key: str, ctx: str, *, positive: bool = True) -> float:
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise InputError(f"{ctx}: field {key!r} must be a finite number")
    if positive and v <= 0:
        raise InputError(f"{ctx}: field {key!r} must be > 0")
    return float(v)


def _integer(obj: Mapping[str, Any], key: str, ctx: str, *, minimum: int = 1) -> int:
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise InputError(f"{ctx}: field {key!r} must be an integer")
    if v < minimum:
        raise InputError(f"{ctx}: field {key!r} must be >= {minimum}")
    return v


@dataclass(frozen=True)
class CommProfile:
    """Even-sharding collective latencies per transformer unit, in ms."""

    allgather_ms: float
    reducescatter_ms: float
    uneven_overhead: float = DEFAULT_UNEVEN_OVERHEAD

    def __post_init__(self) -> None:
        if self.allgather_ms < 0 or self.reducescatter_ms < 0:
            raise InputError("collective latencies must be >= 0")
        if not 0 <= self.uneven_overhead <= 1:
            raise InputError("uneven_overhead must be in [0, 1]")


@dataclass(frozen=True)
class GpuSpec:
    id: str
    memory_capacity: int  # bytes
    profile_key: str

    def __post_init__(self) -> None:
        if not self.id:
            raise InputError("gpu id must be non-empty")
        if self.memory_capacity <= 0:
            raise InputError(f"gpu {self.id}: memory_capacity must be > 0")
        if not self.profile_key:
            raise InputError(f"gpu {self.id}: profile_key must be non-empty")


@dataclass(frozen=True)
class ClusterSpec:
    gpus: tuple[GpuSpec, ...]
    comm: CommProfile
    mem_cap_fraction: float = DEFAULT_MEM_CAP_FRACTION

    def __post_init__(self) -> None:
        if not self.gpus:
            raise InputError("cluster must contain at least one gpu")
        ids = [g.id for g in self.gpus]
        if len(set(ids)) != len(ids):
            raise InputError("gpu ids must be unique")
        if not 0 < self.mem_cap_fraction <= 1:
            raise InputError("mem_cap_fraction must be in (0, 1]")

    @property
    def n_gpus(self) -> int:
        return len(self.gpus)

    def effective_capacity(self, gpu: GpuSpec) -> float:
        """Usable bytes on one gpu: the planner never schedules past this."""
        return self.mem_cap_fraction * gpu.memory_capacity

    def total_effective_capacity(self) -> float:
        return sum(self.effective_capacity(g) for g in self.gpus)

    def profile_keys(self) -> set[str]:
        return {g.profile_key for g in self.gpus}


@dataclass(frozen=True)
class ModelSpec:
    layers: int
    params_per_layer: int
    global_batch: int
    bytes_per_param_state: int = DEFAULT_BYTES_PER_PARAM_STATE

    def __post_init__(self) -> None:
        if self.layers < 1:
            raise InputError("layers must be >= 1")
        if self.params_per_layer < 1:
            raise InputError("params_per_layer must be >= 1")
        if self.global_batch < 1:
            raise InputError("global_batch must be >= 1")
        if self.bytes_per_param_state < 1:
            raise InputError("bytes_per_param_state must be >= 1")

    @property
    def total_params(self) -> int:
        return self.layers * self.params_per_layer

    @property
    def state_bytes(self) -> int:
        """Sharded optimizer state for the full model (params, grads, moments)."""
        return self.bytes_per_param_state * self.total_params


def _profile_points(raw: Any, key: str, ctx: str) -> tuple[tuple[int, float], ...]:
    if not isinstance(raw, list) or not raw:
        raise InputError(f"{ctx}: {key} must be a non-empty list of [m, value] pairs")
    pts = []
    for entry in raw:
        if not isinstance(entry, list) or len(entry) != 2:
            raise InputError(f"{ctx}: {key} entries must be [m, value] pairs")
        m, v = entry
        if isinstance(m, bool) or not isinstance(m, int) or m < 1:
            raise InputError(f"{ctx}: {key} microbatch sizes must be integers >= 1")
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
            raise InputError(f"{ctx}: {key} values must be > 0")
        pts.append((m, float(v)))
    ms = [m for m, _ in pts]
    if ms != list(range(1, len(ms) + 1)):
        raise InputError(f"{ctx}: {key} microbatch sizes must be contiguous starting at 1")
    return tuple(pts)


@dataclass(frozen=True)
class ComputeProfile:
    """Measured per-microbatch compute latencies for one gpu type."""

    profile_key: str
    fwd_ms: tuple[tuple[int, float], ...]
    bwd_ms: tuple[tuple[int, float], ...]

    def __post_init__(self) -> None:
        if not self.profile_key:
            raise InputError("profile_key must be non-empty")

    @property
    def max_m(self) -> int:
        return self.fwd_ms[-1][0]


@dataclass(frozen=True)
class MemoryProfile:
    """Measured compute-memory footprint (bytes) versus microbatch size."""

    profile_key: str
    points: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        vals = [v for _, v in self.points]
        if any(b >= a for a, b in zip(vals[1:], vals)):
            raise InputError(f"profile {self.profile_key}: memory must be strictly increasing in m")


@dataclass(frozen=True)
class GpuAssignment:
    """Per-gpu slice of the global batch. microbatch == 0 marks an idle gpu."""

    gpu_id: str
    microbatch: int
    num_microbatches: int
    batch: int
    state_ratio: float
    predicted_compute_mem: float  # bytes
    predicted_state_mem: float  # bytes

    def __post_init__(self) -> None:
        if self.microbatch < 0 or self.num_microbatches < 0 or self.batch < 0:
            raise InputError(f"gpu {self.gpu_id}: batch fields must be >= 0")
        if not 0 <= self.state_ratio <= 1:
            raise InputError(f"gpu {self.gpu_id}: state_ratio must be in [0, 1]")

    @property
    def idle(self) -> bool:
        return self.microbatch == 0


@dataclass(frozen=True)
class UnitShardPlan:
    """Contiguous per-unit parameter shards realizing the state ratios."""

    units: int
    uneven_units: int
    shards: tuple[tuple[int, ...], ...]  # [unit][gpu] -> parameter count
    offsets: tuple[tuple[int, ...], ...]  # [unit][gpu] -> start offset within unit

    def __post_init__(self) -> None:
        if len(self.shards) != self.units or len(self.offsets) != self.units:
            raise InputError("unit shard plan must carry one vector per unit")


@dataclass(frozen=True)
class TrainPlan:
    """A full assignment plus its predicted per-layer and iteration latency.

    Constructed plans may violate the batch or memory constraints (for
    example after hand-editing the JSON); validate_plan reports that
    rather than the constructor, so damaged files can still be inspected.
    """

    assignments: tuple[GpuAssignment, ...]
    predicted_layer_fwd_ms: float
    predicted_layer_bwd_ms: float
    predicted_iteration_ms: float
    uneven_sharding_used: bool
    unit_shards: UnitShardPlan | None = None

    def assignment_for(self, gpu_id: str) -> GpuAssignment:
        for a in self.assignments:
            if a.gpu_id == gpu_id:
                return a
        raise InputError(f"plan has no assignment for gpu {gpu_id!r}")

    @property
    def total_batch(self) -> int:
        return sum(a.batch for a in self.assignments)


@dataclass(frozen=True)
class Violation:
    """One failed plan check; constraint is 'I', 'II', 'III' or a local rule."""

    constraint: str
    gpu_id: str | None
    message: str

    def __str__(self) -> str:
        where = f" [{self.gpu_id}]" if self.gpu_id else ""
        return f"constraint {self.constraint}{where}: {self.message}"


# ---------------------------------------------------------------------------
# JSON ingestion


def _load_json(path: str | Path) -> Any:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise InputError(f"cannot read {path}: {e}") from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: invalid JSON: {e}") from e


def cluster_from_dict(doc: Mapping[str, Any], *, ctx: str = "cluster") -> ClusterSpec:
    if not isinstance(doc, Mapping):
        raise InputError(f"{ctx}: document must be a JSON object")
    _require_keys(doc, ("gpus", "comm", "mem_cap_fraction"), ("gpus", "comm"), ctx)
    raw_gpus = doc["gpus"]
    if not isinstance(raw_gpus, list) or not raw_gpus:
        raise InputError(f"{ctx}: gpus must be a non-empty list")
    gpus = []
    for idx, g in enumerate(raw_gpus):
        gctx = f"{ctx}.gpus[{idx}]"
        if not isinstance(g, Mapping):
            raise InputError(f"{gctx}: must be an object")
        _require_keys(g, ("id", "memory_gib", "profile_key"), ("id", "memory_gib", "profile_key"), gctx)
        if not isinstance(g["id"], str) or not isinstance(g["profile_key"], str):
            raise InputError(f"{gctx}: id and profile_key must be strings")
        gpus.append(GpuSpec(g["id"], gib_to_bytes(_number(g, "memory_gib", gctx)), g["profile_key"]))
    raw_comm = doc["comm"]
    if not isinstance(raw_comm, Mapping):
        raise InputError(f"{ctx}.comm: must be an object")
    _require_keys(raw_comm, ("allgather_ms", "reducescatter_ms", "uneven_overhead"),
                  ("allgather_ms", "reducescatter_ms"), f"{ctx}.comm")
    comm = CommProfile(
        _number(raw_comm, "allgather_ms", f"{ctx}.comm", positive=False),
        _number(raw_comm, "reducescatter_ms", f"{ctx}.comm", positive=False),
        _number(raw_comm, "uneven_overhead", f"{ctx}.comm", positive=False)
        if "uneven_overhead" in raw_comm else DEFAULT_UNEVEN_OVERHEAD,
    )
    frac = (_number(doc, "mem_cap_fraction", ctx) if "mem_cap_fraction" in doc
            else DEFAULT_MEM_CAP_FRACTION)
    return ClusterSpec(tuple(gpus), comm, frac)


def load_cluster(path: str | Path, profile_keys: Iterable[str] | None = None) -> ClusterSpec:
    """Load and validate a cluster file.

    When profile_keys is given (the keys of the loaded perf models), any
    gpu referencing a key outside that set is a dangling reference.
    """
    cluster = cluster_from_dict(_load_json(path), ctx=str(path))
    if profile_keys is not None:
        dangling = cluster.profile_keys() - set(profile_keys)
        if dangling:
            raise InputError(f"{path}: dangling profile_key(s) {sorted(dangling)}")
    return cluster


def model_from_dict(doc: Mapping[str, Any], *, ctx: str = "model") -> ModelSpec:
    if not isinstance(doc, Mapping):
        raise InputError(f"{ctx}: document must be a JSON object")
    _require_keys(doc, ("layers", "params_per_layer", "bytes_per_param_state", "global_batch"),
                  ("layers", "params_per_layer", "global_batch"), ctx)
    return ModelSpec(
        layers=_integer(doc, "layers", ctx),
        params_per_layer=_integer(doc, "params_per_layer", ctx),
        global_batch=_integer(doc, "global_batch", ctx),
        bytes_per_param_state=_integer(doc, "bytes_per_param_state", ctx)
        if "bytes_per_param_state" in doc else DEFAULT_BYTES_PER_PARAM_STATE,
    )


def load_model(path: str | Path) -> ModelSpec:
    return model_from_dict(_load_json(path), ctx=str(path))


def profile_from_dict(doc: Mapping[str, Any], *, ctx: str = "profile") -> tuple[ComputeProfile, MemoryProfile]:
    if not isinstance(doc, Mapping):
        raise InputError(f"{ctx}: profile entries must be JSON objects")
    _require_keys(doc, ("profile_key", "fwd_ms", "bwd_ms", "compute_mem_gib"),
                  ("profile_key", "fwd_ms", "bwd_ms", "compute_mem_gib"), ctx)
    key = doc["profile_key"]
    if not isinstance(key, str) or not key:
        raise InputError(f"{ctx}: profile_key must be a non-empty string")
    fwd = _profile_points(doc["fwd_ms"], "fwd_ms", ctx)
    bwd = _profile_points(doc["bwd_ms"], "bwd_ms", ctx)
    if len(fwd) != len(bwd):
        raise InputError(f"{ctx}: fwd_ms and bwd_ms must cover the same microbatch sizes")
    mem_pts = _profile_points(doc["compute_mem_gib"], "compute_mem_gib", ctx)
    mem = MemoryProfile(key, tuple((m, gib_to_bytes(v)) for m, v in mem_pts))
    return ComputeProfile(key, fwd, bwd), mem


def load_profiles(path: str | Path) -> list[tuple[ComputeProfile, MemoryProfile]]:
    """Load a profile file holding one profile object or a list of them."""
    doc = _load_json(path)
    entries = doc if isinstance(doc, list) else [doc]
    out = []
    seen: set[str] = set()
    for idx, entry in enumerate(entries):
        pair = profile_from_dict(entry, ctx=f"{path}[{idx}]")
        if pair[0].profile_key in seen:
            raise InputError(f"{path}: duplicate profile_key {pair[0].profile_key!r}")
        seen.add(pair[0].profile_key)
        out.append(pair)
    if not out:
        raise InputError(f"{path}: no profiles found")
    return out


# ---------------------------------------------------------------------------
# Plan serialization

_ASSIGNMENT_KEYS = ("gpu_id", "microbatch", "num_microbatches", "batch", "state_ratio",
                    "predicted_compute_mem_gib", "predicted_state_mem_gib")
_PLAN_KEYS = ("assignments", "predicted_layer_fwd_ms", "predicted_layer_bwd_ms",
              "predicted_iteration_ms", "uneven_sharding_used", "unit_shards")


def plan_to_dict(plan: TrainPlan) -> dict[str, Any]:
    doc: dict[str, Any] = {
        "assignments": [
            {
                "gpu_id": a.gpu_id,
                "microbatch": a.microbatch,
                "num_microbatches": a.num_microbatches,
                "batch": a.batch,
                "state_ratio": a.state_ratio,
                "predicted_compute_mem_gib": bytes_to_gib(a.predicted_compute_mem),
                "predicted_state_mem_gib": bytes_to_gib(a.predicted_state_mem),
            }
            for a in plan.assignments
        ],
        "predicted_layer_fwd_ms": plan.predicted_layer_fwd_ms,
        "predicted_layer_bwd_ms": plan.predicted_layer_bwd_ms,
        "predicted_iteration_ms": plan.predicted_iteration_ms,
        "uneven_sharding_used": plan.uneven_sharding_used,
    }
    if plan.unit_shards is not None:
        s = plan.unit_shards
        doc["unit_shards"] = {
            "units": s.units,
            "uneven_units": s.uneven_units,
            "shards": [list(v) for v in s.shards],
            "offsets": [list(v) for v in s.offsets],
        }
    return doc


def plan_from_dict(doc: Mapping[str, Any], *, ctx: str = "plan") -> TrainPlan:
    if not isinstance(doc, Mapping):
        raise InputError(f"{ctx}: document must be a JSON object")
    _require_keys(doc, _PLAN_KEYS, [k for k in _PLAN_KEYS if k != "unit_shards"], ctx)
    raw = doc["assignments"]
    if not isinstance(raw, list) or not raw:
        raise InputError(f"{ctx}: assignments must be a non-empty list")
    assignments = []
    for idx, a in enumerate(raw):
        actx = f"{ctx}.assignments[{idx}]"
        if not isinstance(a, Mapping):
            raise InputError(f"{actx}: must be an object")
        _require_keys(a, _ASSIGNMENT_KEYS, _ASSIGNMENT_KEYS, actx)
        if not isinstance(a["gpu_id"], str):
            raise InputError(f"{actx}: gpu_id must be a string")
        assignments.append(GpuAssignment(
            gpu_id=a["gpu_id"],
            microbatch=_integer(a, "microbatch", actx, minimum=0),
            num_microbatches=_integer(a, "num_microbatches", actx, minimum=0),
            batch=_integer(a, "batch", actx, minimum=0),
            state_ratio=_number(a, "state_ratio", actx, positive=False),
            predicted_compute_mem=_number(a, "predicted_compute_mem_gib", actx, positive=False) * GIB,
            predicted_state_mem=_number(a, "predicted_state_mem_gib", actx, positive=False) * GIB,
        ))
    shards = None
    if "unit_shards" in doc:
        s = doc["unit_shards"]
        if not isinstance(s, Mapping):
            raise InputError(f"{ctx}.unit_shards: must be an object")
        _require_keys(s, ("units", "uneven_units", "shards", "offsets"),
                      ("units", "uneven_units", "shards", "offsets"), f"{ctx}.unit_shards")
        shards = UnitShardPlan(
            units=_integer(s, "units", f"{ctx}.unit_shards"),
            uneven_units=_integer(s, "uneven_units", f"{ctx}.unit_shards", minimum=0),
            shards=tuple(tuple(v) for v in s["shards"]),
            offsets=tuple(tuple(v) for v in s["offsets"]),
        )
    return TrainPlan(
        assignments=tuple(assignments),
        predicted_layer_fwd_ms=_number(doc, "predicted_layer_fwd_ms", ctx, positive=False),
        predicted_layer_bwd_ms=_number(doc, "predicted_layer_bwd_ms", ctx, positive=False),
        predicted_iteration_ms=_number(doc, "predicted_iteration_ms", ctx, positive=False),
        uneven_sharding_used=bool(doc["uneven_sharding_used"]),
        unit_shards=shards,
    )


def dump_json(doc: Any, path: str | Path) -> None:
    """Write a document with deterministic key order and float formatting."""
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def save_plan(plan: TrainPlan, path: str | Path) -> None:
    dump_json(plan_to_dict(plan), path)


def load_plan(path: str | Path) -> TrainPlan:
    return plan_from_dict(_load_json(path), ctx=str(path))


# ---------------------------------------------------------------------------
# Validation

REL_TOL = 1e-9


def validate_plan(
    plan: TrainPlan,
    cluster: ClusterSpec,
    model: ModelSpec,
    memory_models: Mapping[str, Any] | None = None,
) -> list[Violation]:
    """Check a plan against the batch and memory constraints.

    memory_models maps profile_key to an object with eval(m) -> bytes;
    when given, compute memory is re-derived from the fitted model
    instead of trusting the figures recorded in the plan.

    Returns an empty list iff the plan is valid. A plan that does not
    reference every cluster gpu exactly once is rejected as an input
    error, not reported as a violation.
    """
    plan_ids = [a.gpu_id for a in plan.assignments]
    cluster_ids = [g.id for g in cluster.gpus]
    if sorted(plan_ids) != sorted(cluster_ids):
        raise InputError(
            f"plan gpus {sorted(plan_ids)} do not match cluster gpus {sorted(cluster_ids)}")

    violations: list[Violation] = []
    by_id = {g.id: g for g in cluster.gpus}

    total_batch = 0
    total_ratio = 0.0
    total_compute_mem = 0.0
    for a in plan.assignments:
        gpu = by_id[a.gpu_id]
        cap = cluster.effective_capacity(gpu)
        if a.idle:
            if a.num_microbatches != 0 or a.batch != 0:
                violations.append(Violation("I", a.gpu_id, "idle gpu must have zero microbatches and batch"))
        else:
            if a.num_microbatches < 1:
                violations.append(Violation("I", a.gpu_id, "num_microbatches must be >= 1"))
            if a.batch != a.microbatch * a.num_microbatches:
                violations.append(Violation(
                    "I", a.gpu_id,
                    f"batch {a.batch} != microbatch {a.microbatch} x num_microbatches {a.num_microbatches}"))
        total_batch += a.batch
        total_ratio += a.state_ratio

        compute_mem = a.predicted_compute_mem
        if memory_models is not None:
            mm = memory_models.get(gpu.profile_key)
            if mm is None:
                raise InputError(f"no memory model for profile_key {gpu.profile_key!r}")
            compute_mem = mm.eval(a.microbatch)
            if abs(compute_mem - a.predicted_compute_mem) > REL_TOL * max(compute_mem, 1.0):
                violations.append(Violation(
                    "II", a.gpu_id,
                    f"recorded compute memory {bytes_to_gib(a.predicted_compute_mem):.4f} GiB "
                    f"does not match model {bytes_to_gib(compute_mem):.4f} GiB"))
        total_compute_mem += compute_mem

        if compute_mem > cap * (1 + REL_TOL):
            violations.append(Violation(
                "II", a.gpu_id,
                f"compute memory {bytes_to_gib(compute_mem):.2f} GiB exceeds "
                f"effective capacity {bytes_to_gib(cap):.2f} GiB"))
        expected_state = a.state_ratio * model.state_bytes
        if abs(a.predicted_state_mem - expected_state) > REL_TOL * max(expected_state, 1.0):
            violations.append(Violation(
                "III", a.gpu_id,
                f"recorded state memory {bytes_to_gib(a.predicted_state_mem):.4f} GiB "
                f"does not match ratio {a.state_ratio:.6f} of model state"))
        if compute_mem + expected_state > cap * (1 + REL_TOL):
            violations.append(Violation(
                "II+III", a.gpu_id,
                f"compute + state memory {bytes_to_gib(compute_mem + expected_state):.2f} GiB "
                f"exceeds effective capacity {bytes_to_gib(cap):.2f} GiB"))

    if total_batch != model.global_batch:
        violations.append(Violation(
            "I", None, f"assigned batch {total_batch} != global batch {model.global_batch}"))
    if abs(total_ratio - 1.0) > REL_TOL:
        violations.append(Violation(
            "III", None, f"state ratios sum to {total_ratio!r}, expected 1"))
    if model.state_bytes + total_compute_mem > cluster.total_effective_capacity() * (1 + REL_TOL):
        violations.append(Violation(
            "III", None,
            f"state + compute memory {bytes_to_gib(model.state_bytes + total_compute_mem):.2f} GiB "
            f"exceeds aggregate effective capacity "
            f"{bytes_to_gib(cluster.total_effective_capacity()):.2f} GiB"))

    expected_iter = model.layers * (plan.predicted_layer_fwd_ms + plan.predicted_layer_bwd_ms)
    if abs(plan.predicted_iteration_ms - expected_iter) > REL_TOL * max(expected_iter, 1.0):
        violations.append(Violation(
            "prediction", None,
            f"predicted_iteration_ms {plan.predicted_iteration_ms!r} != layers x "
            f"(fwd + bwd) = {expected_iter!r}"))
    return violations
