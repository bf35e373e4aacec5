"""Fitted latency and memory models per gpu type.

Latency: profiled table for m <= max profiled m, affine extrapolation
beyond it, fitted by least squares over the linear regime (the upper
half of the profiled range by default; small m curves off the line
because the kernels are not yet saturated).

Memory: affine in m over all profiled points. Activation memory grows
linearly with microbatch size and does not depend on how many
microbatches are accumulated.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .core import (
    GIB,
    ClusterSpec,
    CommProfile,
    ComputeProfile,
    InputError,
    MemoryProfile,
    _require_keys,
    bytes_to_gib,
    gib_to_bytes,
)

CONTINUITY_WARN = 0.10
SLOPE_SPREAD_LIMIT = 0.05


class FitError(InputError):
    """A profile cannot support the requested fit."""


@dataclass(frozen=True)
class LatencyModel:
    """Per-microbatch compute latency: exact table, affine beyond it."""

    table_ms: tuple[tuple[int, float], ...]
    slope_ms: float
    intercept_ms: float
    linear_regime_start: int
    max_rel_residual: float
    continuity_gap: float

    def __post_init__(self) -> None:
        if self.slope_ms <= 0:
            raise FitError(f"latency slope must be > 0, got {self.slope_ms!r}")

    @property
    def max_m(self) -> int:
        return self.table_ms[-1][0]

    def eval(self, m: int) -> float:
        """Latency of one microbatch of size m, in ms."""
        if m < 1:
            raise InputError(f"microbatch size must be >= 1, got {m}")
        if m <= self.max_m:
            return self.table_ms[m - 1][1]  # table is contiguous from m=1
        return self.intercept_ms + self.slope_ms * m


@dataclass(frozen=True)
class MemoryModel:
    """Compute-memory footprint in bytes, affine in microbatch size."""

    slope_bytes: float
    intercept_bytes: float
    max_rel_residual: float

    def __post_init__(self) -> None:
        if self.slope_bytes <= 0:
            raise FitError(f"memory slope must be > 0, got {self.slope_bytes!r}")

    def eval(self, m: int) -> float:
        if m < 0:
            raise InputError(f"microbatch size must be >= 0, got {m}")
        return self.intercept_bytes + self.slope_bytes * m


@dataclass(frozen=True)
class PerfModel:
    """Fitted forward, backward and memory models for one gpu type."""

    profile_key: str
    fwd: LatencyModel
    bwd: LatencyModel
    memory: MemoryModel


def _affine_lsq(xs: np.ndarray, ys: np.ndarray) -> tuple[float, float]:
    a = np.stack([xs, np.ones_like(xs)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(a, ys, rcond=None)
    return float(slope), float(intercept)


def fit_latency(
    profile: ComputeProfile,
    linear_regime_start: int | None = None,
) -> tuple[LatencyModel, LatencyModel]:
    """Fit forward and backward latency models from one compute profile.

    The affine tail is fitted over m >= linear_regime_start; at least two
    profiled points must fall in that range.
    """
    max_m = profile.max_m
    start = linear_regime_start if linear_regime_start is not None else math.ceil(max_m / 2)
    if start < 1:
        raise FitError(f"linear_regime_start must be >= 1, got {start}")

    def fit_one(points: tuple[tuple[int, float], ...]) -> LatencyModel:
        regime = [(m, y) for m, y in points if m >= start]
        if len(regime) < 2:
            raise FitError(
                f"profile {profile.profile_key}: need >= 2 points at m >= {start} "
                f"to fit the linear regime, have {len(regime)}")
        xs = np.array([m for m, _ in regime], dtype=float)
        ys = np.array([y for _, y in regime], dtype=float)
        slope, intercept = _affine_lsq(xs, ys)
        fitted = intercept + slope * xs
        max_rel = float(np.max(np.abs(fitted - ys) / ys))
        table_last = points[-1][1]
        gap = abs((intercept + slope * max_m) - table_last) / table_last
        return LatencyModel(points, slope, intercept, start, max_rel, gap)

    return fit_one(profile.fwd_ms), fit_one(profile.bwd_ms)


def fit_memory(profile: MemoryProfile) -> MemoryModel:
    if len(profile.points) < 2:
        raise FitError(f"profile {profile.profile_key}: need >= 2 memory points")
    xs = np.array([m for m, _ in profile.points], dtype=float)
    ys = np.array([v for _, v in profile.points], dtype=float)
    slope, intercept = _affine_lsq(xs, ys)
    fitted = intercept + slope * xs
    max_rel = float(np.max(np.abs(fitted - ys) / ys))
    return MemoryModel(slope, intercept, max_rel)


def fit_perf_model(
    compute: ComputeProfile,
    memory: MemoryProfile,
    linear_regime_start: int | None = None,
) -> PerfModel:
    if compute.profile_key != memory.profile_key:
        raise InputError("compute and memory profiles must share a profile_key")
    fwd, bwd = fit_latency(compute, linear_regime_start)
    return PerfModel(compute.profile_key, fwd, bwd, fit_memory(memory))


def total_latency(model: LatencyModel, m: int, num_microbatches: int) -> float:
    """Compute time for num_microbatches sequential microbatches of size m."""
    if num_microbatches < 1:
        raise InputError("num_microbatches must be >= 1")
    return num_microbatches * model.eval(m)


def collective_latency(comm: CommProfile, uneven: bool) -> tuple[float, float]:
    """(allgather_ms, reducescatter_ms), inflated when shards are uneven.

    Uneven shards pad every rank to the largest shard, so the overhead
    applies as soon as any shard deviates, independent of the skew.
    """
    factor = 1.0 + comm.uneven_overhead if uneven else 1.0
    return comm.allgather_ms * factor, comm.reducescatter_ms * factor


@dataclass(frozen=True)
class ClusterPerf:
    """The fitted models for every gpu type appearing in a cluster."""

    models: Mapping[str, PerfModel]

    def __getitem__(self, profile_key: str) -> PerfModel:
        try:
            return self.models[profile_key]
        except KeyError:
            raise InputError(f"no fitted model for profile_key {profile_key!r}") from None

    def validate_for(self, cluster: ClusterSpec) -> None:
        missing = cluster.profile_keys() - set(self.models)
        if missing:
            raise InputError(f"dangling profile_key(s) {sorted(missing)}: no fitted model")
        self.shared_memory_slope(cluster)

    def shared_memory_slope(self, cluster: ClusterSpec) -> float:
        """Single memory slope used for the aggregate (cluster-wide) bound.

        The compute-memory slope is a property of the model, not the gpu,
        so the per-type fits must agree; we allow 5% relative spread and
        take the maximum (conservative for the aggregate check).
        """
        slopes = [self.models[k].memory.slope_bytes for k in sorted(cluster.profile_keys())]
        lo, hi = min(slopes), max(slopes)
        if (hi - lo) / hi > SLOPE_SPREAD_LIMIT:
            raise InputError(
                f"memory slopes spread {(hi - lo) / hi:.3f} exceeds "
                f"{SLOPE_SPREAD_LIMIT}: per-type memory fits disagree")
        return hi

    def memory_models(self) -> dict[str, MemoryModel]:
        return {k: pm.memory for k, pm in self.models.items()}


# ---------------------------------------------------------------------------
# Fitted-model file format

_LATENCY_KEYS = ("table_ms", "slope_ms", "intercept_ms", "linear_regime_start",
                 "max_rel_residual", "continuity_gap")
_MEMORY_KEYS = ("slope_gib_per_m", "intercept_gib", "max_rel_residual")


def _latency_to_dict(m: LatencyModel) -> dict[str, Any]:
    return {
        "table_ms": [[i, v] for i, v in m.table_ms],
        "slope_ms": m.slope_ms,
        "intercept_ms": m.intercept_ms,
        "linear_regime_start": m.linear_regime_start,
        "max_rel_residual": m.max_rel_residual,
        "continuity_gap": m.continuity_gap,
    }


def _latency_from_dict(doc: Mapping[str, Any], ctx: str) -> LatencyModel:
    _require_keys(doc, _LATENCY_KEYS, _LATENCY_KEYS, ctx)
    table = tuple((int(m), float(v)) for m, v in doc["table_ms"])
    return LatencyModel(table, float(doc["slope_ms"]), float(doc["intercept_ms"]),
                        int(doc["linear_regime_start"]), float(doc["max_rel_residual"]),
                        float(doc["continuity_gap"]))


def perf_to_dict(perf: ClusterPerf) -> dict[str, Any]:
    return {
        "models": {
            key: {
                "fwd": _latency_to_dict(pm.fwd),
                "bwd": _latency_to_dict(pm.bwd),
                "memory": {
                    "slope_gib_per_m": bytes_to_gib(pm.memory.slope_bytes),
                    "intercept_gib": bytes_to_gib(pm.memory.intercept_bytes),
                    "max_rel_residual": pm.memory.max_rel_residual,
                },
            }
            for key, pm in sorted(perf.models.items())
        }
    }


def perf_from_dict(doc: Mapping[str, Any], *, ctx: str = "perf") -> ClusterPerf:
    if not isinstance(doc, Mapping):
        raise InputError(f"{ctx}: document must be a JSON object")
    _require_keys(doc, ("models",), ("models",), ctx)
    if not isinstance(doc["models"], Mapping) or not doc["models"]:
        raise InputError(f"{ctx}: models must be a non-empty object")
    models = {}
    for key, entry in doc["models"].items():
        ectx = f"{ctx}.models[{key}]"
        if not isinstance(entry, Mapping):
            raise InputError(f"{ectx}: must be an object")
        _require_keys(entry, ("fwd", "bwd", "memory"), ("fwd", "bwd", "memory"), ectx)
        memdoc = entry["memory"]
        _require_keys(memdoc, _MEMORY_KEYS, _MEMORY_KEYS, f"{ectx}.memory")
        models[key] = PerfModel(
            key,
            _latency_from_dict(entry["fwd"], f"{ectx}.fwd"),
            _latency_from_dict(entry["bwd"], f"{ectx}.bwd"),
            MemoryModel(float(memdoc["slope_gib_per_m"]) * GIB,
                        float(memdoc["intercept_gib"]) * GIB,
                        float(memdoc["max_rel_residual"])),
        )
    return ClusterPerf(models)


def save_perf(perf: ClusterPerf, path: str | Path) -> None:
    Path(path).write_text(json.dumps(perf_to_dict(perf), indent=2, sort_keys=True) + "\n")


def load_perf(path: str | Path) -> ClusterPerf:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise InputError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: invalid JSON: {e}") from e
    return perf_from_dict(doc, ctx=str(path))
