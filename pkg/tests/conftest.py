"""Shared builders for synthetic clusters, models, and profiles."""
from __future__ import annotations

import json
from importlib import resources

import numpy as np
import pytest

from hetplan import (
    ClusterPerf,
    FitError,
    cluster_from_dict,
    fit_perf_model,
    model_from_dict,
    profile_from_dict,
)

GIB = 2 ** 30


def affine_profile(key, fwd_slope, fwd_icept=0.0, mem0_gib=2.0, mem_slope_gib=0.25,
                   max_m=8, bwd_factor=2.0, jitter=None, rng=None):
    """Profile document with affine fwd/bwd tables and affine memory.

    With jitter=None the tables are exactly affine, so fitted models
    reproduce them to float precision. jitter multiplies each latency by
    (1 + jitter * u), u ~ U(-1, 1), giving realistic non-affine tables.
    """
    def noisy(v):
        if jitter is None:
            return v
        return v * (1.0 + jitter * rng.uniform(-1.0, 1.0))

    fwd = [[m, noisy(fwd_icept + fwd_slope * m)] for m in range(1, max_m + 1)]
    bwd = [[m, noisy(bwd_factor * (fwd_icept + fwd_slope * m))] for m in range(1, max_m + 1)]
    mem = [[m, mem0_gib + mem_slope_gib * m] for m in range(1, max_m + 1)]
    return {"profile_key": key, "fwd_ms": fwd, "bwd_ms": bwd, "compute_mem_gib": mem}


def make_perf(profile_docs, linear_regime_start=None) -> ClusterPerf:
    models = {}
    for doc in profile_docs:
        compute, memory = profile_from_dict(doc)
        models[compute.profile_key] = fit_perf_model(compute, memory, linear_regime_start)
    return ClusterPerf(models)


def make_cluster(caps_gib, keys, ag=1.0, rs=1.0, uneven=0.15, frac=1.0):
    return cluster_from_dict({
        "gpus": [
            {"id": f"{key}-{i}", "memory_gib": cap, "profile_key": key}
            for i, (cap, key) in enumerate(zip(caps_gib, keys))
        ],
        "comm": {"allgather_ms": ag, "reducescatter_ms": rs, "uneven_overhead": uneven},
        "mem_cap_fraction": frac,
    })


def make_model(layers=2, params_per_layer=100_000, batch=8, bytes_per_param=16):
    return model_from_dict({
        "layers": layers,
        "params_per_layer": params_per_layer,
        "global_batch": batch,
        "bytes_per_param_state": bytes_per_param,
    })


def packaged_fixture(name: str) -> dict:
    text = resources.files("hetplan").joinpath("fixtures").joinpath(name).read_text()
    return json.loads(text)


def random_instance(rng: np.random.Generator):
    """Small random instance for optimizer-vs-oracle comparison.

    Mixes ample and scarce memory so both feasible and infeasible cases
    appear, non-affine latency tables, and occasional idle permission.
    Draws whose noisy tables fit to a non-increasing tail are redrawn.
    """
    while True:
        n = int(rng.integers(1, 5))
        batch = int(rng.integers(2, 13))
        mem_slope = 0.2 + 0.3 * rng.random()
        docs = []
        caps = []
        for i in range(n):
            max_m = int(rng.integers(2, 13))
            docs.append(affine_profile(
                f"g{i}",
                fwd_slope=0.5 + 4.0 * rng.random(),
                fwd_icept=2.0 * rng.random(),
                mem0_gib=1.0 + 3.0 * rng.random(),
                mem_slope_gib=mem_slope,
                max_m=max_m,
                bwd_factor=1.0 + 2.0 * rng.random(),
                jitter=0.15,
                rng=rng,
            ))
            mem0 = docs[-1]["compute_mem_gib"][0][1] - mem_slope
            if rng.random() < 0.5:
                caps.append(mem0 + mem_slope * batch + 8.0)  # ample
            else:
                caps.append(mem0 + mem_slope * float(rng.integers(0, batch + 1)))
        try:
            perf = make_perf(docs)
        except FitError:
            continue
        cluster = make_cluster(
            caps, [d["profile_key"] for d in docs],
            ag=float(rng.choice([0.05, 1.0, 25.0])),
            rs=float(rng.choice([0.05, 1.0, 25.0])),
        )
        model = make_model(
            layers=int(rng.integers(1, 7)),
            params_per_layer=int(rng.integers(100_000, 5_000_000)),
            batch=batch,
        )
        allow_idle = bool(rng.random() < 0.3)
        return cluster, model, perf, allow_idle


def compute_bound_instance(rng: np.random.Generator, offload: bool):
    """Instance whose collectives are far below any per-layer compute."""
    while True:
        n = int(rng.integers(2, 5))
        layers = int(rng.integers(8, 17))
        batch = int(rng.integers(2 * n, 25))
        # near-zero intercepts make small microbatches competitive, so the
        # sample covers deep per-gpu pipelines as well as single-microbatch plans
        icept = 0.0 if rng.random() < 0.5 else 0.5 + rng.random()
        docs = [
            affine_profile(
                f"g{i}",
                fwd_slope=1.0 + 4.0 * rng.random(),
                fwd_icept=icept,
                mem0_gib=2.0,
                mem_slope_gib=0.25,
                max_m=int(rng.integers(4, 13)),
                bwd_factor=1.5 + rng.random(),
                jitter=0.1,
                rng=rng,
            )
            for i in range(n)
        ]
        try:
            perf = make_perf(docs)
        except FitError:
            continue
        min_tf1 = min(d["fwd_ms"][0][1] for d in docs)
        comm = 0.003 * min_tf1 * (0.5 + rng.random())
        cluster = make_cluster(
            [2.0 + 0.25 * batch + 8.0] * n, [d["profile_key"] for d in docs],
            ag=comm, rs=comm,
        )
        model = make_model(layers=layers, params_per_layer=50_000, batch=batch)
        return cluster, model, perf, offload


@pytest.fixture(scope="session")
def mixed_profiles():
    return packaged_fixture("profiles_mixed_8gpu.json")


@pytest.fixture(scope="session")
def mixed_perf(mixed_profiles):
    return make_perf(mixed_profiles)


@pytest.fixture(scope="session")
def mixed_cluster():
    return cluster_from_dict(packaged_fixture("cluster_mixed_8gpu.json"))
