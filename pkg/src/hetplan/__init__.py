"""Planning and validation toolkit for training on mixed gpu fleets.

The package splits a fixed global batch across gpus with different
throughput and memory (an exact dynamic program over microbatch shapes),
places optimizer state by leftover capacity, checks the resulting plans,
simulates one iteration event by event, and verifies that gradient
averaging stays unbiased under unequal batch shares.
"""

__version__ = "0.1.0"

from .core import (
    ClusterSpec,
    CommProfile,
    ComputeProfile,
    GpuAssignment,
    GpuSpec,
    HetplanError,
    InfeasibleError,
    InputError,
    MemoryProfile,
    ModelSpec,
    TrainPlan,
    UnitShardPlan,
    Violation,
    cluster_from_dict,
    load_cluster,
    load_model,
    load_plan,
    load_profiles,
    model_from_dict,
    plan_from_dict,
    plan_to_dict,
    profile_from_dict,
    save_plan,
    validate_plan,
)
from .gradcheck import (
    GradCheckReport,
    GradFixture,
    check_fixture,
    full_batch_mean,
    random_fixture,
    run_check,
    unweighted_combine,
    weighted_combine,
)
from .perf import (
    ClusterPerf,
    FitError,
    LatencyModel,
    MemoryModel,
    PerfModel,
    collective_latency,
    fit_latency,
    fit_memory,
    fit_perf_model,
    load_perf,
    save_perf,
    total_latency,
)
from .planner import (
    DpTable,
    LayerLatency,
    OptimizeResult,
    OptimizerReport,
    SizeGuardError,
    brute_force_optimize,
    complexity_budget,
    dp_optimize,
    dp_optimize_detailed,
    partition_state,
    per_gpu_layer_latency,
)
from .sharding import assign_unit_shards
from .sim import (
    CrosscheckReport,
    Event,
    SimConfig,
    SimResult,
    crosscheck_optimizer,
    lint_trace,
    peak_activation_memory,
    simulate_iteration,
    trace_to_chrome,
    trace_to_jsonl,
)

__all__ = [
    "__version__",
    # core
    "ClusterSpec", "CommProfile", "ComputeProfile", "GpuAssignment", "GpuSpec",
    "HetplanError", "InfeasibleError", "InputError", "MemoryProfile", "ModelSpec",
    "TrainPlan", "UnitShardPlan", "Violation", "cluster_from_dict", "load_cluster",
    "load_model", "load_plan", "load_profiles", "model_from_dict", "plan_from_dict",
    "plan_to_dict", "profile_from_dict", "save_plan", "validate_plan",
    # perf
    "ClusterPerf", "FitError", "LatencyModel", "MemoryModel", "PerfModel",
    "collective_latency", "fit_latency", "fit_memory", "fit_perf_model",
    "load_perf", "save_perf", "total_latency",
    # planner
    "DpTable", "LayerLatency", "OptimizeResult", "OptimizerReport", "SizeGuardError",
    "brute_force_optimize", "complexity_budget", "dp_optimize", "dp_optimize_detailed",
    "partition_state", "per_gpu_layer_latency",
    # sharding
    "assign_unit_shards",
    # sim
    "CrosscheckReport", "Event", "SimConfig", "SimResult", "crosscheck_optimizer",
    "lint_trace", "peak_activation_memory", "simulate_iteration",
    "trace_to_chrome", "trace_to_jsonl",
    # gradcheck
    "GradCheckReport", "GradFixture", "check_fixture", "full_batch_mean",
    "random_fixture", "run_check", "unweighted_combine", "weighted_combine",
]
