"""Translate per-gpu state ratios into contiguous per-unit parameter shards.

Units are processed in order. A unit gets the even shard vector whenever
the remaining per-gpu budgets allow it; otherwise it gets a vector that
drains each gpu's excess over what an evenly sharded remainder would
need, which keeps the number of uneven units minimal. Uneven units cost
extra collective time, so they are the quantity to minimize.
"""
from __future__ import annotations

from .core import InputError, ModelSpec, UnitShardPlan

RATIO_SUM_TOL = 1e-9
# a vector counts as even if no entry deviates from U/N by a full parameter
EVEN_SLACK = 1.0


def _round_to_budget(target: list[float], total: int, unmet: list[float]) -> list[int]:
    # floor, then hand out the remainder one parameter at a time to the
    # gpu with the largest unmet budget (ties to the lowest index)
    counts = [int(x) for x in target]
    for i, c in enumerate(counts):
        if c < 0:
            counts[i] = 0
    rem = total - sum(counts)
    if rem < 0:  # flooring cannot overshoot unless targets did; clip largest
        order = sorted(range(len(counts)), key=lambda i: (-counts[i], i))
        for i in order:
            take = min(counts[i], -rem)
            counts[i] -= take
            rem += take
            if rem == 0:
                break
    credit = [unmet[i] - counts[i] for i in range(len(counts))]
    while rem > 0:
        i = max(range(len(counts)), key=lambda i: (credit[i], -i))
        counts[i] += 1
        credit[i] -= 1
        rem -= 1
    return counts


def _is_even(vector: list[int], unit_params: int, n: int) -> bool:
    even = unit_params / n
    return all(abs(v - even) < EVEN_SLACK for v in vector)


def assign_unit_shards(ratios: list[float], model: ModelSpec) -> UnitShardPlan:
    """Build per-unit contiguous shards whose totals honor the ratios.

    Per-gpu totals match ratio * total params to within one parameter per
    unit (integer rounding is resolved per unit).
    """
    n = len(ratios)
    if n < 1:
        raise InputError("need at least one ratio")
    if any(r < 0 for r in ratios):
        raise InputError("ratios must be >= 0")
    if abs(sum(ratios) - 1.0) > RATIO_SUM_TOL:
        raise InputError(f"ratios sum to {sum(ratios)!r}, expected 1")

    units = model.layers
    unit_params = model.params_per_layer
    budgets = [r * model.total_params for r in ratios]
    remaining = budgets[:]

    shards: list[tuple[int, ...]] = []
    offsets: list[tuple[int, ...]] = []
    uneven_units = 0
    for u in range(units):
        even_target = [unit_params / n] * n
        fits_even = all(remaining[i] - even_target[i] >= -EVEN_SLACK for i in range(n))
        if fits_even:
            vector = _round_to_budget(even_target, unit_params, remaining)
        else:
            # leave each gpu exactly what an all-even remainder would use;
            # the surplus beyond that is what this unit must absorb
            tail_even = (units - u - 1) * unit_params / n
            target = [remaining[i] - tail_even for i in range(n)]
            target = [min(max(t, 0.0), float(unit_params)) for t in target]
            scale = sum(target)
            if scale <= 0:
                target = [unit_params / n] * n
            vector = _round_to_budget(target, unit_params, remaining)
        if not _is_even(vector, unit_params, n):
            uneven_units += 1
        for i in range(n):
            remaining[i] -= vector[i]
        off = []
        acc = 0
        for v in vector:
            off.append(acc)
            acc += v
        shards.append(tuple(vector))
        offsets.append(tuple(off))

    return UnitShardPlan(units=units, uneven_units=uneven_units,
                         shards=tuple(shards), offsets=tuple(offsets))
