"""Numerical check of gradient combination under unequal batch shares.

When gpu i averages its gradients over b_i samples and the b_i differ,
an unweighted mean across gpus is biased. Scaling each per-gpu mean by
N * b_i / B before the 1/N reduction restores the exact full-batch
sample mean: (1/N) * sum_i (N * b_i / B) * g_i == (1/B) * sum_ij g_ij.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import InputError

DEFAULT_TOLERANCE = 1e-12


def _as_matrix(mean_grads: Sequence[np.ndarray]) -> np.ndarray:
    grads = [np.asarray(g, dtype=np.float64) for g in mean_grads]
    if not grads:
        raise InputError("need at least one per-gpu gradient")
    shape = grads[0].shape
    if any(g.shape != shape for g in grads):
        raise InputError("per-gpu gradients must share one shape")
    return np.stack([g.reshape(-1) for g in grads])


def weighted_combine(mean_grads: Sequence[np.ndarray], batches: Sequence[int]) -> np.ndarray:
    """Combine per-gpu mean gradients with weights N * b_i / B.

    The reduction keeps the two-stage form (scale, then 1/N average) so
    it costs the same as the unweighted mean it replaces.
    """
    mat = _as_matrix(mean_grads)
    if len(batches) != mat.shape[0]:
        raise InputError("one batch size per gradient required")
    b = np.asarray(batches, dtype=np.float64)
    if np.any(b <= 0):
        raise InputError("batch sizes must be positive")
    n = float(mat.shape[0])
    total = float(b.sum())
    weights = n * b / total
    out = (weights[:, None] * mat).sum(axis=0) / n
    return out.reshape(np.asarray(mean_grads[0]).shape)


def unweighted_combine(mean_grads: Sequence[np.ndarray]) -> np.ndarray:
    """Plain 1/N average; biased when batch shares differ."""
    mat = _as_matrix(mean_grads)
    return mat.mean(axis=0).reshape(np.asarray(mean_grads[0]).shape)


def full_batch_mean(sample_grads: Sequence[np.ndarray]) -> np.ndarray:
    """Reference: mean over every sample gradient across all gpus."""
    parts = [np.asarray(g, dtype=np.float64) for g in sample_grads]
    if not parts or any(p.ndim < 1 or p.shape[0] < 1 for p in parts):
        raise InputError("each gpu needs a (batch, ...) sample-gradient array")
    stacked = np.concatenate(parts, axis=0)
    return stacked.mean(axis=0)


@dataclass(frozen=True)
class GradFixture:
    """Per-gpu sample gradients for one synthetic step."""

    sample_grads: tuple[np.ndarray, ...]  # each (b_i, dim)
    batches: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.sample_grads) != len(self.batches):
            raise InputError("one sample gradient block per gpu required")
        for g, b in zip(self.sample_grads, self.batches):
            if g.shape[0] != b:
                raise InputError(
                    f"gradient block has {g.shape[0]} rows for batch {b}")

    @property
    def global_batch(self) -> int:
        return sum(self.batches)


def random_fixture(rng: np.random.Generator,
                   n_gpus: int | None = None,
                   batch: int | None = None,
                   dim: int | None = None) -> GradFixture:
    """Draw a fixture with strictly positive, generally unequal b_i."""
    n = n_gpus if n_gpus is not None else int(rng.integers(1, 9))
    b_total = batch if batch is not None else int(rng.integers(n, 65))
    if b_total < n:
        raise InputError("global batch smaller than gpu count")
    if n == 1:
        batches = (b_total,)
    else:
        cuts = np.sort(rng.choice(np.arange(1, b_total), size=n - 1, replace=False))
        edges = np.concatenate(([0], cuts, [b_total]))
        batches = tuple(int(x) for x in np.diff(edges))
    d = dim if dim is not None else int(rng.integers(3, 33))
    scales = rng.lognormal(mean=0.0, sigma=1.0, size=n)  # spread per-gpu magnitudes
    grads = tuple(rng.standard_normal((b, d)) * s for b, s in zip(batches, scales))
    return GradFixture(sample_grads=grads, batches=batches)


def _rel_error(candidate: np.ndarray, reference: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(reference.reshape(-1), np.inf)), 1e-300)
    return float(np.linalg.norm((candidate - reference).reshape(-1), np.inf)) / denom


@dataclass(frozen=True)
class GradCheckReport:
    fixtures: int
    tolerance: float
    max_rel_error: float
    max_unweighted_rel_error: float
    passed: bool


def check_fixture(fixture: GradFixture) -> tuple[float, float]:
    """(weighted, unweighted) relative error against the full-batch mean."""
    means = [g.mean(axis=0) for g in fixture.sample_grads]
    reference = full_batch_mean(fixture.sample_grads)
    weighted = weighted_combine(means, fixture.batches)
    unweighted = unweighted_combine(means)
    return _rel_error(weighted, reference), _rel_error(unweighted, reference)


def run_check(fixtures: int = 1000, seed: int = 0,
              tolerance: float = DEFAULT_TOLERANCE) -> GradCheckReport:
    if fixtures < 1:
        raise InputError("fixtures must be >= 1")
    rng = np.random.default_rng(seed)
    worst = worst_unweighted = 0.0
    for _ in range(fixtures):
        err, naive = check_fixture(random_fixture(rng))
        worst = max(worst, err)
        worst_unweighted = max(worst_unweighted, naive)
    return GradCheckReport(
        fixtures=fixtures,
        tolerance=tolerance,
        max_rel_error=worst,
        max_unweighted_rel_error=worst_unweighted,
        passed=worst <= tolerance,
    )
