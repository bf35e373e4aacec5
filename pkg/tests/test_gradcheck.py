"""Gradient reweighting for unequal per-gpu batches."""
import numpy as np
import pytest

from hetplan import (
    GradFixture,
    InputError,
    check_fixture,
    full_batch_mean,
    random_fixture,
    run_check,
    unweighted_combine,
    weighted_combine,
)


def _fixture(batches, dim=5, seed=0):
    rng = np.random.default_rng(seed)
    grads = tuple(rng.normal(size=(b, dim)) for b in batches)
    return GradFixture(sample_grads=grads, batches=tuple(batches))


def test_weighted_combine_matches_full_batch_mean():
    fx = _fixture([7, 2, 1])
    means = [g.mean(axis=0) for g in fx.sample_grads]
    combined = weighted_combine(means, fx.batches)
    reference = full_batch_mean(fx.sample_grads)
    direct = np.concatenate(fx.sample_grads).mean(axis=0)
    np.testing.assert_allclose(combined, reference, rtol=1e-13, atol=0)
    np.testing.assert_allclose(reference, direct, rtol=1e-13, atol=0)


def test_unweighted_mean_is_biased_on_skewed_batches():
    # one gpu holds 9 of 10 samples; averaging per-gpu means weights the
    # lone sample 9x too heavily
    rng = np.random.default_rng(1)
    grads = (np.ones((9, 3)), 5.0 + rng.normal(size=(1, 3)))
    fx = GradFixture(sample_grads=grads, batches=(9, 1))
    weighted_err, unweighted_err = check_fixture(fx)
    assert weighted_err <= 1e-13
    assert unweighted_err > 0.1


def test_equal_batches_make_both_estimators_agree():
    fx = _fixture([4, 4, 4])
    means = [g.mean(axis=0) for g in fx.sample_grads]
    np.testing.assert_allclose(
        weighted_combine(means, fx.batches),
        unweighted_combine(means), rtol=1e-13, atol=0)


def test_single_gpu_weighting_is_identity():
    fx = _fixture([6])
    means = [g.mean(axis=0) for g in fx.sample_grads]
    np.testing.assert_allclose(
        weighted_combine(means, fx.batches), means[0], rtol=1e-15, atol=0)


def test_random_fixtures_cover_uneven_splits():
    rng = np.random.default_rng(2)
    saw_uneven = False
    for _ in range(50):
        fx = random_fixture(rng)
        assert sum(fx.batches) == sum(g.shape[0] for g in fx.sample_grads)
        assert all(b >= 1 for b in fx.batches)
        saw_uneven = saw_uneven or len(set(fx.batches)) > 1
        w, _ = check_fixture(fx)
        assert w <= 1e-12
    assert saw_uneven


def test_run_check_reports_pass():
    report = run_check(fixtures=200, seed=0, tolerance=1e-12)
    assert report.passed
    assert report.fixtures == 200
    assert report.max_rel_error <= 1e-12
    assert report.max_unweighted_rel_error > report.max_rel_error


def test_input_validation():
    with pytest.raises(InputError):
        weighted_combine([np.ones(3)], [2, 3])  # length mismatch
    with pytest.raises(InputError):
        weighted_combine([np.ones(3), np.ones(3)], [2, 0])  # empty shard
    with pytest.raises(InputError):
        weighted_combine([], [])
    with pytest.raises(InputError):
        GradFixture(sample_grads=(np.ones((2, 3)),), batches=(3,))
