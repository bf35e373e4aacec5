"""Per-unit shard vectors derived from state ratios."""
import pytest

from conftest import make_model

from hetplan import InputError, assign_unit_shards


def test_three_to_one_ratio_over_two_units():
    model = make_model(layers=2, params_per_layer=1000)
    plan = assign_unit_shards([0.75, 0.25], model)
    assert plan.units == 2
    assert plan.uneven_units == 1
    assert plan.shards == ((500, 500), (1000, 0))
    assert plan.offsets == ((0, 500), (0, 500 + 500))


def test_even_ratios_shard_every_unit_evenly():
    model = make_model(layers=4, params_per_layer=1200)
    plan = assign_unit_shards([0.25] * 4, model)
    assert plan.uneven_units == 0
    assert all(vec == (300, 300, 300, 300) for vec in plan.shards)


def test_unit_totals_and_budgets_are_conserved():
    model = make_model(layers=5, params_per_layer=977)  # odd on purpose
    ratios = [0.5, 0.3, 0.2]
    plan = assign_unit_shards(ratios, model)
    for vec in plan.shards:
        assert sum(vec) == model.params_per_layer
        assert all(v >= 0 for v in vec)
    totals = [sum(vec[i] for vec in plan.shards) for i in range(3)]
    for got, r in zip(totals, ratios):
        # integer rounding settles within one parameter per unit
        assert abs(got - r * model.total_params) <= model.layers


def test_single_owner_is_fully_uneven():
    model = make_model(layers=3, params_per_layer=999)
    plan = assign_unit_shards([1.0, 0.0], model)
    assert plan.uneven_units == 3
    assert all(vec == (999, 0) for vec in plan.shards)


def test_offsets_are_contiguous_prefix_sums():
    model = make_model(layers=2, params_per_layer=10)
    plan = assign_unit_shards([0.6, 0.4], model)
    for vec, off in zip(plan.shards, plan.offsets):
        acc = 0
        for v, o in zip(vec, off):
            assert o == acc
            acc += v


def test_near_even_budgets_stay_even():
    # 1/N +- a hair still yields the even vector for every unit
    model = make_model(layers=6, params_per_layer=9000)
    ratios = [1 / 3 + 1e-12, 1 / 3, 1 / 3 - 1e-12]
    plan = assign_unit_shards(ratios, model)
    assert plan.uneven_units == 0


def test_ratio_validation():
    model = make_model()
    with pytest.raises(InputError, match="sum"):
        assign_unit_shards([0.5, 0.4], model)
    with pytest.raises(InputError, match=">="):
        assign_unit_shards([1.5, -0.5], model)
    with pytest.raises(InputError, match="ratio"):
        assign_unit_shards([], model)


def test_uneven_flag_drives_single_source_of_truth():
    # the planner derives uneven_sharding_used from uneven_units > 0
    model = make_model(layers=2, params_per_layer=1000)
    assert assign_unit_shards([0.75, 0.25], model).uneven_units > 0
    assert assign_unit_shards([0.5, 0.5], model).uneven_units == 0
