import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from algebra_nn.cost import LayerSpec, model_cost
from algebra_nn.nn.serialize import CheckpointError
from algebra_nn.pruning import (Criterion, PruneMask, PruneSchedule, UnsupportedCriterionError, criterion_score,
                                dumps_mask, loads_mask, prune_step, sparsity_csv, sparsity_report, target_sparsity)


def make_params(seed=0, dim=4):
    rng = np.random.default_rng(seed)
    return {
        "fc1.weight": rng.normal(size=(6, 5, dim)),
        "fc2.weight": rng.normal(size=(4, 6, dim)),
        "out.weight": rng.normal(size=(3, 4, dim)),
    }


def oracle_mask(params, keep, names, target, algebra="M2R", criterion="frobenius"):
    """Sort every live tuple by (score, layer, index) and mask the first ones."""
    total = sum(keep[n].size for n in names)
    masked = sum(int((~keep[n]).sum()) for n in names)
    live = []
    for li, name in enumerate(names):
        scores = criterion_score(params[name], criterion, algebra).ravel()
        for idx in np.flatnonzero(keep[name].ravel()):
            live.append((scores[idx], li, idx))
    live.sort()
    out = {n: keep[n].copy() for n in names}
    for _, li, idx in live[:max(math.ceil(target * total - 1e-9) - masked, 0)]:
        out[names[li]].reshape(-1)[idx] = False
    return out


# schedule


def test_schedule_examples():
    s = PruneSchedule(10000, 0.8, interval=1)
    assert (s.start, s.end) == (2000, 8000)
    assert target_sparsity(s, 0) == 0.0
    assert target_sparsity(s, 2000) == 0.0
    assert target_sparsity(s, 5000) == pytest.approx(0.7)
    assert target_sparsity(s, 8000) == 0.8
    assert target_sparsity(s, 9999) == 0.8


@pytest.mark.parametrize("final", [0.5, 0.7, 0.9])
def test_midpoint_is_seven_eighths(final):
    s = PruneSchedule(1000, final, interval=1)
    assert target_sparsity(s, 500) == pytest.approx(0.875 * final, abs=1e-15)


def test_target_held_between_boundaries():
    s = PruneSchedule(1000, 0.9, interval=100)
    assert target_sparsity(s, 250) == target_sparsity(s, 200)
    assert target_sparsity(s, 399) == target_sparsity(s, 300)
    assert s.boundaries() == [200, 300, 400, 500, 600, 700, 800]


@settings(max_examples=50, deadline=None)
@given(st.integers(100, 5000), st.floats(0.0, 0.99), st.integers(1, 200))
def test_target_is_monotone_and_bounded(total, final, interval):
    s = PruneSchedule(total, final, interval=interval)
    values = [target_sparsity(s, t) for t in range(0, total + 1, max(total // 50, 1))]
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert 0.0 <= min(values) and max(values) <= final


def test_schedule_validation():
    with pytest.raises(ValueError):
        PruneSchedule(100, 1.0)
    with pytest.raises(ValueError):
        PruneSchedule(100, 0.5, interval=0)


# criteria


def test_criterion_examples():
    assert criterion_score(np.array([1.0, 2.0, 3.0, 4.0]), "determinant") == pytest.approx(2.0)
    assert criterion_score(np.array([2.0, 0.0, 0.0, 3.0]), "max_eigenvalue") == pytest.approx(3.0)
    assert criterion_score(np.array([2.0, 0.0, 0.0, 3.0]), "min_eigenvalue") == pytest.approx(2.0)
    assert criterion_score(np.array([3.0, 4.0]), "frobenius", "C") == pytest.approx(5.0)


def test_eigen_criteria_match_numpy():
    rng = np.random.default_rng(1)
    t = rng.normal(size=(200, 4))
    moduli = np.sort(np.abs(np.linalg.eigvals(t.reshape(-1, 2, 2))), axis=1)
    np.testing.assert_allclose(criterion_score(t, "min_eigenvalue"), moduli[:, 0], atol=1e-12)
    np.testing.assert_allclose(criterion_score(t, "max_eigenvalue"), moduli[:, 1], atol=1e-12)


def test_matrix_criteria_need_two_by_two():
    with pytest.raises(UnsupportedCriterionError):
        criterion_score(np.ones(4), "determinant", "H")


# prune_step


@pytest.mark.parametrize("final", [0.5, 0.7, 0.9])
@pytest.mark.parametrize("criterion", ["frobenius", "determinant", "max_eigenvalue"])
def test_every_boundary_matches_oracle_and_target(final, criterion):
    params = make_params()
    names = ["fc1.weight", "fc2.weight"]
    mask = PruneMask.dense(params, names, ["out.weight"])
    frozen_before = params["out.weight"].copy()
    s = PruneSchedule(1000, final, interval=100)
    n_total = sum(mask.keep[n].size for n in names)
    for step in s.boundaries():
        expect = oracle_mask(params, mask.keep, names, target_sparsity(s, step), criterion=criterion)
        prev = mask
        mask = prune_step(params, mask, s, step, criterion, "M2R")
        for n in names:
            np.testing.assert_array_equal(mask.keep[n], expect[n])
            assert not np.any(mask.keep[n] & ~prev.keep[n])  # monotone
        assert abs(mask.sparsity() - target_sparsity(s, step)) <= 1.0 / n_total
    assert mask.keep["out.weight"].all()
    np.testing.assert_array_equal(params["out.weight"], frozen_before)
    for n in names:
        assert np.all(params[n][~mask.keep[n]] == 0.0)


def test_mask_count_uses_ceiling():
    params = make_params()
    mask = PruneMask.dense(params, ["fc1.weight"])
    s = PruneSchedule(100, 0.5, start_fraction=0.0, end_fraction=0.01, interval=1)
    mask = prune_step(params, mask, s, 1, "frobenius", "M2R")
    assert mask.counts() == (15, 30)


def test_ties_break_by_layer_then_index():
    params = {"a.weight": np.ones((2, 2, 1)), "b.weight": np.ones((2, 2, 1))}
    mask = PruneMask.dense(params, ["a.weight", "b.weight"])
    s = PruneSchedule(100, 0.5, start_fraction=0.0, end_fraction=0.01, interval=1)
    mask = prune_step(params, mask, s, 1, "frobenius", "R")
    assert not mask.keep["a.weight"].any()
    assert mask.keep["b.weight"].all()


def test_per_layer_mode_hits_target_in_each_layer():
    params = make_params(3)
    mask = PruneMask.dense(params, ["fc1.weight", "fc2.weight"])
    s = PruneSchedule(100, 0.5, start_fraction=0.0, end_fraction=0.01, interval=1)
    mask = prune_step(params, mask, s, 1, "frobenius", "M2R", per_layer=True)
    assert (~mask.keep["fc1.weight"]).sum() == 15
    assert (~mask.keep["fc2.weight"]).sum() == 12


def test_component_mode():
    params = make_params(4)
    mask = PruneMask.dense(params, ["fc1.weight"], mode="component")
    s = PruneSchedule(100, 0.5, start_fraction=0.0, end_fraction=0.01, interval=1)
    mask = prune_step(params, mask, s, 1, "component", "M2R")
    assert mask.keep["fc1.weight"].shape == (6, 5, 4)
    assert mask.counts() == (60, 120)
    with pytest.raises(ValueError):
        prune_step(params, PruneMask.dense(params, ["fc1.weight"]), s, 1, "component", "M2R")


def test_off_boundary_step_is_rejected():
    params = make_params()
    s = PruneSchedule(1000, 0.5)
    with pytest.raises(ValueError):
        prune_step(params, PruneMask.dense(params, ["fc1.weight"]), s, 250)


# reports and serialisation


def test_ninety_percent_tuple_sparsity_cuts_multiplies_tenfold():
    params = {"fc.weight": np.random.default_rng(5).normal(size=(10, 10, 4))}
    mask = PruneMask.dense(params, ["fc.weight"])
    s = PruneSchedule(100, 0.9, start_fraction=0.0, end_fraction=0.01, interval=1)
    mask = prune_step(params, mask, s, 1, "frobenius", "M2R")
    spec = LayerSpec("fc", "linear", "M2R", 10, 10, bias=False)
    rows = sparsity_report(mask, [spec])
    assert rows[0].tuples_masked == 90
    assert rows[0].multiplies_remaining * 10 == model_cost([spec]).multiplies


def test_component_half_sparsity_halves_params():
    params = {"fc.weight": np.random.default_rng(6).normal(size=(4, 4, 4))}
    mask = PruneMask.dense(params, ["fc.weight"], mode="component")
    s = PruneSchedule(100, 0.5, start_fraction=0.0, end_fraction=0.01, interval=1)
    mask = prune_step(params, mask, s, 1, "component", "M2R")
    spec = LayerSpec("fc", "linear", "M2R", 4, 4, bias=False)
    (row,) = sparsity_report(mask, [spec])
    assert row.params_remaining * 2 == model_cost([spec]).real_params
    assert row.multiplies_remaining == model_cost([spec]).multiplies


def test_sparsity_csv_reports_frozen_layer_as_unmasked():
    params = make_params()
    mask = PruneMask.dense(params, ["fc1.weight", "fc2.weight"], ["out.weight"])
    s = PruneSchedule(100, 0.5, start_fraction=0.0, end_fraction=0.01, interval=1)
    mask = prune_step(params, mask, s, 1, "frobenius", "M2R")
    specs = [LayerSpec("fc1", "linear", "M2R", 5, 6), LayerSpec("fc2", "linear", "M2R", 6, 4),
             LayerSpec("out", "linear", "M2R", 4, 3)]
    rows = sparsity_report(mask, specs)
    assert rows[2].tuples_masked == 0
    text = sparsity_csv(rows, ["fc1", "fc2"])
    lines = dict(line.split(",", 1) for line in text.splitlines()[1:])
    assert lines["TOTAL_prunable"].endswith("0.500000")
    assert float(lines["TOTAL_all"].rsplit(",", 1)[1]) < 0.5


def test_mask_round_trip():
    params = make_params(7)
    mask = PruneMask.dense(params, ["fc1.weight", "fc2.weight"], ["out.weight"])
    s = PruneSchedule(100, 0.7, start_fraction=0.0, end_fraction=0.01, interval=1)
    mask = prune_step(params, mask, s, 1, "frobenius", "M2R")
    back, meta = loads_mask(dumps_mask(mask, {"step": 1}))
    assert meta == {"step": 1}
    assert back.mode == mask.mode and back.frozen == mask.frozen
    for k in mask.keep:
        np.testing.assert_array_equal(back.keep[k], mask.keep[k])


def test_corrupt_mask_is_rejected():
    params = make_params()
    blob = dumps_mask(PruneMask.dense(params, ["fc1.weight"]))
    with pytest.raises(CheckpointError):
        loads_mask(blob[:-2])
    with pytest.raises(CheckpointError):
        loads_mask(b"XXXXXXXX" + blob[8:])
    assert Criterion("frobenius") is Criterion.FROBENIUS
