import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from psolas.lattice import (LatticeGeometry, LatticeState, TargetPattern,
                            count_defects, sample_initial_filling)
from psolas.register_ops import ErrorModel, TimingModel
from psolas.rng import make_rng, trial_rng
from psolas.sorter import (DEFECT_FREE, RESERVOIR_EXHAUSTED, best_match_translation,
                           defect_bound, iterations_for_unity, overlap_counts, psolas_iteration,
                           psolas_sort, sequential_sort_1d)
from oracles import brute_force_match, fraction_sigma

FREE = ErrorModel.error_free()
TIMING = TimingModel()


def random_instance(rng, max_side=15, max_atoms=20, max_defects=20, ndim=2):
    side = int(rng.integers(2, max_side + 1))
    n_sites = side ** ndim
    cells = rng.permutation(n_sites)
    n_a = int(rng.integers(1, min(max_atoms, n_sites - 1) + 1))
    n_d = int(rng.integers(1, min(max_defects, n_sites - n_a) + 1))
    shape = (side,) * ndim
    atoms = np.stack(np.unravel_index(cells[:n_a], shape), axis=1)
    holes = np.stack(np.unravel_index(cells[n_a:n_a + n_d], shape), axis=1)
    return atoms, holes


def test_single_atom_single_defect():
    sel = best_match_translation([[0]], [[7]])
    assert sel.translation == (7,) and sel.filled_defects == 1 and sel.selected_atom_ids == (0,)


def test_identity_wins_tie_break():
    sites = [(1, 1), (4, 2), (3, 3)]
    sel = best_match_translation(sites, sites)
    assert sel.translation == (0, 0) and sel.filled_defects == 3


def test_empty_inputs_give_no_move():
    assert not best_match_translation([], [(1, 1)]).is_move
    assert best_match_translation([(1, 1)], np.zeros((0, 2), int)).translation is None


def test_tie_breaks_on_norm_then_lexicographic():
    # one atom, two defects at the same Chebyshev distance
    sel = best_match_translation([(5, 5)], [(7, 5), (3, 5)])
    assert sel.translation == (-2, 0)
    sel = best_match_translation([(5, 5)], [(5, 9), (6, 5)])
    assert sel.translation == (1, 0)


def test_excluded_sites_never_selected():
    sel = best_match_translation([(0, 0), (2, 0)], [(1, 0), (3, 0)], exclude_sites=[(2, 0)])
    assert sel.selected_atom_ids == (0,)


def test_duplicate_measured_sites_use_lowest_id():
    sel = best_match_translation([(4, 4), (4, 4)], [(5, 4)], atom_ids=[9, 3])
    assert sel.selected_atom_ids == (3,)


def test_fft_and_direct_overlap_agree():
    rng = make_rng(11)
    a = rng.integers(0, 60, size=(400, 2))
    d = rng.integers(0, 60, size=(300, 2))
    counts, lo = overlap_counts(a, d)  # FFT path
    small_a, small_d = np.unique(a, axis=0), np.unique(d, axis=0)
    direct = {}
    for p in small_a.tolist():
        for q in small_d.tolist():
            t = (q[0] - p[0], q[1] - p[1])
            direct[t] = direct.get(t, 0) + 1
    for t, c in list(direct.items())[:2000]:
        assert counts[t[0] - lo[0], t[1] - lo[1]] == c
    assert counts.sum() == len(small_a) * len(small_d)


@pytest.mark.parametrize("seed", range(60))
def test_matcher_against_brute_force(seed):
    rng = make_rng(seed)
    ndim = 1 if seed % 5 == 0 else 2
    atoms, holes = random_instance(rng, ndim=ndim)
    sel = best_match_translation(atoms, holes)
    t, idx = brute_force_match(atoms.tolist(), holes.tolist())
    assert sel.translation == t
    assert sel.selected_atom_ids == idx
    assert sel.filled_defects == len(idx)


@pytest.mark.parametrize("seed", range(30))
def test_isolation_matcher_against_brute_force(seed):
    rng = make_rng(1000 + seed)
    atoms, holes = random_instance(rng)
    radius = int(rng.integers(1, 4))
    sel = best_match_translation(atoms, holes, isolation_radius=radius)
    t, idx = brute_force_match(atoms.tolist(), holes.tolist(), isolation_radius=radius)
    assert (sel.translation, sel.selected_atom_ids) == (t, idx)
    chosen = atoms[list(sel.selected_atom_ids)]
    for i in range(len(chosen)):
        for j in range(i):
            assert np.max(np.abs(chosen[i] - chosen[j])) > radius


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_matcher_selection_lands_on_defects(seed):
    rng = make_rng(seed)
    atoms, holes = random_instance(rng, max_side=25, max_atoms=60, max_defects=60)
    sel = best_match_translation(atoms, holes)
    first = best_match_translation(atoms, holes)
    assert sel == first
    holes_set = {tuple(h) for h in holes.tolist()}
    moved = {tuple(atoms[i] + sel.translation) for i in sel.selected_atom_ids}
    assert moved <= holes_set and len(moved) == sel.filled_defects


def _shifted_copy_state(geometry, target, offset):
    state = LatticeState(geometry)
    state.add_atoms(target.sites + np.asarray(offset))
    return state


def test_iteration_fills_in_one_translation():
    g = LatticeGeometry.square(20)
    target = TargetPattern.centered_square(g, 5)
    state = _shifted_copy_state(g, target, (-7, 0))
    rec = psolas_iteration(state, target, FREE, TIMING, make_rng(0))
    assert rec.translation == (7, 0) and rec.actual_fills == 25 and rec.defects_after == 0
    assert count_defects(state, target) == 0


def test_iteration_reports_reservoir_exhausted():
    g = LatticeGeometry.square(20)
    target = TargetPattern.centered_square(g, 5)
    state = LatticeState(g)
    state.add_atoms(target.sites[1:])
    rec = psolas_iteration(state, target, FREE, TIMING, make_rng(0))
    assert rec.status == RESERVOIR_EXHAUSTED
    report = psolas_sort(state, target, FREE, TIMING, make_rng(0))
    assert report.status == RESERVOIR_EXHAUSTED and report.iterations == 0


def test_first_iteration_fills_at_least_alpha():
    g = LatticeGeometry.square(100)
    target = TargetPattern.centered_square(g, 31)
    fractions = []
    for k in range(100):
        rng = trial_rng(77, k)
        state = sample_initial_filling(g, 0.6, rng)
        rec = psolas_iteration(state, target, FREE, TIMING, rng)
        fractions.append(rec.actual_fills / rec.defects_before)
    assert np.mean(fractions) >= 0.6


def test_addressing_thins_fills():
    g = LatticeGeometry.square(30)
    target = TargetPattern.centered_square(g, 11)
    errors = ErrorModel(address_efficiency=0.8, crosstalk_prob=0, pump_fail_prob=0,
                        transport_spinflip_prob=0, reconstruct_error_prob=0,
                        background_lifetime=math.inf)
    predicted = actual = 0
    for k in range(1000):
        rng = trial_rng(78, k)
        state = sample_initial_filling(g, 0.5, rng)
        rec = psolas_iteration(state, target, errors, TIMING, rng)
        predicted += rec.predicted_fills
        actual += rec.actual_fills
    assert abs(actual / predicted - 0.8) < 3 * fraction_sigma(predicted, 0.8)


def test_sort_defect_free_input():
    g = LatticeGeometry.square(20)
    target = TargetPattern.centered_square(g, 5)
    state = LatticeState(g)
    state.add_atoms(target.sites)
    state.add_atoms([(0, 0)])
    report = psolas_sort(state, target, FREE, TIMING, make_rng(0))
    assert report.status == DEFECT_FREE and report.iterations == 0
    assert report.op_counts["image"] == 1 and report.op_counts["remove_excess"] == 1
    assert report.defect_trace == [0] and len(state) == 25
    assert report.completion_time == TIMING.t_image


@pytest.mark.parametrize("alpha,limit", [(0.6, 9), (0.4, 15)])
def test_sort_error_free_iteration_limit(alpha, limit):
    g = LatticeGeometry.square(100)
    target = TargetPattern.centered_square(g, 31)
    for k in range(40):
        rng = trial_rng(79, k)
        state = sample_initial_filling(g, alpha, rng)
        report = psolas_sort(state, target, FREE, TIMING, rng)
        assert report.success and report.iterations <= limit
        assert len(report.defect_trace) == report.iterations + 1
        assert all(b < a for a, b in zip(report.defect_trace, report.defect_trace[1:]))
        assert report.residual_defects == 0


def test_sort_respects_stop_bounds():
    g = LatticeGeometry.square(100)
    target = TargetPattern.centered_square(g, 31)
    rng = make_rng(3)
    state = sample_initial_filling(g, 0.4, rng)
    report = psolas_sort(state, target, FREE, TIMING, rng, max_iterations=2)
    assert report.status == "stop_bound" and report.iterations == 2
    assert math.isinf(report.completion_time)


def test_plan_dump_is_json_lines():
    g = LatticeGeometry.square(40)
    target = TargetPattern.centered_square(g, 11)
    rng = make_rng(4)
    report = psolas_sort(sample_initial_filling(g, 0.5, rng), target, FREE, TIMING, rng)
    rows = [json.loads(line) for line in report.plan_jsonl().splitlines()]
    assert len(rows) == report.iterations
    assert {"translation", "selected", "predicted_fills", "actual_fills"} <= set(rows[0])


def test_isolation_constraint_in_sort():
    g = LatticeGeometry.square(40)
    target = TargetPattern.centered_square(g, 9)
    errors = ErrorModel(crosstalk_prob=0, pump_fail_prob=0, transport_spinflip_prob=0,
                        reconstruct_error_prob=0, background_lifetime=math.inf,
                        isolation_radius=3)
    rng = make_rng(5)
    state = sample_initial_filling(g, 0.5, rng)
    report = psolas_sort(state, target, errors, TIMING, rng, isolation=True)
    assert report.success
    assert all(rec.selected <= 9 for rec in report.plan)  # at most one atom per 4x4 cell


def _line(positions, extent=100):
    state = LatticeState(LatticeGeometry((extent,)))
    state.add_atoms(np.asarray(positions)[:, None])
    return state


def test_sequential_sort_hand_planned():
    state = _line([0, 17, 40, 71])
    report = sequential_sort_1d(state, [0, 10, 20, 30], FREE, TIMING, make_rng(0))
    assert report.success
    assert sorted(state.true_sites[:, 0].tolist()) == [0, 10, 20, 30]
    assert report.op_counts["shift"] == 3 and report.op_counts["address"] == 3


def test_sequential_sort_nothing_to_do():
    state = _line([3, 8, 13])
    report = sequential_sort_1d(state, [3, 8, 13], FREE, TIMING, make_rng(0))
    assert report.success and report.op_counts["shift"] == 0 and report.iterations == 0


def test_sequential_sort_too_few_atoms():
    state = _line([3, 8])
    report = sequential_sort_1d(state, [3, 4, 5], FREE, TIMING, make_rng(0))
    assert report.status == RESERVOIR_EXHAUSTED


def test_sequential_sort_rejects_2d():
    with pytest.raises(ValueError):
        sequential_sort_1d(LatticeState(LatticeGeometry.square(5)), [1], FREE, TIMING,
                           make_rng(0))


def test_sequential_sort_interleaved_movers():
    # right movers pass over nothing; left movers never land on an occupied site
    state = _line([5, 6, 30, 31, 60])
    report = sequential_sort_1d(state, [10, 20, 30, 40, 50], FREE, TIMING, make_rng(0))
    assert report.success and report.iterations == 1
    assert sorted(state.true_sites[state.alive, 0].tolist()) == [10, 20, 30, 40, 50]


def test_sequential_sort_feedback_recovers_from_failures():
    errors = ErrorModel(address_efficiency=0.5, crosstalk_prob=0, pump_fail_prob=0,
                        transport_spinflip_prob=0, reconstruct_error_prob=0,
                        background_lifetime=math.inf)
    wins = 0
    for k in range(50):
        state = _line([0, 17, 40, 71])
        report = sequential_sort_1d(state, [0, 10, 20, 30], errors, TIMING, trial_rng(5, k),
                                    max_passes=10)
        wins += report.success
    assert wins >= 45


def test_defect_bound_values():
    assert defect_bound(0.6, 0) == pytest.approx(0.4)
    assert defect_bound(0.6, 8) * 961 == pytest.approx(0.252, abs=1e-3)
    assert defect_bound(0.6, 7) * 961 == pytest.approx(0.630, abs=1e-3)
    assert defect_bound(0.4, 13) * 961 == pytest.approx(0.75, abs=5e-3)
    with pytest.raises(ValueError):
        defect_bound(1.0, 1)
    with pytest.raises(ValueError):
        defect_bound(0.5, -1)


def test_iterations_for_unity_values():
    assert iterations_for_unity(0.3, 1) == 0
    assert iterations_for_unity(0.6, 961) == 7
    assert iterations_for_unity(0.4, 961) == 13
    with pytest.raises(ValueError):
        iterations_for_unity(0.5, 0)


@given(st.floats(0.05, 0.95), st.integers(10, 10**6))
def test_iterations_for_unity_doubling(alpha, n):
    step = math.ceil(1 / math.log2(1 / (1 - alpha)))
    assert 0 <= iterations_for_unity(alpha, 2 * n) - iterations_for_unity(alpha, n) <= step


@given(st.floats(0.05, 0.95), st.integers(2, 10**6))
def test_iterations_for_unity_matches_closed_form(alpha, n):
    closed = math.ceil(math.log(n) / math.log(1 / (1 - alpha))) - 1
    assert abs(iterations_for_unity(alpha, n) - closed) <= 1
