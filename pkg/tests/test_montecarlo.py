import math
from dataclasses import replace

import numpy as np
import pytest

from psolas.lattice import sample_initial_filling
from psolas.montecarlo import (SCENARIO_A, SCENARIO_B, Scenario, StatisticsError, run_ensemble,
                               run_trial, scaling_sweep, scenario_preset, success_quantile,
                               sweep_csv)
from psolas.register_ops import ErrorModel
from psolas.rng import trial_rng
from psolas.sorter import psolas_sort

SMALL = Scenario("small", alpha=0.5, errors=ErrorModel(address_efficiency=0.9, crosstalk_prob=0,
                                                       reconstruct_error_prob=0),
                 grid_size=30, target_size=9, max_iterations=200)


def test_presets_are_fixed():
    assert (SCENARIO_A.alpha, SCENARIO_A.errors.address_efficiency) == (0.40, 0.80)
    assert (SCENARIO_B.alpha, SCENARIO_B.errors.address_efficiency) == (0.60, 0.95)
    with pytest.raises(Exception):
        SCENARIO_A.alpha = 0.9
    assert scenario_preset("custom").alpha == 0.60
    with pytest.raises(KeyError):
        scenario_preset("C")


def test_scenario_overrides():
    s = SCENARIO_A.with_overrides(alpha=0.3, t_image=0.5, pump_fail_prob=0.0)
    assert s.alpha == 0.3 and s.timing.t_image == 0.5 and s.errors.pump_fail_prob == 0.0
    assert s.errors.address_efficiency == 0.80
    with pytest.raises(KeyError):
        SCENARIO_A.with_overrides(colour="red")
    assert len(SCENARIO_B.target) == 961 and SCENARIO_B.geometry.n_sites == 10_000


def test_single_trial_equals_direct_call():
    res = run_ensemble(SMALL, 1, master_seed=42)
    rng = trial_rng(42, 0)
    state = sample_initial_filling(SMALL.geometry, SMALL.alpha, rng)
    direct = psolas_sort(state, SMALL.target, SMALL.errors, SMALL.timing, rng,
                         max_iterations=SMALL.max_iterations)
    assert res.reports[0].summary() == direct.summary()
    assert res.seeds == ["42/0"]


def test_trial_is_reproducible_in_isolation():
    res = run_ensemble(SMALL, 6, master_seed=8)
    assert run_trial(SMALL, 8, 4).summary() == res.reports[4].summary()


def test_ensemble_is_deterministic_across_workers():
    a = run_ensemble(SMALL, 12, master_seed=5)
    b = run_ensemble(SMALL, 12, master_seed=5)
    c = run_ensemble(SMALL, 12, master_seed=5, parallelism_hint=3)
    assert a.success_curve_csv() == b.success_curve_csv() == c.success_curve_csv()
    assert a.defect_trace_csv() == c.defect_trace_csv()
    assert a.trials_csv() == c.trials_csv()
    d = run_ensemble(SMALL, 12, master_seed=6)
    assert d.trials_csv() != a.trials_csv()


def test_success_curve_monotone_and_ends_at_success_fraction():
    res = run_ensemble(SMALL, 30, master_seed=1)
    times, probs = res.success_curve()
    assert np.all(np.diff(times) > 0) and np.all(np.diff(probs) > 0)
    assert probs[-1] == pytest.approx(res.success_fraction())


def test_failed_trials_are_infinite():
    scen = replace(SMALL, max_iterations=0, alpha=0.2)
    res = run_ensemble(scen, 20, master_seed=2)
    assert res.success_fraction() == 0.0
    assert np.all(np.isinf(res.completion_times()))
    assert math.isinf(success_quantile(res, 0.95))
    assert res.success_curve_csv() == "time_s,success_probability\n"


def test_quantile_nearest_rank():
    assert success_quantile(np.arange(1, 101), 0.95) == 95
    assert success_quantile(np.arange(1, 101), 0.5) == 50
    assert success_quantile(np.arange(1, 101), 0.951) == 96
    for p in (0.05, 0.5, 0.95):
        assert success_quantile([2.5] * 40, p) == 2.5


def test_quantile_counts_failures():
    times = [1.0] * 94 + [math.inf] * 6
    assert math.isinf(success_quantile(times, 0.95))
    times = [1.0] * 95 + [math.inf] * 5
    assert success_quantile(times, 0.95) == 1.0


def test_quantile_needs_enough_trials():
    with pytest.raises(StatisticsError):
        success_quantile([1.0] * 19, 0.95)
    assert success_quantile([1.0] * 20, 0.95) == 1.0
    with pytest.raises(ValueError):
        success_quantile([1.0] * 20, 1.0)


def test_defect_trace_stats_shape():
    res = run_ensemble(SMALL, 10, master_seed=3)
    it, mean, q05, q95 = res.defect_trace_stats()
    assert it[0] == 0 and len(it) == max(len(r.defect_trace) for r in res.reports)
    assert np.all(q05 <= mean + 1e-12) and np.all(mean <= q95 + 1e-12)
    header = res.defect_trace_csv().splitlines()[0]
    assert header == "iteration,mean_defects,q05,q95"


def test_sweep_single_site_target():
    rows = scaling_sweep([0.4, 0.6], [1], n_trials=20, seed=0, grid_size=20)
    for r in rows:
        assert r.mean_iterations <= 1 and r.bound == 0 and r.success_fraction == 1.0


def test_sweep_more_iterations_at_lower_alpha():
    rows = scaling_sweep([0.4, 0.6], [121], n_trials=30, seed=1, grid_size=40)
    low, high = rows
    assert low.mean_iterations > high.mean_iterations
    for r in rows:
        assert r.mean_iterations <= r.bound + 2 and r.success_fraction == 1.0
    text = sweep_csv(rows)
    assert text.splitlines()[0] == "alpha,n_sites,mean_iterations,bound_iterations,success_fraction"


def test_sweep_rejects_bad_sizes():
    with pytest.raises(ValueError):
        scaling_sweep([0.5], [10], 1, 0)
    with pytest.raises(ValueError):
        scaling_sweep([], [9], 1, 0)
