"""Seeded multi-trial experiments: scenario presets, success-vs-time curves, quantiles, scaling sweeps."""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterable, Sequence

import numpy as np

from .lattice import LatticeGeometry, TargetPattern, sample_initial_filling
from .register_ops import ErrorModel, TimingModel
from .rng import trial_rng, trial_seed_label
from .sorter import SortReport, iterations_for_unity, psolas_sort


class StatisticsError(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    name: str
    alpha: float
    errors: ErrorModel
    timing: TimingModel = field(default_factory=TimingModel)
    grid_size: int = 100
    target_size: int = 31
    mode: str = "parallel"
    max_iterations: int = 500
    max_time: float = math.inf
    isolation: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 1 <= self.target_size <= self.grid_size:
            raise ValueError("target must fit inside the grid")
        if self.mode not in ("serial", "parallel"):
            raise ValueError(f"unknown addressing mode {self.mode!r}")

    @property
    def geometry(self) -> LatticeGeometry:
        return LatticeGeometry.square(self.grid_size)

    @property
    def target(self) -> TargetPattern:
        return TargetPattern.centered_square(self.geometry, self.target_size)

    def with_overrides(self, **params) -> "Scenario":
        """Replace fields by flat name; ErrorModel and TimingModel fields are accepted directly."""
        err_names = {f.name for f in fields(ErrorModel)}
        time_names = {f.name for f in fields(TimingModel)}
        own = {f.name for f in fields(self)} - {"errors", "timing"}
        err, tim, top = {}, {}, {}
        for key, value in params.items():
            if key in err_names:
                err[key] = value
            elif key in time_names:
                tim[key] = value
            elif key in own:
                top[key] = value
            else:
                raise KeyError(f"unknown scenario parameter {key!r}")
        return replace(self, errors=replace(self.errors, **err),
                       timing=replace(self.timing, **tim), **top)

    def error_free(self) -> "Scenario":
        return replace(self, errors=ErrorModel.error_free())

    def flat_params(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k not in ("errors", "timing")}
        out.update(asdict(self.errors))
        out.update(asdict(self.timing))
        return out


def _preset_errors(address_efficiency):
    # Dense 2D arrays: single-site resolved imaging and addressing are assumed,
    # so reconstruction and crosstalk channels are off in the presets.
    return ErrorModel(address_efficiency=address_efficiency, crosstalk_prob=0.0,
                      reconstruct_error_prob=0.0)


SCENARIO_A = Scenario("A", alpha=0.40, errors=_preset_errors(0.80))
SCENARIO_B = Scenario("B", alpha=0.60, errors=_preset_errors(0.95))
PRESETS = {"A": SCENARIO_A, "B": SCENARIO_B}


def scenario_preset(name: str) -> Scenario:
    if name == "custom":
        return replace(SCENARIO_B, name="custom")
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; choose A, B or custom") from None


def run_trial(scenario: Scenario, master_seed: int, index: int) -> SortReport:
    """Trial ``index`` of an ensemble, reproducible in isolation."""
    rng = trial_rng(master_seed, index)
    state = sample_initial_filling(scenario.geometry, scenario.alpha, rng)
    return psolas_sort(state, scenario.target, scenario.errors, scenario.timing, rng,
                       max_iterations=scenario.max_iterations, max_time=scenario.max_time,
                       mode=scenario.mode, isolation=scenario.isolation)


def _run_chunk(args):
    scenario, master_seed, indices = args
    return [run_trial(scenario, master_seed, k) for k in indices]


@dataclass
class EnsembleResult:
    scenario: Scenario
    master_seed: int
    reports: list

    @property
    def n_trials(self) -> int:
        return len(self.reports)

    @property
    def seeds(self) -> list:
        return [trial_seed_label(self.master_seed, k) for k in range(self.n_trials)]

    def completion_times(self) -> np.ndarray:
        return np.array([r.completion_time if r.success else math.inf for r in self.reports])

    def success_fraction(self) -> float:
        return float(np.mean([r.success for r in self.reports]))

    def success_curve(self):
        """Step points (time, fraction of trials defect-free by that time), one per distinct time."""
        times = np.sort(self.completion_times())
        times = times[np.isfinite(times)]
        uniq = np.unique(times)
        probs = np.searchsorted(times, uniq, side="right") / self.n_trials
        return uniq, probs

    def padded_traces(self) -> np.ndarray:
        """Defect traces as a (trials, max_len) array; finished trials hold their last value."""
        length = max(len(r.defect_trace) for r in self.reports)
        out = np.empty((self.n_trials, length))
        for i, r in enumerate(self.reports):
            out[i, :len(r.defect_trace)] = r.defect_trace
            out[i, len(r.defect_trace):] = r.defect_trace[-1]
        return out

    def defect_trace_stats(self):
        """Per iteration: (iteration, mean, 5% quantile, 95% quantile) of the true defect count."""
        traces = self.padded_traces()
        it = np.arange(traces.shape[1])
        return (it, traces.mean(axis=0), np.quantile(traces, 0.05, axis=0),
                np.quantile(traces, 0.95, axis=0))

    def success_curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time_s", "success_probability"])
        for t, p in zip(*self.success_curve()):
            w.writerow([repr(float(t)), repr(float(p))])
        return buf.getvalue()

    def defect_trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "mean_defects", "q05", "q95"])
        for row in zip(*self.defect_trace_stats()):
            w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()

    def trials_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trial", "seed", "status", "iterations", "completion_time_s",
                    "total_time_s", "residual_defects"])
        for k, (seed, r) in enumerate(zip(self.seeds, self.reports)):
            w.writerow([k, seed, r.status, r.iterations, repr(float(r.completion_time)),
                        repr(float(r.total_time)), r.residual_defects])
        return buf.getvalue()


def run_ensemble(scenario: Scenario, n_trials: int, master_seed: int,
                 parallelism_hint: int = 1) -> EnsembleResult:
    """Run ``n_trials`` independent trials; output does not depend on ``parallelism_hint``."""
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    workers = max(1, min(int(parallelism_hint), n_trials))
    if workers == 1:
        reports = [run_trial(scenario, master_seed, k) for k in range(n_trials)]
    else:
        chunks = [range(k, n_trials, workers) for k in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chunk, [(scenario, master_seed, c) for c in chunks]))
        reports = [None] * n_trials
        for chunk, part in zip(chunks, parts):
            for k, rep in zip(chunk, part):
                reports[k] = rep
    return EnsembleResult(scenario, int(master_seed), reports)


def success_quantile(result, p: float) -> float:
    """Nearest-rank p-quantile of completion times; failed trials count as +inf.

    ``result`` is an :class:`EnsembleResult` or a sequence of completion times.
    """
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie strictly between 0 and 1")
    times = result.completion_times() if isinstance(result, EnsembleResult) else \
        np.asarray(result, dtype=float)
    n = len(times)
    if n < math.ceil(1.0 / (1.0 - p) - 1e-9):
        raise StatisticsError(f"need at least {math.ceil(1.0 / (1.0 - p) - 1e-9)} trials "
                              f"for the {p} quantile, got {n}")
    rank = math.ceil(p * n - 1e-9)
    return float(np.sort(times)[max(rank, 1) - 1])


@dataclass(frozen=True)
class SweepRow:
    alpha: float
    n_sites: int
    mean_iterations: float
    bound: int
    success_fraction: float


def scaling_sweep(alphas: Sequence[float], sizes: Iterable[int], n_trials: int, seed: int,
                  grid_size: int = 100, parallelism_hint: int = 1) -> list:
    """Error-free iteration counts versus target size N (a perfect square) and filling alpha."""
    alphas, sizes = list(alphas), list(sizes)
    if not alphas or not sizes:
        raise ValueError("parameter grids must not be empty")
    rows = []
    for i, alpha in enumerate(alphas):
        for j, n in enumerate(sizes):
            side = math.isqrt(int(n))
            if side * side != n:
                raise ValueError(f"target size {n} is not a perfect square")
            scen = Scenario(f"sweep-{alpha}-{n}", alpha=alpha, errors=ErrorModel.error_free(),
                            grid_size=grid_size, target_size=side)
            point_seed = int(np.random.SeedSequence([int(seed), i, j]).generate_state(1)[0])
            res = run_ensemble(scen, n_trials, point_seed, parallelism_hint)
            its = [r.iterations for r in res.reports]
            rows.append(SweepRow(alpha, int(n), float(np.mean(its)),
                                 iterations_for_unity(alpha, int(n)), res.success_fraction()))
    return rows


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["alpha", "n_sites", "mean_iterations", "bound_iterations", "success_fraction"])
    for r in rows:
        w.writerow([repr(r.alpha), r.n_sites, repr(r.mean_iterations), r.bound,
                    repr(r.success_fraction)])
    return buf.getvalue()
