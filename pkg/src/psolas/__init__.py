"""Simulator and planner for atom sorting in polarization-synthesized optical lattices."""

__version__ = "0.1.0"

from .lattice import (LatticeGeometry, LatticeState, PhysicalLatticeParams, SpinState,
                      TargetPattern, defects, occupancy_check, sample_initial_filling)
from .montecarlo import (SCENARIO_A, SCENARIO_B, Scenario, run_ensemble, scaling_sweep,
                         success_quantile)
from .register_ops import ErrorModel, TimingModel
from .sorter import (best_match_translation, defect_bound, iterations_for_unity, psolas_sort,
                     sequential_sort_1d)
