"""PSOLAS sorting: best rigid-translation matching, the iterative 2D sorter and the 1D sequential sorter.

The planner only ever looks at measured positions from the last image; ground
truth is read exclusively to fill in the report.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.signal import fftconvolve

from .lattice import LatticeState, SpinState, TargetPattern, as_sites, count_defects
from .register_ops import (ErrorModel, Image, TimingModel, address, image, pump_back,
                           remove_excess, shift)

# Above this many (atom, defect) pairs the overlap table is built by FFT correlation.
_FFT_PAIR_THRESHOLD = 40_000

DEFECT_FREE = "defect_free"
STOP_BOUND = "stop_bound"
RESERVOIR_EXHAUSTED = "reservoir_exhausted"


@dataclass(frozen=True)
class MoveSelection:
    translation: Optional[tuple]
    selected_atom_ids: tuple
    filled_defects: int
    selected_sites: tuple = ()

    @property
    def is_move(self) -> bool:
        return self.translation is not None and self.filled_defects > 0


NO_MOVE = MoveSelection(None, (), 0)


def chebyshev_norm(t) -> np.ndarray:
    return np.max(np.abs(np.asarray(t)), axis=-1)


def _encoder(*site_arrays):
    """Map integer sites of a common bounding box to unique flat keys."""
    stacked = np.concatenate(site_arrays)
    lo = stacked.min(axis=0)
    shape = tuple(stacked.max(axis=0) - lo + 1)

    def encode(sites):
        return np.ravel_multi_index(tuple((sites - lo).T), shape)
    return encode


def overlap_counts(atom_sites, defect_sites):
    """Number of distinct defects hit by ``atom_sites + t`` for every t in the Minkowski box.

    Returns ``(counts, lo)`` where ``counts[idx]`` belongs to translation ``lo + idx``.
    """
    a = np.asarray(atom_sites, dtype=np.int64)
    d = np.asarray(defect_sites, dtype=np.int64)
    amin, amax = a.min(axis=0), a.max(axis=0)
    dmin, dmax = d.min(axis=0), d.max(axis=0)
    agrid = np.zeros(tuple(amax - amin + 1))
    agrid[tuple((a - amin).T)] = 1.0
    dgrid = np.zeros(tuple(dmax - dmin + 1))
    dgrid[tuple((d - dmin).T)] = 1.0
    a = np.argwhere(agrid) + amin  # distinct sites only
    d = np.argwhere(dgrid) + dmin
    lo = dmin - amax
    shape = tuple(dmax - amin - lo + 1)
    if len(a) * len(d) <= _FFT_PAIR_THRESHOLD:
        t = (d[None, :, :] - a[:, None, :]).reshape(-1, a.shape[1]) - lo
        flat = np.ravel_multi_index(tuple(t.T), shape)
        counts = np.bincount(flat, minlength=int(np.prod(shape))).reshape(shape)
        return counts, lo
    flipped = agrid[tuple(slice(None, None, -1) for _ in range(agrid.ndim))]
    counts = np.rint(fftconvolve(dgrid, flipped)).astype(np.int64)
    return counts, lo


def _ranked_candidates(counts, lo, min_count):
    """Translations with count >= min_count, best first: count desc, Chebyshev norm, lexicographic."""
    idx = np.argwhere(counts >= min_count)
    t = idx + lo
    c = counts[tuple(idx.T)]
    keys = [t[:, k] for k in range(t.shape[1] - 1, -1, -1)] + [chebyshev_norm(t), -c]
    order = np.lexsort(keys)
    return t[order], c[order]


def _greedy_separated(sites: np.ndarray, radius: int) -> np.ndarray:
    """Indices of a lexicographic greedy subset with pairwise Chebyshev distance > radius."""
    order = np.lexsort(sites.T[::-1])
    kept = []
    for i in order:
        if all(np.max(np.abs(sites[i] - sites[j])) > radius for j in kept):
            kept.append(i)
    return np.array(sorted(kept, key=lambda k: tuple(sites[k])), dtype=np.int64)


def best_match_translation(atom_sites, defect_sites, atom_ids=None, *, exclude_sites=None,
                           isolation_radius: Optional[int] = None) -> MoveSelection:
    """Rigid translation that moves the most atoms onto distinct defects.

    ``atom_sites`` are measured positions of candidate atoms (``atom_ids``
    defaults to row indices). Atoms sitting on ``exclude_sites`` are never
    selected. When ``isolation_radius`` is set, each translation's preimage is
    thinned greedily (lexicographic order) to atoms pairwise farther apart than
    the radius, and translations are ranked by the thinned count. Ties go to the
    smallest Chebyshev norm of t, then to lexicographic order of t. If several
    atoms share one measured site the lowest id is used.
    """
    a = np.asarray(atom_sites, dtype=np.int64)
    d = np.asarray(defect_sites, dtype=np.int64)
    if a.size == 0 or d.size == 0:
        return NO_MOVE
    ndim = d.shape[-1] if d.ndim == 2 else 1
    a = as_sites(a, ndim)
    d = as_sites(d, ndim)
    ids = np.arange(len(a)) if atom_ids is None else np.asarray(atom_ids, dtype=np.int64)
    if exclude_sites is not None and len(exclude_sites):
        ex = as_sites(exclude_sites, ndim)
        encode = _encoder(a, ex)
        keep = ~np.isin(encode(a), encode(ex))
        a, ids = a[keep], ids[keep]
        if len(a) == 0:
            return NO_MOVE

    # one representative (lowest id) per measured site
    order = np.lexsort([ids] + [a[:, k] for k in range(ndim - 1, -1, -1)])
    a, ids = a[order], ids[order]
    first = np.ones(len(a), dtype=bool)
    first[1:] = np.any(a[1:] != a[:-1], axis=1)
    a, ids = a[first], ids[first]

    counts, lo = overlap_counts(a, d)
    best = int(counts.max())
    if best == 0:
        return NO_MOVE
    d_lo = d.min(axis=0)
    d_shape = tuple(d.max(axis=0) - d_lo + 1)
    d_keys = np.ravel_multi_index(tuple((d - d_lo).T), d_shape)

    def preimage(t):
        moved = a + t - d_lo
        inside = np.all((moved >= 0) & (moved < np.asarray(d_shape)), axis=1)
        hit = np.zeros(len(a), dtype=bool)
        hit[inside] = np.isin(np.ravel_multi_index(tuple(moved[inside].T), d_shape), d_keys)
        return np.flatnonzero(hit)

    if isolation_radius is None:
        cand, _ = _ranked_candidates(counts, lo, best)
        t = cand[0]
        rows = preimage(t)
    else:
        cand, c = _ranked_candidates(counts, lo, 1)
        t, rows, best_key = None, None, None
        for tk, ck in zip(cand, c):
            if best_key is not None and ck < -best_key[0]:
                break  # thinned count never exceeds the raw count
            sub = preimage(tk)
            sub = sub[_greedy_separated(a[sub], isolation_radius)]
            key = (-len(sub), int(chebyshev_norm(tk)), tuple(tk.tolist()))
            if best_key is None or key < best_key:
                t, rows, best_key = tk, sub, key
    rows = rows[np.argsort(ids[rows], kind="stable")]
    return MoveSelection(tuple(int(v) for v in t), tuple(ids[rows].tolist()), len(rows),
                         tuple(map(tuple, a[rows].tolist())))


@dataclass(frozen=True)
class PlanRecord:
    iteration: int
    translation: Optional[tuple]
    selected: int
    predicted_fills: int
    actual_fills: int
    defects_before: int
    defects_after: int
    status: str = "moved"


@dataclass
class SortReport:
    iterations: int = 0
    total_time: float = 0.0
    residual_defects: int = 0
    op_counts: Counter = field(default_factory=Counter)
    defect_trace: list = field(default_factory=list)
    status: str = STOP_BOUND
    completion_time: float = math.inf
    plan: list = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.status == DEFECT_FREE

    def plan_jsonl(self) -> str:
        out = []
        for rec in self.plan:
            row = {"iteration": rec.iteration,
                   "translation": None if rec.translation is None else list(rec.translation),
                   "selected": rec.selected, "predicted_fills": rec.predicted_fills,
                   "actual_fills": rec.actual_fills, "defects_before": rec.defects_before,
                   "defects_after": rec.defects_after, "status": rec.status}
            out.append(json.dumps(row, sort_keys=True) + "\n")
        return "".join(out)

    def summary(self) -> dict:
        return {"status": self.status, "iterations": self.iterations,
                "total_time": self.total_time, "completion_time": self.completion_time,
                "residual_defects": self.residual_defects,
                "op_counts": dict(sorted(self.op_counts.items())),
                "defect_trace": list(self.defect_trace)}


def _measured_view(state: LatticeState, snapshot: Image):
    """Ids and measured sites from ``snapshot`` restricted to atoms still alive in storage."""
    slots = state.slots(snapshot.ids)
    ok = state.alive[slots] & (state.spin[slots] == SpinState.UP)
    return snapshot.ids[ok], snapshot.sites[ok]


def psolas_iteration(state: LatticeState, target: TargetPattern, errors: ErrorModel,
                     timing: TimingModel, rng: np.random.Generator, mode: str = "parallel",
                     isolation: bool = False, snapshot: Optional[Image] = None,
                     iteration: int = 0, counts: Optional[Counter] = None,
                     defects_before: Optional[int] = None) -> PlanRecord:
    """One image -> match -> address -> shift -> pump-back round.

    If ``snapshot`` is given it is used instead of taking a fresh image.
    """
    counts = Counter() if counts is None else counts
    if defects_before is None:
        defects_before = count_defects(state, target)
    if snapshot is None:
        snapshot = image(state, errors, timing, rng)
        counts["image"] += 1
    ids, sites = _measured_view(state, snapshot)
    on_target = target.contains(sites)
    occupied = np.zeros(target.geometry.n_sites, dtype=bool)
    occupied[target.geometry.ravel(sites[on_target])] = True
    holes = target.geometry.unravel(np.flatnonzero(target.mask & ~occupied))
    if len(holes) == 0:
        return PlanRecord(iteration, None, 0, 0, 0, defects_before, defects_before, DEFECT_FREE)
    pool_ids, pool_sites = ids[~on_target], sites[~on_target]
    sel = best_match_translation(pool_sites, holes, pool_ids,
                                 isolation_radius=errors.isolation_radius if isolation else None)
    if not sel.is_move:
        return PlanRecord(iteration, None, 0, 0, 0, defects_before, defects_before,
                          RESERVOIR_EXHAUSTED)

    address(state, sel.selected_atom_ids, errors, timing, rng, mode=mode)
    shift(state, sel.translation, errors, timing, rng)
    pump_back(state, errors, timing, rng)
    counts.update(address=1, shift=1, pump_back=1)

    slots = state.slots(sel.selected_atom_ids)
    landed = state.alive[slots] & (state.spin[slots] == SpinState.UP)
    landed &= target.contains(state.true_sites[slots])
    return PlanRecord(iteration, sel.translation, len(sel.selected_atom_ids), sel.filled_defects,
                      int(landed.sum()), defects_before, count_defects(state, target))


def psolas_sort(state: LatticeState, target: TargetPattern, errors: ErrorModel,
                timing: TimingModel, rng: np.random.Generator, max_iterations: int = 100,
                max_time: float = math.inf, mode: str = "parallel",
                isolation: bool = False) -> SortReport:
    """Iterate PSOLAS rounds until the image shows no defects, then remove excess atoms.

    The trace holds the true defect count before the first round and after
    each round. ``completion_time`` is the end of the image that first showed
    the target defect-free (``inf`` if that never happened).
    """
    report = SortReport()
    report.defect_trace.append(count_defects(state, target))
    while True:
        snap = image(state, errors, timing, rng)
        report.op_counts["image"] += 1
        _, sites = _measured_view(state, snap)
        occupied = np.zeros(target.geometry.n_sites, dtype=bool)
        inside = target.contains(sites)
        occupied[target.geometry.ravel(sites[inside])] = True
        if not np.any(target.mask & ~occupied):
            report.status = DEFECT_FREE
            report.completion_time = state.elapsed_time
            break
        if report.iterations >= max_iterations or state.elapsed_time >= max_time:
            report.status = STOP_BOUND
            break
        rec = psolas_iteration(state, target, errors, timing, rng, mode=mode, isolation=isolation,
                               snapshot=snap, iteration=report.iterations + 1,
                               counts=report.op_counts, defects_before=report.defect_trace[-1])
        if rec.status == RESERVOIR_EXHAUSTED:
            report.plan.append(rec)
            report.status = RESERVOIR_EXHAUSTED
            break
        report.plan.append(rec)
        report.iterations += 1
        report.defect_trace.append(rec.defects_after)
    if report.status == DEFECT_FREE:
        remove_excess(state, target, errors, timing, rng, mode=mode)
        report.op_counts["remove_excess"] += 1
    report.total_time = state.elapsed_time
    report.residual_defects = count_defects(state, target)
    return report


def _assignment_window(positions: np.ndarray, targets: np.ndarray) -> int:
    """Start of the run of consecutive atoms (sorted) closest to the sorted targets."""
    k = len(targets)
    costs = [np.abs(positions[s:s + k] - targets).sum() for s in range(len(positions) - k + 1)]
    return int(np.argmin(costs))


def sequential_sort_1d(state: LatticeState, targets: Sequence[int], errors: ErrorModel,
                       timing: TimingModel, rng: np.random.Generator, max_passes: int = 5,
                       mode: str = "serial") -> SortReport:
    """Move atoms one by one (address, shift, pump back) onto an ordered list of 1D sites.

    The i-th atom from the left goes to the i-th target from the left. Left
    movers are executed left to right and right movers right to left, so no
    atom lands on a site still held by a not-yet-moved atom. After every pass
    an image is taken; residual errors are re-planned for up to ``max_passes``
    passes.
    """
    if state.geometry.ndim != 1:
        raise ValueError("sequential_sort_1d needs a 1D lattice")
    tsorted = np.sort(np.asarray(targets, dtype=np.int64))
    if len(np.unique(tsorted)) != len(tsorted):
        raise ValueError("target sites must be distinct")
    pattern = TargetPattern(state.geometry, tsorted[:, None])
    report = SortReport()
    report.defect_trace.append(count_defects(state, pattern))
    while True:
        snap = image(state, errors, timing, rng)
        report.op_counts["image"] += 1
        ids, sites = _measured_view(state, snap)
        pos = sites[:, 0]
        if np.isin(tsorted, pos).all():
            report.status = DEFECT_FREE
            report.completion_time = state.elapsed_time
            break
        if report.iterations >= max_passes:
            report.status = STOP_BOUND
            break
        if len(pos) < len(tsorted):
            report.status = RESERVOIR_EXHAUSTED
            break
        order = np.argsort(pos, kind="stable")
        pos, ids = pos[order], ids[order]
        start = _assignment_window(pos, tsorted)
        pos, ids = pos[start:start + len(tsorted)], ids[start:start + len(tsorted)]
        disp = tsorted - pos
        left = [i for i in range(len(disp)) if disp[i] < 0]
        right = [i for i in range(len(disp) - 1, -1, -1) if disp[i] > 0]
        before = count_defects(state, pattern)
        for i in left + right:
            slot = state.slots([ids[i]])[0]
            if not (state.alive[slot] and state.spin[slot] == SpinState.UP):
                continue
            address(state, [ids[i]], errors, timing, rng, mode=mode)
            shift(state, (int(disp[i]),), errors, timing, rng)
            pump_back(state, errors, timing, rng)
            report.op_counts.update(address=1, shift=1, pump_back=1)
        report.iterations += 1
        after = count_defects(state, pattern)
        report.plan.append(PlanRecord(report.iterations, None, len(left) + len(right),
                                      len(left) + len(right), max(before - after, 0), before, after))
        report.defect_trace.append(after)
    report.total_time = state.elapsed_time
    report.residual_defects = count_defects(state, pattern)
    return report


def defect_bound(alpha: float, n: int) -> float:
    """Upper bound on the defect fraction after ``n`` rounds: (1 - alpha) ** (1 + n)."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie strictly between 0 and 1")
    if n < 0:
        raise ValueError("n must be non-negative")
    return (1.0 - alpha) ** (1 + n)


def iterations_for_unity(alpha: float, n_sites: int) -> int:
    """Smallest n with n_sites * defect_bound(alpha, n) < 1, found by direct search."""
    if n_sites < 1:
        raise ValueError("n_sites must be at least 1")
    n = 0
    while n_sites * defect_bound(alpha, n) >= 1.0:
        n += 1
    return n


def one_site_shift_operations(n_sites: int) -> float:
    """Operation count of a sorter limited to one-site shifts on a square pattern: sqrt(N)."""
    return math.sqrt(n_sites)
