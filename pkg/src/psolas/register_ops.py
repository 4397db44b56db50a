"""Physical primitives of the sorting machine and their stochastic error channels.

Each primitive mutates a :class:`~psolas.lattice.LatticeState` in place,
charges its duration from a :class:`TimingModel`, applies background-gas loss
for that duration and finally resolves register collisions by pair loss.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .lattice import LatticeState, SpinState, TargetPattern, resolve_collisions


class PreconditionError(ValueError):
    pass


def _check_prob(name, value):
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value!r}")


@dataclass(frozen=True)
class ErrorModel:
    address_efficiency: float = 1.0
    crosstalk_prob: float = 0.01
    pump_fail_prob: float = 0.004
    transport_spinflip_prob: float = 0.006
    reconstruct_error_prob: float = 0.016
    background_lifetime: float = 360.0
    isolation_radius: int = 20

    def __post_init__(self):
        for name in ("address_efficiency", "crosstalk_prob", "pump_fail_prob",
                     "transport_spinflip_prob", "reconstruct_error_prob"):
            _check_prob(name, getattr(self, name))
        if not self.background_lifetime > 0:
            raise ValueError("background_lifetime must be positive")
        if self.isolation_radius < 0:
            raise ValueError("isolation_radius must be non-negative")

    @classmethod
    def error_free(cls) -> "ErrorModel":
        return cls(address_efficiency=1.0, crosstalk_prob=0.0, pump_fail_prob=0.0,
                   transport_spinflip_prob=0.0, reconstruct_error_prob=0.0,
                   background_lifetime=math.inf)

    def survival(self, dt: float) -> float:
        return math.exp(-dt / self.background_lifetime)


@dataclass(frozen=True)
class TimingModel:
    t_image: float = 1.0
    t_address_per_atom: float = 1e-4
    t_address_parallel_overhead: float = 1e-3
    t_shift: float = 1e-3
    t_pump: float = 2e-3
    t_pushout: float = 1e-3

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value >= 0:
                raise ValueError(f"{name} must be non-negative")

    def address_time(self, n_atoms: int, mode: str) -> float:
        if mode == "parallel":
            return self.t_address_parallel_overhead
        if mode == "serial":
            return self.t_address_per_atom * n_atoms
        raise ValueError(f"unknown addressing mode {mode!r}")

    def scaled(self, factor: float) -> "TimingModel":
        return replace(self, **{k: v * factor for k, v in asdict(self).items()})


@dataclass
class EventLog:
    """Append-only operation log, exported as JSON lines."""

    events: list = field(default_factory=list)

    def record(self, op: str, params: dict, t_before: float, t_after: float, affected) -> None:
        self.events.append({
            "op": op,
            "params": params,
            "t_before": t_before,
            "t_after": t_after,
            "affected": [int(a) for a in affected],
        })

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)

    def __len__(self) -> int:
        return len(self.events)


def _log(state, op, params, t_before, affected):
    if state.log is not None:
        state.log.record(op, params, t_before, state.elapsed_time, np.sort(np.asarray(affected, dtype=np.int64)))


def apply_background_loss(state: LatticeState, dt: float, errors: ErrorModel,
                          rng: np.random.Generator) -> np.ndarray:
    """Each alive atom survives ``dt`` with probability exp(-dt / lifetime). Returns lost ids."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    p_loss = 1.0 - errors.survival(dt)
    if p_loss <= 0.0:
        return np.zeros(0, dtype=np.int64)
    live = np.flatnonzero(state.alive)
    lost = live[rng.random(len(live)) < p_loss]
    return state.kill(lost, "background")


def _elapse(state, dt, errors, rng):
    state.elapsed_time += dt
    return apply_background_loss(state, dt, errors, rng)


@dataclass(frozen=True)
class Image:
    """Measured positions of the storage atoms, in roster order."""

    ids: np.ndarray
    sites: np.ndarray
    time: float

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        for i, s in zip(self.ids.tolist(), self.sites.tolist()):
            yield i, tuple(s)


def _neighbour_offsets(ndim: int) -> np.ndarray:
    grid = np.stack(np.meshgrid(*[[-1, 0, 1]] * ndim, indexing="ij"), axis=-1).reshape(-1, ndim)
    return grid[np.any(grid != 0, axis=1)]


def image(state: LatticeState, errors: ErrorModel, timing: TimingModel,
          rng: np.random.Generator) -> Image:
    """Fluorescence image of the storage register.

    Background loss for the exposure is applied first, so the image shows the
    atoms present at the end of the exposure. Each recorded position is
    displaced to a uniformly chosen neighbouring site with probability
    ``reconstruct_error_prob``.
    """
    t0 = state.elapsed_time
    lost = _elapse(state, timing.t_image, errors, rng)
    up = np.flatnonzero(state.in_register(SpinState.UP))
    measured = state.true_sites[up].copy()
    wrong = np.zeros(len(up), dtype=bool)
    if errors.reconstruct_error_prob > 0:
        offsets = _neighbour_offsets(state.geometry.ndim)
        wrong = rng.random(len(up)) < errors.reconstruct_error_prob
        pick = rng.integers(0, len(offsets), size=len(up))
        measured[wrong] += offsets[pick[wrong]]
    state.measured_sites[up] = measured
    _log(state, "image", {"n_recorded": int(len(up))}, t0,
         np.concatenate([lost, state.ids[up[wrong]]]))
    return Image(state.ids[up].copy(), measured, state.elapsed_time)


def address(state: LatticeState, atom_ids, errors: ErrorModel, timing: TimingModel,
            rng: np.random.Generator, mode: str = "parallel") -> np.ndarray:
    """Spin-flip the given storage atoms into the shift register.

    Returns one success flag per requested id. Storage atoms within
    ``isolation_radius`` (Chebyshev distance) of any addressed atom are flipped
    as well with probability ``crosstalk_prob``.
    """
    t0 = state.elapsed_time
    atom_ids = np.asarray(atom_ids, dtype=np.int64).ravel()
    try:
        slots = state.slots(atom_ids)
    except KeyError as exc:
        raise PreconditionError("address: unknown atom id") from exc
    if len(np.unique(atom_ids)) != len(atom_ids):
        raise PreconditionError("address: duplicate atom ids")
    if not np.all(state.alive[slots]) or np.any(state.spin[slots] != SpinState.UP):
        raise PreconditionError("address: every atom must be alive and in the storage register")

    ok = rng.random(len(slots)) < errors.address_efficiency
    flipped = slots[ok]
    if errors.crosstalk_prob > 0 and errors.isolation_radius > 0 and len(slots):
        others = np.flatnonzero(state.in_register(SpinState.UP))
        others = np.setdiff1d(others, slots)
        if len(others):
            tree = cKDTree(state.true_sites[slots])
            dist, _ = tree.query(state.true_sites[others], k=1, p=np.inf,
                                 distance_upper_bound=errors.isolation_radius + 0.5)
            near = others[np.isfinite(dist)]
            hit = near[rng.random(len(near)) < errors.crosstalk_prob]
            flipped = np.concatenate([flipped, hit])
    state.spin[flipped] = SpinState.DOWN
    _elapse(state, timing.address_time(len(slots), mode), errors, rng)
    resolve_collisions(state)
    _log(state, "address", {"mode": mode, "n_requested": int(len(slots))}, t0, state.ids[flipped])
    return ok


def shift(state: LatticeState, translation, errors: ErrorModel, timing: TimingModel,
          rng: np.random.Generator) -> np.ndarray:
    """Translate the whole shift register by ``translation`` sites. Returns lost ids.

    Duration and loss do not depend on the distance. Atoms that suffer a
    transport spin-flip, or leave the lattice, are lost.
    """
    t0 = state.elapsed_time
    t = np.asarray(translation, dtype=np.int64).reshape(-1)
    if len(t) != state.geometry.ndim:
        raise ValueError("translation dimension does not match the lattice")
    down = np.flatnonzero(state.in_register(SpinState.DOWN))
    state.true_sites[down] += t
    state.measured_sites[down] += t
    flip = down[rng.random(len(down)) < errors.transport_spinflip_prob]
    outside = down[~state.geometry.contains(state.true_sites[down])]
    lost = [state.kill(flip, "spinflip"), state.kill(outside, "boundary")]
    lost.append(_elapse(state, timing.t_shift, errors, rng))
    lost.append(resolve_collisions(state))
    lost = np.concatenate(lost)
    _log(state, "shift", {"translation": t.tolist(), "n_moved": int(len(down))}, t0,
         np.union1d(state.ids[down], lost))
    return lost


def pump_back(state: LatticeState, errors: ErrorModel, timing: TimingModel,
              rng: np.random.Generator) -> np.ndarray:
    """Optically pump the shift register back into storage. Returns lost ids."""
    t0 = state.elapsed_time
    down = np.flatnonzero(state.in_register(SpinState.DOWN))
    fail = rng.random(len(down)) < errors.pump_fail_prob
    lost = [state.kill(down[fail], "pump")]
    state.spin[down[~fail]] = SpinState.UP
    lost.append(_elapse(state, timing.t_pump, errors, rng))
    lost.append(resolve_collisions(state))
    lost = np.concatenate(lost)
    _log(state, "pump_back", {"n_pumped": int(len(down))}, t0, np.union1d(state.ids[down], lost))
    return lost


def push_out(state: LatticeState, errors: ErrorModel, timing: TimingModel,
             rng: np.random.Generator) -> np.ndarray:
    """Resonant push-out: removes every storage-register atom, spares the shift register."""
    t0 = state.elapsed_time
    up = np.flatnonzero(state.in_register(SpinState.UP))
    lost = [state.kill(up, "pushout"), _elapse(state, timing.t_pushout, errors, rng)]
    lost = np.concatenate(lost)
    _log(state, "push_out", {}, t0, lost)
    return lost


@dataclass(frozen=True)
class ExcessReport:
    on_target: int
    off_target: int
    removed: int


def remove_excess(state: LatticeState, target: TargetPattern, errors: ErrorModel,
                  timing: TimingModel, rng: np.random.Generator,
                  mode: str = "parallel") -> ExcessReport:
    """Protect on-target atoms in the shift register, push out the rest, pump back.

    Atoms away from the target that got flipped by addressing crosstalk escape
    the push-out; they are counted in ``off_target``.
    """
    before = len(state)
    up = np.flatnonzero(state.in_register(SpinState.UP))
    on = up[target.contains(state.true_sites[up])]
    if len(on):
        address(state, state.ids[on], errors, timing, rng, mode=mode)
    push_out(state, errors, timing, rng)
    pump_back(state, errors, timing, rng)
    live = np.flatnonzero(state.alive)
    n_on = int(target.contains(state.true_sites[live]).sum())
    return ExcessReport(n_on, len(live) - n_on, before - len(live))
