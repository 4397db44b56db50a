"""Discrete dual-register lattice: geometry, occupancy state and target patterns.

Atoms live on integer sites of a 1D or 2D grid. Each atom sits in one of two
registers: the static storage lattice (spin up) or the movable shift lattice
(spin down). The state is kept as parallel numpy arrays so that operations on
thousands of atoms stay vectorized; dead atoms stay in the arrays with
``alive = False`` so that ids never get reused.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np


class LatticeError(ValueError):
    """Raised for sites or regions that do not fit the lattice geometry."""


class ConsistencyError(RuntimeError):
    """Raised when the one-atom-per-site invariant is found broken."""


class SpinState(enum.IntEnum):
    # UP: |F=4, m_F=4>, storage register. DOWN: |F=3, m_F=3>, shift register.
    UP = 0
    DOWN = 1


@dataclass(frozen=True)
class PhysicalLatticeParams:
    """Documented apparatus constants. Never integrated by the simulator."""

    wavelength: float = 866e-9
    depth_up: float = 75e-6  # kelvin
    depth_down: float = 75e-6
    omega_parallel: float = 2 * math.pi * 110e3
    omega_perp: float = 2 * math.pi * 20e3
    omega_recoil: float = 2 * math.pi * 2e3

    def __post_init__(self):
        for name in ("wavelength", "depth_up", "depth_down", "omega_parallel",
                     "omega_perp", "omega_recoil"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")

    @property
    def site_pitch(self) -> float:
        return self.wavelength / 2

    @property
    def k_lattice(self) -> float:
        return 2 * math.pi / self.wavelength


@dataclass(frozen=True)
class LatticeGeometry:
    """Rectangular grid of ``extent`` sites, coordinates ``0 .. extent[i] - 1``."""

    extent: tuple
    site_pitch: float = 433e-9

    def __post_init__(self):
        ext = tuple(int(e) for e in np.atleast_1d(self.extent))
        if len(ext) not in (1, 2):
            raise LatticeError("only 1D and 2D lattices are supported")
        if min(ext) < 1:
            raise LatticeError("extent must be at least 1 on every axis")
        if not self.site_pitch > 0:
            raise LatticeError("site_pitch must be positive")
        object.__setattr__(self, "extent", ext)

    @classmethod
    def square(cls, side: int, **kwargs) -> "LatticeGeometry":
        return cls((side, side), **kwargs)

    @property
    def ndim(self) -> int:
        return len(self.extent)

    @property
    def n_sites(self) -> int:
        return int(np.prod(self.extent))

    def contains(self, sites) -> np.ndarray:
        """Boolean mask of which rows of ``sites`` (shape (n, ndim)) are on the grid."""
        sites = as_sites(sites, self.ndim)
        return np.all((sites >= 0) & (sites < np.asarray(self.extent)), axis=1)

    def ravel(self, sites) -> np.ndarray:
        """Linear index of in-grid sites (x-major)."""
        sites = as_sites(sites, self.ndim)
        if self.ndim == 1:
            return sites[:, 0].copy()
        return sites[:, 0] * self.extent[1] + sites[:, 1]

    def unravel(self, index) -> np.ndarray:
        index = np.asarray(index, dtype=np.int64)
        if self.ndim == 1:
            return index[:, None].copy()
        return np.stack(np.divmod(index, self.extent[1]), axis=1)

    def all_sites(self) -> np.ndarray:
        return self.unravel(np.arange(self.n_sites))


def as_sites(sites, ndim: int) -> np.ndarray:
    """Coerce a sequence of site vectors to an int64 array of shape (n, ndim)."""
    arr = np.asarray(sites, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, ndim), dtype=np.int64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, ndim) if ndim > 1 else arr[:, None]
    if arr.ndim != 2 or arr.shape[1] != ndim:
        raise LatticeError(f"expected sites of dimension {ndim}, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class TargetPattern:
    """Non-empty set of grid sites that should each hold exactly one atom."""

    geometry: LatticeGeometry
    sites: np.ndarray = field(repr=False)

    def __post_init__(self):
        sites = as_sites(self.sites, self.geometry.ndim)
        if len(sites) == 0:
            raise LatticeError("target pattern must not be empty")
        if not self.geometry.contains(sites).all():
            raise LatticeError("target pattern leaves the lattice")
        idx = np.unique(self.geometry.ravel(sites))
        object.__setattr__(self, "sites", self.geometry.unravel(idx))
        mask = np.zeros(self.geometry.n_sites, dtype=bool)
        mask[idx] = True
        object.__setattr__(self, "_mask", mask)

    @classmethod
    def centered_square(cls, geometry: LatticeGeometry, side: int) -> "TargetPattern":
        """A ``side`` x ``side`` block (or ``side`` sites in 1D) in the middle of the grid."""
        starts = [(e - side) // 2 for e in geometry.extent]
        axes = [np.arange(s, s + side) for s in starts]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, geometry.ndim)
        return cls(geometry, grid)

    @property
    def mask(self) -> np.ndarray:
        """Flat boolean mask over all grid sites."""
        return self._mask

    def __len__(self) -> int:
        return len(self.sites)

    def contains(self, sites) -> np.ndarray:
        sites = as_sites(sites, self.geometry.ndim)
        inside = self.geometry.contains(sites)
        out = np.zeros(len(sites), dtype=bool)
        out[inside] = self._mask[self.geometry.ravel(sites[inside])]
        return out


@dataclass(frozen=True)
class Atom:
    id: int
    true_site: tuple
    measured_site: tuple
    spin: SpinState
    alive: bool


class LatticeState:
    """Dual-register occupancy of one trial.

    Arrays are indexed by atom slot; ``ids[k]`` is the stable id of slot ``k``.
    Public register operations keep at most one alive atom per (register, site).
    """

    def __init__(self, geometry: LatticeGeometry, log=None):
        self.geometry = geometry
        d = geometry.ndim
        self.ids = np.zeros(0, dtype=np.int64)
        self.true_sites = np.zeros((0, d), dtype=np.int64)
        self.measured_sites = np.zeros((0, d), dtype=np.int64)
        self.spin = np.zeros(0, dtype=np.int8)
        self.alive = np.zeros(0, dtype=bool)
        self.elapsed_time = 0.0
        self.log = log

    def __len__(self) -> int:
        return int(self.alive.sum())

    def __repr__(self) -> str:
        up, down = self.register_counts()
        return (f"LatticeState(extent={self.geometry.extent}, storage={up}, "
                f"shift={down}, t={self.elapsed_time:.6g})")

    def add_atoms(self, sites, spin: SpinState = SpinState.UP) -> np.ndarray:
        """Append atoms at ``sites`` and return their ids. Sites must be on the grid."""
        sites = as_sites(sites, self.geometry.ndim)
        if not self.geometry.contains(sites).all():
            raise LatticeError("cannot place atoms outside the lattice")
        start = int(self.ids.max()) + 1 if len(self.ids) else 0
        new_ids = np.arange(start, start + len(sites), dtype=np.int64)
        self.ids = np.concatenate([self.ids, new_ids])
        self.true_sites = np.concatenate([self.true_sites, sites])
        self.measured_sites = np.concatenate([self.measured_sites, sites])
        self.spin = np.concatenate([self.spin, np.full(len(sites), int(spin), dtype=np.int8)])
        self.alive = np.concatenate([self.alive, np.ones(len(sites), dtype=bool)])
        resolve_collisions(self)
        return new_ids

    def copy(self) -> "LatticeState":
        new = LatticeState(self.geometry)
        for name in ("ids", "true_sites", "measured_sites", "spin", "alive"):
            setattr(new, name, getattr(self, name).copy())
        new.elapsed_time = self.elapsed_time
        return new

    def slots(self, atom_ids) -> np.ndarray:
        """Array slots for the given ids; raises KeyError for unknown ids."""
        atom_ids = np.asarray(atom_ids, dtype=np.int64).ravel()
        pos = np.searchsorted(self.ids, atom_ids)
        pos = np.clip(pos, 0, max(len(self.ids) - 1, 0))
        if len(atom_ids) and (len(self.ids) == 0 or np.any(self.ids[pos] != atom_ids)):
            raise KeyError("unknown atom id")
        return pos

    def in_register(self, spin: SpinState) -> np.ndarray:
        return self.alive & (self.spin == int(spin))

    def register_counts(self) -> tuple:
        return (int(self.in_register(SpinState.UP).sum()),
                int(self.in_register(SpinState.DOWN).sum()))

    def atoms(self, include_dead: bool = False) -> Iterator[Atom]:
        for k in range(len(self.ids)):
            if not (include_dead or self.alive[k]):
                continue
            yield Atom(int(self.ids[k]), tuple(int(v) for v in self.true_sites[k]),
                       tuple(int(v) for v in self.measured_sites[k]),
                       SpinState(int(self.spin[k])), bool(self.alive[k]))

    def occupancy_grid(self, spin: SpinState = SpinState.UP, measured: bool = False) -> np.ndarray:
        """Count of alive atoms per site in one register, reshaped to the grid."""
        mask = self.in_register(spin)
        if measured:
            sites = self.measured_sites[mask]
            sites = sites[self.geometry.contains(sites)]
        else:
            sites = self.true_sites[mask]  # alive atoms never sit outside the grid
        counts = np.bincount(self.geometry.ravel(sites), minlength=self.geometry.n_sites)
        return counts.reshape(self.geometry.extent)

    def kill(self, slots, reason: str = "") -> np.ndarray:
        """Mark the given slots dead; returns the ids that actually died."""
        slots = np.asarray(slots, dtype=np.int64)
        slots = slots[self.alive[slots]]
        self.alive[slots] = False
        return self.ids[slots]


def resolve_collisions(state: LatticeState) -> np.ndarray:
    """Pair loss: every (register, site) with two or more alive atoms loses all of them."""
    live = np.flatnonzero(state.alive)
    if len(live) < 2:
        return np.zeros(0, dtype=np.int64)
    key = state.geometry.ravel(state.true_sites[live]) * 2 + state.spin[live]
    counts = np.bincount(key, minlength=2 * state.geometry.n_sites)
    crowded = counts[key] > 1
    if not crowded.any():
        return np.zeros(0, dtype=np.int64)
    return state.kill(live[crowded], "collision")


def sample_initial_filling(geometry: LatticeGeometry, alpha: float, rng: np.random.Generator,
                           region=None, log=None) -> LatticeState:
    """Load each site of ``region`` (default: whole grid) with one storage atom with probability ``alpha``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if region is None:
        sites = geometry.all_sites()
    else:
        sites = as_sites(region.sites if isinstance(region, TargetPattern) else region, geometry.ndim)
        if not geometry.contains(sites).all():
            raise LatticeError("region lies outside the lattice geometry")
        sites = geometry.unravel(np.unique(geometry.ravel(sites)))
    state = LatticeState(geometry, log=log)
    filled = rng.random(len(sites)) < alpha
    state.add_atoms(sites[filled])
    return state


def sample_isolated_atoms(geometry: LatticeGeometry, n_atoms: int, min_separation: int,
                          rng: np.random.Generator, log=None) -> LatticeState:
    """1D state with ``n_atoms`` storage atoms, consecutive atoms more than ``min_separation`` apart."""
    if geometry.ndim != 1:
        raise LatticeError("isolated-atom sampling is defined for 1D lattices")
    gap = min_separation + 1
    free = geometry.extent[0] - (n_atoms - 1) * gap
    if free < 1:
        raise LatticeError("lattice too short for the requested isolation")
    base = np.sort(rng.integers(0, free, size=n_atoms))
    state = LatticeState(geometry, log=log)
    state.add_atoms((base + gap * np.arange(n_atoms))[:, None])
    return state


def defects(state: LatticeState, target: TargetPattern, measured: bool = False) -> np.ndarray:
    """Target sites without an alive storage atom, as an (m, ndim) array.

    With ``measured=True`` the occupancy is read from measured positions, which is
    what the sorting algorithm sees; the default uses ground truth.
    """
    if target.geometry.extent != state.geometry.extent:
        raise LatticeError("target was built for a different geometry")
    occ = state.occupancy_grid(SpinState.UP, measured=measured).ravel() > 0
    empty = target.mask & ~occ
    return state.geometry.unravel(np.flatnonzero(empty))


def count_defects(state: LatticeState, target: TargetPattern, measured: bool = False) -> int:
    return len(defects(state, target, measured=measured))


@dataclass(frozen=True)
class OccupancyReport:
    storage: int
    shift: int

    def __iter__(self):
        return iter((self.storage, self.shift))


def occupancy_check(state: LatticeState) -> OccupancyReport:
    """Verify one alive atom per (register, site) and return the per-register counts."""
    live = np.flatnonzero(state.alive)
    if len(live):
        if not state.geometry.contains(state.true_sites[live]).all():
            raise ConsistencyError("alive atom outside the lattice")
        key = state.geometry.ravel(state.true_sites[live]) * 2 + state.spin[live]
        if len(np.unique(key)) != len(key):
            raise ConsistencyError("two alive atoms share a (register, site) pair")
    up, down = state.register_counts()
    return OccupancyReport(up, down)


# Snapshot text format, one alive atom per line:
#   <id> <storage|shift> <x> [<y>] <dx> [<dy>]
# x, y are the true site; dx, dy are measured minus true. Header lines start with '#'.
REGISTER_NAMES = {SpinState.UP: "storage", SpinState.DOWN: "shift"}


def format_snapshot(state: LatticeState) -> str:
    lines = [f"# extent {' '.join(map(str, state.geometry.extent))}",
             f"# elapsed_time {state.elapsed_time!r}",
             "# id register " + " ".join("xy"[: state.geometry.ndim]) + " "
             + " ".join(f"d{c}" for c in "xy"[: state.geometry.ndim])]
    for k in np.flatnonzero(state.alive):
        true = state.true_sites[k]
        delta = state.measured_sites[k] - true
        fields = [str(state.ids[k]), REGISTER_NAMES[SpinState(int(state.spin[k]))]]
        fields += [str(v) for v in true] + [str(v) for v in delta]
        lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"


def parse_snapshot(text: str) -> LatticeState:
    """Inverse of :func:`format_snapshot` (dead atoms are not recorded, so they are absent)."""
    extent: Optional[Sequence[int]] = None
    elapsed = 0.0
    rows = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if parts and parts[0] == "extent":
                extent = tuple(int(p) for p in parts[1:])
            elif parts and parts[0] == "elapsed_time":
                elapsed = float(parts[1])
            continue
        rows.append(line.split())
    if extent is None:
        raise LatticeError("snapshot has no extent header")
    geometry = LatticeGeometry(extent)
    d = geometry.ndim
    state = LatticeState(geometry)
    names = {v: k for k, v in REGISTER_NAMES.items()}
    n = len(rows)
    state.ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
    state.spin = np.array([int(names[r[1]]) for r in rows], dtype=np.int8)
    true = np.array([[int(v) for v in r[2:2 + d]] for r in rows], dtype=np.int64).reshape(n, d)
    delta = np.array([[int(v) for v in r[2 + d:2 + 2 * d]] for r in rows], dtype=np.int64).reshape(n, d)
    state.true_sites = true
    state.measured_sites = true + delta
    state.alive = np.ones(n, dtype=bool)
    state.elapsed_time = elapsed
    order = np.argsort(state.ids)
    for name in ("ids", "true_sites", "measured_sites", "spin", "alive"):
        setattr(state, name, getattr(state, name)[order])
    return state
