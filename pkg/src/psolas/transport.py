"""Scalar transport formulas: phase-to-position mapping, ramp synthesis and efficiency budgets.

Angles are radians everywhere inside this module; degree inputs are converted
at the call boundary (``noise_budget_from_degrees``). Lengths are metres.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_WAVELENGTH = 866e-9


def phase_to_position(phi, wavelength: float = DEFAULT_WAVELENGTH):
    """Lattice displacement for an optical phase ``phi``: (wavelength / 2) * phi / 2pi."""
    if not wavelength > 0:
        raise ValueError("wavelength must be positive")
    if np.ndim(phi):
        return (wavelength / 2) * (np.asarray(phi, dtype=float) / (2 * math.pi))
    return (wavelength / 2) * (phi / (2 * math.pi))


def position_to_phase(x, wavelength: float = DEFAULT_WAVELENGTH):
    if not wavelength > 0:
        raise ValueError("wavelength must be positive")
    return 2 * math.pi * np.asarray(x, dtype=float) / (wavelength / 2)


@dataclass(frozen=True)
class NoiseBudget:
    phase_rms: float  # degrees
    position_rms: float  # metres


def noise_budget_from_degrees(phase_rms_deg: float,
                              wavelength: float = DEFAULT_WAVELENGTH) -> NoiseBudget:
    """Convert relative phase jitter (degrees) into the relative position jitter."""
    if phase_rms_deg < 0:
        raise ValueError("phase_rms must be non-negative")
    return NoiseBudget(phase_rms_deg, phase_to_position(math.radians(phase_rms_deg), wavelength))


@dataclass(frozen=True)
class PhaseProfile:
    displacement: float  # sites
    duration: float  # seconds
    times: np.ndarray
    phases: np.ndarray  # radians

    def to_text(self) -> str:
        lines = [f"# displacement_sites={self.displacement!r} duration_s={self.duration!r}",
                 "# time_s phase_rad"]
        lines += [f"{t!r} {p!r}" for t, p in zip(self.times.tolist(), self.phases.tolist())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PhaseProfile":
        header = {}
        rows = []
        for line in text.splitlines():
            if line.startswith("#"):
                for tok in line[1:].split():
                    if "=" in tok:
                        key, val = tok.split("=", 1)
                        header[key] = float(val)
            elif line.strip():
                rows.append([float(v) for v in line.split()])
        arr = np.array(rows, dtype=float).reshape(-1, 2)
        return cls(header["displacement_sites"], header["duration_s"], arr[:, 0], arr[:, 1])


def ramp_displacement(t, displacement: float, duration: float):
    """Raised-cosine trajectory x(t) = d (1 - cos(pi t / T)) / 2, in sites."""
    t = np.asarray(t, dtype=float)
    return displacement * (1 - np.cos(np.pi * t / duration)) / 2


def ramp_velocity(t, displacement: float, duration: float):
    """Analytic derivative of :func:`ramp_displacement`, in sites per second."""
    t = np.asarray(t, dtype=float)
    return displacement * np.pi / (2 * duration) * np.sin(np.pi * t / duration)


def peak_ramp_velocity(displacement: float, duration: float) -> float:
    return math.pi * abs(displacement) / (2 * duration)


def sinusoidal_ramp(displacement: float, duration: float, n_samples: int = 1001) -> PhaseProfile:
    """Sample the phase profile that moves a lattice by ``displacement`` sites in ``duration``.

    One lattice site corresponds to a phase of 2pi, so the profile does not
    depend on the wavelength. The first and last samples are set to the exact
    commanded endpoints 0 and 2pi * displacement.
    """
    if not duration > 0:
        raise ValueError("duration must be positive")
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    times = np.linspace(0.0, duration, n_samples)
    phases = 2 * np.pi * ramp_displacement(times, displacement, duration)
    phases[0] = 0.0
    phases[-1] = 2 * np.pi * displacement
    return PhaseProfile(float(displacement), float(duration), times, phases)


def cumulative_stepwise_efficiency(p_step: float, distance: int) -> float:
    """Success of a legacy transport made of two shift operations per site: p_step ** (2 d)."""
    if not 0.0 <= p_step <= 1.0:
        raise ValueError("p_step must lie in [0, 1]")
    if distance < 0:
        raise ValueError("distance must be non-negative")
    return p_step ** (2 * distance)


def distance_independent_success(pump: float, spinflip: float, reconstruct: float) -> float:
    """Single-operation transport success: one minus the summed failure channels."""
    parts = (pump, spinflip, reconstruct)
    if any(not 0.0 <= p <= 1.0 for p in parts):
        raise ValueError("each failure probability must lie in [0, 1]")
    total = math.fsum(parts)
    if total > 1.0:
        raise ValueError("failure probabilities sum to more than one")
    # round away binary noise so that the budget reads back as a clean decimal
    return round(1.0 - total, 12)


def combined_ground_state_fraction(p_axial: float, p_t1: float, p_t2: float) -> float:
    """3D vibrational ground-state probability as the product of per-axis occupations."""
    parts = (p_axial, p_t1, p_t2)
    if any(not 0.0 <= p <= 1.0 for p in parts):
        raise ValueError("occupations must lie in [0, 1]")
    return p_axial * p_t1 * p_t2
