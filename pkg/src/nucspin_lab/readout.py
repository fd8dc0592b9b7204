"""Cavity-QED projective readout: photon counting, thresholding, assignment errors.

Only |down> atoms cycle on the probe transition and scatter photons into the
cavity mode.  A shot is a "click" when at least ``threshold`` photons are
detected.  Clicks on |up> atoms (dark counts and off-resonant excitation)
are lumped into a single probability ``eps_up``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .spin import DOWN, UP, DensityMatrix


@dataclass(frozen=True)
class CavityParams:
    """Atom-cavity rates, all angular (rad/s)."""

    g: float = 2 * math.pi * 2.8e6
    kappa: float = 2 * math.pi * 4.8e6
    gamma: float = 2 * math.pi * 91e3

    def __post_init__(self):
        # g = 0 is allowed for the uncoupled limit of the linewidth formula.
        if self.g < 0 or self.kappa <= 0 or self.gamma <= 0:
            raise ValueError("cavity rates must be positive")


@dataclass(frozen=True)
class ReadoutParams:
    n_emit: int = 40
    p_det: float = 0.1
    threshold: int = 1
    eps_up: float = 0.02
    window: float = 500e-6

    def __post_init__(self):
        if not 0.0 <= self.p_det <= 1.0:
            raise ValueError(f"p_det must lie in [0, 1], got {self.p_det}")
        if not 0.0 <= self.eps_up <= 1.0:
            raise ValueError(f"eps_up must lie in [0, 1], got {self.eps_up}")
        if self.threshold < 1:
            raise ValueError("threshold must be >= 1")
        if self.n_emit < 0:
            raise ValueError("n_emit must be >= 0")
        if self.window <= 0:
            raise ValueError("readout window must be positive")

    @property
    def efficiency(self) -> float:
        """Click probability for a |down> atom."""
        return detection_efficiency(self.n_emit, self.p_det, self.threshold)

    @property
    def mean_detected(self) -> float:
        return self.n_emit * self.p_det


#: Readout that reports the |down> population exactly.
IDEAL_READOUT = ReadoutParams(n_emit=1, p_det=1.0, threshold=1, eps_up=0.0)


@dataclass(frozen=True)
class ReadoutOutcome:
    click: bool
    detected_photons: int
    collapsed_state: DensityMatrix


def cavity_enhanced_linewidth(c: CavityParams) -> float:
    """Purcell-broadened linewidth gamma * (1 + 2 g^2 / (kappa gamma)), rad/s."""
    return c.gamma * (1.0 + 2.0 * c.g ** 2 / (c.kappa * c.gamma))


def detection_efficiency(n_emit: int, p_det: float, threshold: int = 1) -> float:
    """P(X >= threshold) for X ~ Binomial(n_emit, p_det), by exact summation."""
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    if threshold > n_emit:
        return 0.0
    q = 1.0 - p_det
    # Sum the short tail below threshold; the complement is then exact to rounding.
    below = math.fsum(math.comb(n_emit, k) * p_det ** k * q ** (n_emit - k)
                      for k in range(threshold))
    return 1.0 - below


def click_probability(p_down: float, rp: ReadoutParams) -> float:
    if not 0.0 <= p_down <= 1.0 + 1e-12:
        raise ValueError(f"p_down must lie in [0, 1], got {p_down}")
    return p_down * rp.efficiency + (1.0 - p_down) * rp.eps_up


def click_probabilities(p_down, rp: ReadoutParams) -> np.ndarray:
    """Vectorized :func:`click_probability`."""
    p_down = np.asarray(p_down, dtype=float)
    return p_down * rp.efficiency + (1.0 - p_down) * rp.eps_up


def multi_atom_click_probability(k: int, p_down, rp: ReadoutParams):
    """Probability that at least one of ``k`` independent atoms clicks."""
    if k < 1:
        raise ValueError("need at least one atom")
    q = click_probabilities(p_down, rp)
    out = 1.0 - (1.0 - q) ** k
    return float(out) if out.ndim == 0 else out


def simulate_readout(rho: DensityMatrix, rp: ReadoutParams,
                     rng: np.random.Generator) -> ReadoutOutcome:
    """One projective shot: collapse the spin, then count photons."""
    if rng.random() < rho.p_down:
        photons = int(rng.binomial(rp.n_emit, rp.p_det))
        collapsed = DOWN
    else:
        photons = rp.threshold if rng.random() < rp.eps_up else 0
        collapsed = UP
    return ReadoutOutcome(photons >= rp.threshold, photons, collapsed)


def sample_clicks(p_down: float, rp: ReadoutParams, shots: int,
                  rng: np.random.Generator) -> int:
    """Number of clicks in ``shots`` independent readouts of the same state.

    Same distribution as summing :func:`simulate_readout`, drawn in O(1).
    """
    if shots < 0:
        raise ValueError("shots must be >= 0")
    n_down = int(rng.binomial(shots, min(max(p_down, 0.0), 1.0)))
    return int(rng.binomial(n_down, rp.efficiency)) + int(rng.binomial(shots - n_down, rp.eps_up))


def harmonic_amplitude(y, k: int) -> float:
    """Amplitude of the k-th harmonic of samples spanning exactly one period.

    ``y`` is sampled uniformly without the closing endpoint.  For
    ``y = c + a cos(k x + phi)`` the result is ``a``.
    """
    y = np.asarray(y, dtype=float)
    n = y.size
    if k <= 0 or 2 * k >= n:
        raise ValueError("harmonic index must satisfy 0 < k < n/2")
    return 2.0 * abs(np.fft.rfft(y)[k]) / n
