"""Single spin-1/2 state, RF rotations, Larmor precession and Bloch relaxation.

Conventions
-----------
Basis ordering is (|up>, |down>).  A state is written
``rho = (I + r . sigma) / 2`` with |up> at ``rz = +1`` and |down> at
``rz = -1``.  Rotations follow the right-hand rule, so free precession at a
positive Larmor rate turns ``+x`` into ``+y``.

Every function here is pure: states and segments are immutable values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

TRACE_TOL = 1e-12
RADIUS_TOL = 1e-10
AXIS_TOL = 1e-9

#: RK4 steps per shortest dynamical period.  Anything >= 200 honours the
#: step-size contract; 2000 keeps the global error below 1e-10 over many
#: Rabi periods.
STEPS_PER_PERIOD = 2000
MIN_STEPS = 10
DEFAULT_MAX_STEPS = 10**9


class StepUnderflowError(ValueError):
    """Raised when an RF pulse would need more integrator steps than allowed."""


@dataclass(frozen=True)
class DensityMatrix:
    """Qubit density matrix stored as two populations and one coherence.

    ``coherence`` is the (up, down) matrix element; the (down, up) element is
    its conjugate, so the matrix is Hermitian by construction.
    """

    p_up: float
    p_down: float
    coherence: complex = 0j

    def __post_init__(self):
        if abs(self.p_up + self.p_down - 1.0) > TRACE_TOL:
            raise ValueError(f"trace must be 1, got {self.p_up + self.p_down!r}")
        if self.radius > 1.0 + RADIUS_TOL:
            raise ValueError(f"not positive semidefinite: |r| = {self.radius!r}")

    @classmethod
    def from_bloch(cls, r) -> "DensityMatrix":
        rx, ry, rz = (float(v) for v in r)
        return cls(0.5 * (1.0 + rz), 0.5 * (1.0 - rz), complex(0.5 * rx, -0.5 * ry))

    @classmethod
    def from_matrix(cls, m) -> "DensityMatrix":
        m = np.asarray(m, dtype=complex)
        if m.shape != (2, 2):
            raise ValueError(f"expected a 2x2 matrix, got shape {m.shape}")
        if not np.allclose(m, m.conj().T, atol=1e-12):
            raise ValueError("matrix is not Hermitian")
        return cls(float(m[0, 0].real), float(m[1, 1].real), complex(m[0, 1]))

    @property
    def bloch(self) -> np.ndarray:
        return np.array([2.0 * self.coherence.real, -2.0 * self.coherence.imag,
                         self.p_up - self.p_down])

    @property
    def radius(self) -> float:
        return math.sqrt((self.p_up - self.p_down) ** 2 + 4.0 * abs(self.coherence) ** 2)

    def matrix(self) -> np.ndarray:
        c = self.coherence
        return np.array([[self.p_up, c], [c.conjugate(), self.p_down]], dtype=complex)

    def eigenvalues(self) -> np.ndarray:
        r = self.radius
        return np.array([0.5 * (1.0 - r), 0.5 * (1.0 + r)])


UP = DensityMatrix(1.0, 0.0)
DOWN = DensityMatrix(0.0, 1.0)
MIXED = DensityMatrix(0.5, 0.5)


@dataclass(frozen=True)
class RFPulse:
    """Square RF pulse in the frame rotating with the drive.

    ``rabi_freq`` and ``detuning`` are angular frequencies (rad/s); the
    rotation axis in the transverse plane is ``(cos phase, sin phase, 0)``.
    """

    rabi_freq: float
    duration: float
    phase: float = 0.0
    detuning: float = 0.0

    def __post_init__(self):
        if self.duration < 0:
            raise ValueError("pulse duration must be >= 0")
        if self.rabi_freq < 0:
            raise ValueError("rabi_freq must be >= 0")


@dataclass(frozen=True)
class FreeEvolution:
    duration: float

    def __post_init__(self):
        if self.duration < 0:
            raise ValueError("free-evolution duration must be >= 0")


PulseSegment = Union[RFPulse, FreeEvolution]
PulseSequence = Sequence[PulseSegment]


@dataclass(frozen=True)
class RelaxationParams:
    """Phenomenological relaxation and precession rates.

    Parameters
    ----------
    gamma_p : float
        Longitudinal rate (1/s); ``T1 = 1 / gamma_p``.
    gamma_m : float
        Pure-dephasing rate (1/s); ``1/T2 = gamma_p + gamma_m``.
    larmor : float
        Precession rate between pulses (rad/s).
    equilibrium_rz : float
        Asymptotic ``rz`` reached under longitudinal relaxation.
    """

    gamma_p: float = 2.0
    gamma_m: float = 8.0
    larmor: float = 2 * math.pi * 2.5e3
    equilibrium_rz: float = 0.0

    def __post_init__(self):
        if self.gamma_p < 0 or self.gamma_m < 0:
            raise ValueError("relaxation rates must be >= 0")
        if not -1.0 <= self.equilibrium_rz <= 1.0:
            raise ValueError("equilibrium_rz must lie in [-1, 1]")

    @classmethod
    def ideal(cls, larmor: float = 0.0) -> "RelaxationParams":
        return cls(gamma_p=0.0, gamma_m=0.0, larmor=larmor)

    @property
    def t1(self) -> float:
        return math.inf if self.gamma_p == 0 else 1.0 / self.gamma_p

    @property
    def t2(self) -> float:
        rate = self.gamma_p + self.gamma_m
        return math.inf if rate == 0 else 1.0 / rate


NO_RELAXATION = RelaxationParams.ideal()


def pure_state(theta: float, phi: float) -> DensityMatrix:
    """|psi> = cos(theta/2)|up> + exp(i phi) sin(theta/2)|down>."""
    s = math.sin(theta)
    return DensityMatrix.from_bloch((s * math.cos(phi), s * math.sin(phi), math.cos(theta)))


def state_vector(theta: float, phi: float) -> np.ndarray:
    return np.array([math.cos(theta / 2), complex(math.cos(phi), math.sin(phi)) * math.sin(theta / 2)])


def initialize_state(polarization_fidelity: float = 1.0) -> DensityMatrix:
    """Optically pumped state ``diag(1 - P, P)``; ``P = 1`` is a pure |down>."""
    if not 0.0 <= polarization_fidelity <= 1.0:
        raise ValueError(f"polarization fidelity must lie in [0, 1], got {polarization_fidelity}")
    return DensityMatrix(1.0 - polarization_fidelity, polarization_fidelity)


def _rotate(r: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return r * c + np.cross(axis, r) * s + axis * np.dot(axis, r) * (1.0 - c)


def apply_rotation(rho: DensityMatrix, axis, angle: float) -> DensityMatrix:
    axis = np.asarray(axis, dtype=float)
    if axis.shape != (3,) or abs(np.linalg.norm(axis) - 1.0) > AXIS_TOL:
        raise ValueError(f"rotation axis must be a unit 3-vector, got {axis}")
    return DensityMatrix.from_bloch(_rotate(rho.bloch, axis, angle))


def _generator(seg: RFPulse, relax: RelaxationParams) -> np.ndarray:
    """Augmented 4x4 generator of the affine Bloch equation."""
    wx = seg.rabi_freq * math.cos(seg.phase)
    wy = seg.rabi_freq * math.sin(seg.phase)
    wz = seg.detuning
    g2 = relax.gamma_p + relax.gamma_m
    g1 = relax.gamma_p
    return np.array([
        [-g2, -wz, wy, 0.0],
        [wz, -g2, -wx, 0.0],
        [-wy, wx, -g1, g1 * relax.equilibrium_rz],
        [0.0, 0.0, 0.0, 0.0],
    ])


def rk4_step_count(seg: RFPulse, relax: RelaxationParams) -> int:
    fastest = max(seg.rabi_freq, abs(seg.detuning), abs(relax.larmor),
                  relax.gamma_p + relax.gamma_m)
    if seg.duration == 0:
        return 0
    if fastest == 0:
        return MIN_STEPS
    h_max = 2 * math.pi / fastest / STEPS_PER_PERIOD
    return max(MIN_STEPS, math.ceil(seg.duration / h_max))


def rf_pulse_propagate(rho: DensityMatrix, seg: RFPulse,
                       relax: RelaxationParams = NO_RELAXATION,
                       max_steps: int = DEFAULT_MAX_STEPS) -> DensityMatrix:
    """Integrate the driven, damped Bloch equation over one square pulse.

    The equation is linear with constant coefficients, so one classical RK4
    step is an exact affine map; ``n`` steps are applied as a matrix power.
    The result is identical to stepping ``n`` times, without the Python loop.
    """
    n = rk4_step_count(seg, relax)
    if n == 0:
        return rho
    if n > max_steps:
        raise StepUnderflowError(
            f"pulse of {seg.duration} s needs {n} RK4 steps (max_steps={max_steps})")
    hb = _generator(seg, relax) * (seg.duration / n)
    hb2 = hb @ hb
    hb3 = hb2 @ hb
    step = np.eye(4) + hb + hb2 / 2 + hb3 / 6 + (hb3 @ hb) / 24
    total = np.linalg.matrix_power(step, n)
    r = total @ np.append(rho.bloch, 1.0)
    return DensityMatrix.from_bloch(r[:3])


def free_evolve(rho: DensityMatrix, duration: float,
                relax: RelaxationParams = NO_RELAXATION) -> DensityMatrix:
    """Exact Larmor precession plus T1/T2 relaxation."""
    if duration < 0:
        raise ValueError("duration must be >= 0")
    if duration == 0:
        return rho
    rx, ry, rz = rho.bloch
    transverse = complex(rx, ry) * complex(math.cos(relax.larmor * duration),
                                           math.sin(relax.larmor * duration))
    transverse *= math.exp(-(relax.gamma_p + relax.gamma_m) * duration)
    req = relax.equilibrium_rz
    rz = req + (rz - req) * math.exp(-relax.gamma_p * duration)
    return DensityMatrix.from_bloch((transverse.real, transverse.imag, rz))


def run_sequence(rho0: DensityMatrix, seq: PulseSequence,
                 relax: RelaxationParams = NO_RELAXATION, **kwargs) -> DensityMatrix:
    rho = rho0
    for seg in seq:
        if isinstance(seg, RFPulse):
            rho = rf_pulse_propagate(rho, seg, relax, **kwargs)
        elif isinstance(seg, FreeEvolution):
            rho = free_evolve(rho, seg.duration, relax)
        else:
            raise TypeError(f"unknown pulse segment {seg!r}")
    return rho


def purity(rho: DensityMatrix) -> float:
    """Tr rho^2 = (1 + |r|^2) / 2."""
    return 0.5 * (1.0 + rho.radius ** 2)


def fidelity(rho: DensityMatrix, psi) -> float:
    """Overlap <psi|rho|psi> with a normalized pure target."""
    psi = np.asarray(psi, dtype=complex)
    if psi.shape != (2,):
        raise ValueError("target must be a 2-component state vector")
    norm = float(np.vdot(psi, psi).real)
    if abs(norm - 1.0) > 1e-9:
        raise ValueError(f"target state is not normalized (<psi|psi> = {norm})")
    return float(np.vdot(psi, rho.matrix() @ psi).real)


def trace_distance(a: DensityMatrix, b: DensityMatrix) -> float:
    # For qubits the trace distance is half the Bloch-vector separation.
    return 0.5 * float(np.linalg.norm(a.bloch - b.bloch))


def pi_half_duration(rabi_freq: float) -> float:
    return math.pi / (2.0 * rabi_freq)
