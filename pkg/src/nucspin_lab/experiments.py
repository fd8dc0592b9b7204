"""Virtual experiments: Rabi, Ramsey, state tomography, T1 / lifetime, T2.

Each run takes an :class:`ApparatusParams`, a sweep grid, a shot count and a
seed.  ``shots=None`` selects analytic mode: expectation values replace
sampled counts, so model curves can be checked without shot noise.

Sampled counts for grid point ``i`` of experiment ``name`` come from the
stream ``(seed, name, ..., i)``; runs are reproducible bit for bit and do
not depend on evaluation order.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import readout as ro
from .fitting import Dataset, fit_exponential, fit_sinusoid, visibility, visibility_error
from .readout import CavityParams, ReadoutParams, cavity_enhanced_linewidth
from .spin import (NO_RELAXATION, FreeEvolution, RelaxationParams, RFPulse, free_evolve,
                   initialize_state, pi_half_duration, rf_pulse_propagate, run_sequence,
                   state_vector)
from .streams import stream
from .tomography import (X_PREFIX_PHASE, MeasurementRecord, TomographyResult, standard_bases,
                         tomography_report)

#: RF phase that turns |down> into +x with a pi/2 pulse.
PREP_PHASE = X_PREFIX_PHASE
#: Larmor delay separating states (a) and (b).
STATE_B_DELAY = 0.1e-3

TARGETS = {
    "a": state_vector(math.pi / 2, 0.0),
    "b": state_vector(math.pi / 2, math.pi / 2),
    "c": state_vector(math.pi, 0.0),
}


class ValidationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LatticeParams:
    wavelength: float = 532e-9
    delta0: float = 2 * math.pi * 700e3
    tau_transport: float = 0.1

    def __post_init__(self):
        if self.wavelength <= 0 or self.tau_transport <= 0 or self.delta0 < 0:
            raise ValueError("lattice parameters must be positive")


@dataclass(frozen=True)
class ApparatusParams:
    """Every physical rate of the setup; defaults are the published values.

    ``pulse_relaxation`` switches Bloch relaxation on during RF pulses.  It
    is off by default, so pulses act as ideal rotations and relaxation only
    acts during free evolution.
    """

    cavity: CavityParams = field(default_factory=CavityParams)
    readout: ReadoutParams = field(default_factory=ReadoutParams)
    relax: RelaxationParams = field(default_factory=RelaxationParams)
    rabi_freq: float = math.pi / (2 * 3.2e-3)
    delta_e: float = 2 * math.pi * 60e6
    atom_lifetime: float = 0.44
    lattice: LatticeParams = field(default_factory=LatticeParams)
    polarization_fidelity: float = 1.0
    pulse_relaxation: bool = False

    def __post_init__(self):
        if self.rabi_freq <= 0:
            raise ValueError("rabi_freq must be positive")
        if self.delta_e < 0:
            raise ValueError("delta_e must be >= 0")
        if self.atom_lifetime <= 0:
            raise ValueError("atom_lifetime must be positive")
        if not 0.0 <= self.polarization_fidelity <= 1.0:
            raise ValueError("polarization_fidelity must lie in [0, 1]")

    def validate(self) -> list:
        """Soft checks; returns (and warns about) violated conditions."""
        problems = []
        gamma = cavity_enhanced_linewidth(self.cavity)
        if self.delta_e < 10 * gamma:
            problems.append(
                f"excited-state splitting {self.delta_e / 2 / math.pi:.3g} Hz is not much larger "
                f"than the cavity-enhanced linewidth {gamma / 2 / math.pi:.3g} Hz")
        for p in problems:
            warnings.warn(p, ValidationWarning)
        return problems

    @property
    def pulse_relax(self) -> RelaxationParams:
        return self.relax if self.pulse_relaxation else NO_RELAXATION

    def survival(self, t):
        return np.exp(-np.asarray(t, dtype=float) / self.atom_lifetime)


@dataclass
class ExperimentRun:
    """Curves, fits and derived numbers of one virtual experiment.

    ``columns`` is ordered; the first column is the sweep variable.  Sampled
    runs carry integer ``shots`` / ``clicks`` columns.
    """

    name: str
    columns: dict
    fits: dict = field(default_factory=dict)
    derived: dict = field(default_factory=dict)
    seed: int | None = None
    mode: str = "sampled"

    @property
    def sweep(self) -> np.ndarray:
        return next(iter(self.columns.values()))


def _mode(shots):
    if shots is None:
        return "analytic"
    if shots < 1:
        raise ValueError("shots must be >= 1")
    return "sampled"


def _grid(values, name="grid"):
    g = np.asarray(values, dtype=float)
    if g.ndim != 1 or g.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D sequence")
    return g


def _fit_or_none(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (ValueError, np.linalg.LinAlgError):
        return None


# -- Rabi / Ramsey ------------------------------------------------------------

def rabi_population(params: ApparatusParams, t: float) -> float:
    rho = initialize_state(params.polarization_fidelity)
    rho = rf_pulse_propagate(rho, RFPulse(params.rabi_freq, t), params.pulse_relax)
    return rho.p_down


def run_rabi(params: ApparatusParams, t_grid, shots: int | None, seed: int = 0,
             n_atoms: int = 1) -> ExperimentRun:
    """Click fraction versus RF pulse length, with a sinusoid fit.

    With ``n_atoms = 2`` each shot sees two independent atoms and clicks if
    either does.
    """
    if n_atoms not in (1, 2):
        raise ValueError("n_atoms must be 1 or 2")
    t = _grid(t_grid, "t_grid")
    mode = _mode(shots)
    rp = params.readout
    p_down = np.array([rabi_population(params, ti) for ti in t])
    q = ro.multi_atom_click_probability(n_atoms, p_down, rp)
    cols = {"t": t, "p_down": p_down, "click_probability": q}
    if mode == "sampled":
        clicks = np.empty(t.size, dtype=np.int64)
        for i, pi in enumerate(p_down):
            rng = stream(seed, "rabi", n_atoms, i)
            if n_atoms == 1:
                clicks[i] = ro.sample_clicks(pi, rp, shots, rng)
            else:
                clicks[i] = rng.binomial(shots, q[i])
        cols.update(shots=np.full(t.size, shots, dtype=np.int64), clicks=clicks,
                    click_fraction=clicks / shots)
        y = clicks / shots
    else:
        y = q
    run = ExperimentRun("rabi", cols, seed=seed, mode=mode)
    run.derived["n_atoms"] = n_atoms
    fit = _fit_or_none(fit_sinusoid, Dataset(t, y))
    if fit is not None:
        run.fits["sinusoid"] = fit
        run.derived.update(visibility=visibility(fit), visibility_error=visibility_error(fit),
                           rabi_freq_fit=2 * math.pi * fit["f"], rms_residual=fit.rms_residual)
    return run


def ramsey_sequence(params: ApparatusParams, delay: float) -> list:
    t90 = pi_half_duration(params.rabi_freq)
    return [RFPulse(params.rabi_freq, t90), FreeEvolution(delay), RFPulse(params.rabi_freq, t90)]


def ramsey_population(params: ApparatusParams, delay: float) -> float:
    rho = initialize_state(params.polarization_fidelity)
    t90 = pi_half_duration(params.rabi_freq)
    rho = rf_pulse_propagate(rho, RFPulse(params.rabi_freq, t90), params.pulse_relax)
    rho = free_evolve(rho, delay, params.relax)
    rho = rf_pulse_propagate(rho, RFPulse(params.rabi_freq, t90), params.pulse_relax)
    return rho.p_down


def run_ramsey(params: ApparatusParams, delay_grid, shots: int | None,
               seed: int = 0) -> ExperimentRun:
    """pi/2 - delay - pi/2 fringe with a sinusoid fit seeded at the Larmor rate."""
    d = _grid(delay_grid, "delay_grid")
    mode = _mode(shots)
    rp = params.readout
    p_down = np.array([ramsey_population(params, di) for di in d])
    q = ro.click_probabilities(p_down, rp)
    cols = {"delay": d, "p_down": p_down, "click_probability": q}
    if mode == "sampled":
        clicks = np.array([ro.sample_clicks(p, rp, shots, stream(seed, "ramsey", i))
                           for i, p in enumerate(p_down)], dtype=np.int64)
        cols.update(shots=np.full(d.size, shots, dtype=np.int64), clicks=clicks,
                    click_fraction=clicks / shots)
        y = clicks / shots
    else:
        y = q
    run = ExperimentRun("ramsey", cols, seed=seed, mode=mode)
    hint = abs(params.relax.larmor) / (2 * math.pi) or None
    fit = _fit_or_none(fit_sinusoid, Dataset(d, y), freq_hint=hint)
    if fit is not None:
        run.fits["sinusoid"] = fit
        run.derived.update(visibility=visibility(fit), visibility_error=visibility_error(fit),
                           fringe_frequency=fit["f"])
    return run


# -- tomography -----------------------------------------------------------------

def prepare_state(params: ApparatusParams, state_id: str):
    """Pre-measurement state for the three published preparations."""
    if state_id not in TARGETS:
        raise ValueError(f"state_id must be one of {sorted(TARGETS)}, got {state_id!r}")
    rho = initialize_state(params.polarization_fidelity)
    if state_id == "c":
        return rho
    t90 = pi_half_duration(params.rabi_freq)
    rho = rf_pulse_propagate(rho, RFPulse(params.rabi_freq, t90, phase=PREP_PHASE),
                             params.pulse_relax)
    if state_id == "b":
        rho = free_evolve(rho, STATE_B_DELAY, params.relax)
    return rho


def measure_records(params: ApparatusParams, rho, shots_per_basis: int, seed: int,
                    tag=()) -> list:
    rp = params.readout
    records = []
    for label, basis in standard_bases(params.rabi_freq).items():
        p = run_sequence(rho, basis.prefix, params.pulse_relax).p_down
        clicks = ro.sample_clicks(p, rp, shots_per_basis, stream(seed, "tomo", *tag, label))
        records.append(MeasurementRecord(label, shots_per_basis, clicks))
    return records


def run_state_prep_tomography(params: ApparatusParams, state_id: str, shots_per_basis: int,
                              seed: int = 0, mode: str = "raw", n_resamples: int = 1000,
                              workers: int = 1) -> TomographyResult:
    rho = prepare_state(params, state_id)
    records = measure_records(params, rho, shots_per_basis, seed, tag=(state_id,))
    return tomography_report(records, params.readout, TARGETS[state_id], mode=mode,
                             n_resamples=n_resamples, seed=seed, workers=workers)


# -- T1 and atom lifetime -------------------------------------------------------

def _hold_population(params: ApparatusParams, start: str, t: float) -> float:
    rho = initialize_state(params.polarization_fidelity)
    if start == "up":
        rho = rf_pulse_propagate(rho, RFPulse(params.rabi_freq, 2 * pi_half_duration(params.rabi_freq)),
                                 params.pulse_relax)
    return free_evolve(rho, t, params.relax).p_down


def _identifiable(fit, span) -> bool:
    return (fit is not None and fit.converged and not fit.singular
            and fit["tau"] < 100 * span)


def run_t1(params: ApparatusParams, time_grid, shots: int | None, seed: int = 0,
           weighted: bool = True, fixed_asymptote: bool = True):
    """Population decay after |down> and |up> preparation, with atom loss.

    A lost atom never clicks.  The summed click fraction of the two runs
    tracks the survival probability and gives the atom lifetime; the |down>
    run divided by that sum is loss-free and gives T1 through an
    offset-exponential fit.  Both preparations relax to the same state, so
    the normalized curve tends to 1/2; ``fixed_asymptote`` holds it there.
    ``weighted`` uses binomial standard errors as fit weights in sampled mode.

    Returns ``(T1, lifetime, run)``; T1 is NaN when it cannot be identified.
    """
    t = _grid(time_grid, "time_grid")
    mode = _mode(shots)
    rp = params.readout
    surv = params.survival(t)
    cols = {"t": t, "survival": surv}
    ys = {}
    for start in ("down", "up"):
        p = np.array([_hold_population(params, start, ti) for ti in t])
        q = surv * ro.click_probabilities(p, rp)
        cols[f"p_down_{start}"] = p
        cols[f"click_probability_{start}"] = q
        if mode == "sampled":
            clicks = np.empty(t.size, dtype=np.int64)
            for i in range(t.size):
                rng = stream(seed, "t1", start, i)
                present = int(rng.binomial(shots, surv[i]))
                clicks[i] = ro.sample_clicks(p[i], rp, present, rng)
            cols[f"clicks_{start}"] = clicks
            ys[start] = clicks / shots
        else:
            ys[start] = q
    if mode == "sampled":
        cols["shots"] = np.full(t.size, shots, dtype=np.int64)
    total = ys["down"] + ys["up"]
    with np.errstate(invalid="ignore", divide="ignore"):
        normalized = np.where(total > 0, ys["down"] / total, np.nan)
    cols["sum_fraction"] = total
    cols["normalized_down"] = normalized
    run = ExperimentRun("t1", cols, seed=seed, mode=mode)

    sigma_sum = sigma_norm = None
    if weighted and mode == "sampled":
        n_tot = total * shots
        sigma_sum = np.sqrt(np.maximum(total, 1.0 / shots) / shots)
        with np.errstate(invalid="ignore", divide="ignore"):
            sigma_norm = np.sqrt(np.clip(normalized * (1 - normalized), 0.25 / n_tot ** 2, None)
                                 / np.maximum(n_tot, 1))
    life_fit = _fit_or_none(fit_exponential, Dataset(t, total, sigma_sum), "plain")
    ok = np.isfinite(normalized)
    t1_fit = _fit_or_none(fit_exponential,
                          Dataset(t[ok], normalized[ok], None if sigma_norm is None else sigma_norm[ok]),
                          "offset", y_inf=0.5 if fixed_asymptote else None)
    span = float(t[-1] - t[0])
    lifetime = life_fit["tau"] if life_fit is not None else math.nan
    if life_fit is not None:
        run.fits["survival"] = life_fit
        run.derived.update(lifetime=lifetime, lifetime_error=life_fit.std_errors["tau"])
    identifiable = _identifiable(t1_fit, span)
    if t1_fit is not None:
        run.fits["t1"] = t1_fit
    t1 = t1_fit["tau"] if identifiable else math.nan
    run.derived.update(t1=t1, t1_error=t1_fit.std_errors["tau"] if identifiable else math.nan,
                       t1_identifiable=identifiable)
    return t1, lifetime, run


# -- T2 ------------------------------------------------------------------------------

def run_t2(params: ApparatusParams, trap_times, shots: int | None, seed: int = 0,
           fringe_periods: int = 5, fringe_points: int = 12, fix_offset: bool = True):
    """Ramsey visibility versus trapping time, fitted to a plain exponential.

    Around each trapping time a local fringe of ``fringe_points`` delays
    spanning ``fringe_periods`` Larmor periods is recorded.  Atoms lost
    during the hold are excluded from the shot count.  With ``fix_offset``
    the fringe midline is held at the readout value for an equatorial
    state, so visibility scales exactly with the coherence.  Trapping times
    that are whole Larmor periods give identically phased local fringes.

    Returns ``(T2, run)``.
    """
    traps = _grid(trap_times, "trap_times")
    mode = _mode(shots)
    rp = params.readout
    larmor_hz = abs(params.relax.larmor) / (2 * math.pi)
    if larmor_hz == 0:
        raise ValueError("T2 fringes need a nonzero Larmor rate")
    step = fringe_periods / larmor_hz / fringe_points
    offsets = step * np.arange(fringe_points)
    midline = ro.click_probability(0.5, rp) if fix_offset else None
    vis, vis_err, amps = [], [], []
    fringes = []
    for k, trap in enumerate(traps):
        delays = trap + offsets
        p = np.array([ramsey_population(params, d) for d in delays])
        q = ro.click_probabilities(p, rp)
        if mode == "sampled":
            surv = params.survival(delays)
            present = np.empty(delays.size, dtype=np.int64)
            clicks = np.empty(delays.size, dtype=np.int64)
            for j in range(delays.size):
                rng = stream(seed, "t2", k, j)
                present[j] = rng.binomial(shots, surv[j])
                clicks[j] = ro.sample_clicks(p[j], rp, int(present[j]), rng)
            y = clicks / np.maximum(present, 1)
        else:
            present = clicks = None
            y = q
        fringes.append((delays, p, q, present, clicks))
        fit = _fit_or_none(fit_sinusoid, Dataset(delays, y), freq_hint=larmor_hz, offset=midline)
        if fit is None:
            vis.append(math.nan)
            vis_err.append(math.nan)
            amps.append(math.nan)
            continue
        vis.append(visibility(fit))
        vis_err.append(fit.std_errors["A"] / fit["C"] if fix_offset else visibility_error(fit))
        amps.append(fit["A"])
    vis = np.array(vis)
    cols = {"trap_time": traps, "visibility": vis, "visibility_error": np.array(vis_err),
            "amplitude": np.array(amps)}
    run = ExperimentRun("t2", cols, seed=seed, mode=mode)
    run.derived["fringes"] = fringes
    ok = np.isfinite(vis)
    fit = _fit_or_none(fit_exponential, Dataset(traps[ok], vis[ok]), "plain")
    t2 = math.nan
    if fit is not None:
        run.fits["t2"] = fit
        t2 = fit["tau"]
        run.derived.update(t2=t2, t2_error=fit.std_errors["tau"], visibility0=fit["y0"])
    return t2, run


# -- rate relations, budget, transport ------------------------------------------------

class NegativeDephasingWarning(UserWarning):
    pass


def t2_relation(t1: float, gamma_m: float) -> float:
    """T2 from 1/T2 = 1/T1 + gamma_m."""
    if t1 <= 0:
        raise ValueError("T1 must be positive")
    if gamma_m < 0:
        raise ValueError("gamma_m must be >= 0")
    return 1.0 / (1.0 / t1 + gamma_m)


def gamma_m_from(t1: float, t2: float) -> float:
    """Pure-dephasing rate 1/T2 - 1/T1; negative values are warned about."""
    if t1 <= 0 or t2 <= 0:
        raise ValueError("T1 and T2 must be positive")
    g = 1.0 / t2 - 1.0 / t1
    if g < 0:
        warnings.warn(f"T2 = {t2} exceeds T1 = {t1}: negative dephasing rate {g}",
                      NegativeDephasingWarning)
    return g


def operation_budget(t2: float, t_readout: float) -> float:
    """Coherence time over readout time: the rough number of sequential operations."""
    if t2 <= 0 or t_readout <= 0:
        raise ValueError("times must be positive")
    return t2 / t_readout


def transport_displacement(lattice: LatticeParams) -> float:
    """Total distance (m) moved under delta(t) = delta0 sin(pi t / tau)."""
    return lattice.wavelength * lattice.delta0 * lattice.tau_transport / (2 * math.pi ** 2)


def transport_peak_velocity(lattice: LatticeParams) -> float:
    return lattice.wavelength * lattice.delta0 / (4 * math.pi)


def transport_profile(lattice: LatticeParams, n_points: int = 101) -> dict:
    """Moving-lattice trajectory sampled at ``n_points`` times in [0, tau].

    The lattice moves at ``(wavelength / 2) * delta / (2 pi)``; position is
    the closed-form integral of that velocity.
    """
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    lam, d0, tau = lattice.wavelength, lattice.delta0, lattice.tau_transport
    t = np.linspace(0.0, tau, n_points)
    delta = d0 * np.sin(np.pi * t / tau)
    velocity = 0.5 * lam * delta / (2 * np.pi)
    position = lam * d0 * tau / (4 * np.pi ** 2) * (1.0 - np.cos(np.pi * t / tau))
    return {"t": t, "delta": delta, "velocity": velocity, "position": position}
