"""Three-axis state tomography: linear inversion, maximum likelihood, bootstrap.

A record counts clicks (|down> detections) after a basis-specific rotation.
For basis axis ``u`` the ideal click probability is ``(1 - r.u) / 2``; the
readout turns it into ``f = eps_up + (eta - eps_up) (1 - r.u) / 2``.

Two likelihood modes are supported.  ``raw`` treats click fractions as
populations, so readout errors stay in the reconstructed state.  ``unfolded``
puts ``(eta, eps_up)`` into the likelihood and removes their bias.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .readout import ReadoutParams
from .spin import DensityMatrix, RFPulse, fidelity, pi_half_duration, purity
from .streams import stream

AXES = {"X": (1.0, 0.0, 0.0), "Y": (0.0, 1.0, 0.0), "Z": (0.0, 0.0, 1.0)}
MODES = ("raw", "unfolded")

#: RF phases of the pre-readout pi/2 pulses that map the X and Y axes onto Z.
X_PREFIX_PHASE = -math.pi / 2
Y_PREFIX_PHASE = 0.0

MLE_TOL = 1e-12
MLE_MAX_ITER = 100_000
MAX_SKIP_FRACTION = 0.01


class MLEConvergenceError(RuntimeError):
    """The likelihood iteration hit its cap without meeting the stopping rule."""


@dataclass(frozen=True)
class MeasurementBasis:
    label: str
    prefix: tuple = ()

    def __post_init__(self):
        if self.label not in AXES:
            raise ValueError(f"unknown basis label {self.label!r}")

    @property
    def axis(self) -> tuple:
        return AXES[self.label]


@dataclass(frozen=True)
class MeasurementRecord:
    basis: str
    shots: int
    clicks: int

    def __post_init__(self):
        if self.basis not in AXES:
            raise ValueError(f"unknown basis label {self.basis!r}")
        if self.shots < 1:
            raise ValueError("a record needs at least one shot")
        if not 0 <= self.clicks <= self.shots:
            raise ValueError(f"clicks must lie in [0, shots], got {self.clicks}/{self.shots}")

    @property
    def frequency(self) -> float:
        return self.clicks / self.shots


def standard_bases(rabi_freq: float) -> dict:
    """Z (no rotation), X and Y (pi/2 RF pulses) measurement settings."""
    t = pi_half_duration(rabi_freq)
    return {
        "X": MeasurementBasis("X", (RFPulse(rabi_freq, t, phase=X_PREFIX_PHASE),)),
        "Y": MeasurementBasis("Y", (RFPulse(rabi_freq, t, phase=Y_PREFIX_PHASE),)),
        "Z": MeasurementBasis("Z", ()),
    }


def ideal_click_probability(rho: DensityMatrix, label: str) -> float:
    u = AXES[label]
    return 0.5 * (1.0 - float(np.dot(rho.bloch, u)))


def readout_map(rp: ReadoutParams | None, mode: str = "unfolded") -> tuple:
    """(eta, eps_up) seen by the likelihood for ``mode``."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "raw" or rp is None:
        return 1.0, 0.0
    return rp.efficiency, rp.eps_up


def _prepare(records: Iterable[MeasurementRecord]):
    records = list(records)
    labels = {r.basis for r in records}
    if not {"X", "Y", "Z"} <= labels:
        raise ValueError(f"need records for X, Y and Z, got {sorted(labels)}")
    return [(AXES[r.basis], r.clicks, r.shots - r.clicks) for r in records]


def _log_likelihood(r, data, eta, eps) -> float:
    total = 0.0
    for u, n, m in data:
        p = 0.5 * (1.0 - (r[0] * u[0] + r[1] * u[1] + r[2] * u[2]))
        f = eps + (eta - eps) * p
        # 0 ln 0 = 0; a zero-probability outcome that was observed is -inf
        if n:
            if f <= 0:
                return -math.inf
            total += n * math.log(f)
        if m:
            if f >= 1:
                return -math.inf
            total += m * math.log1p(-f)
    return total


def log_likelihood(rho: DensityMatrix, records: Sequence[MeasurementRecord],
                   rp: ReadoutParams | None = None, mode: str = "raw") -> float:
    eta, eps = readout_map(rp, mode)
    return _log_likelihood(tuple(rho.bloch), _prepare(records), eta, eps)


def linear_inversion(records: Sequence[MeasurementRecord], rp: ReadoutParams | None = None,
                     mode: str = "unfolded") -> tuple:
    """Invert click frequencies through the affine readout map.

    Returns ``(r, physical)`` where ``r`` is the Bloch vector (possibly
    outside the unit ball) and ``physical`` is ``|r| <= 1``.  Repeated
    records for one basis are pooled.
    """
    eta, eps = readout_map(rp, mode)
    if eta == eps:
        raise ValueError("readout map is not invertible (eta == eps_up)")
    _prepare(records)
    r = np.zeros(3)
    for label, u in AXES.items():
        rs = [rec for rec in records if rec.basis == label]
        f = sum(rec.clicks for rec in rs) / sum(rec.shots for rec in rs)
        p = (f - eps) / (eta - eps)
        r += (1.0 - 2.0 * p) * np.asarray(u)
    return r, bool(np.linalg.norm(r) <= 1.0)


def _rhor_step(r, data, eta, eps, dilution):
    """One diluted R-rho-R update, written out in Bloch components."""
    total = 0
    c0 = 0.0
    c = [0.0, 0.0, 0.0]
    h = 0.5 * (eta - eps)
    e0 = eps + h
    for u, n, m in data:
        total += n + m
        p = 0.5 * (1.0 - (r[0] * u[0] + r[1] * u[1] + r[2] * u[2]))
        f = min(max(eps + (eta - eps) * p, 1e-300), 1.0 - 1e-16)
        wa = n / f if n else 0.0
        wb = m / (1.0 - f) if m else 0.0
        c0 += wa * e0 + wb * (1.0 - e0)
        k = h * (wb - wa)
        c[0] += k * u[0]
        c[1] += k * u[1]
        c[2] += k * u[2]
    # A = I + dilution * R  with  R = (c0 I + c.sigma) / total
    s = dilution / total
    a0 = 1.0 + s * c0
    a = (s * c[0], s * c[1], s * c[2])
    ar = a[0] * r[0] + a[1] * r[1] + a[2] * r[2]
    aa = a[0] ** 2 + a[1] ** 2 + a[2] ** 2
    den = a0 * a0 + aa + 2.0 * a0 * ar
    q = a0 * a0 - aa
    return tuple((2.0 * a0 * a[i] + q * r[i] + 2.0 * ar * a[i]) / den for i in range(3))


def _newton_refine(r, ll, data, eta, eps, max_steps=100):
    # The log-likelihood is concave in r; Newton steps confined to the ball
    # finish what the fixed-point phase converges to only slowly near |r| = 1.
    k = -0.5 * (eta - eps)
    r = np.asarray(r, dtype=float)
    for _ in range(max_steps):
        g = np.zeros(3)
        hess = np.zeros((3, 3))
        for u, n, m in data:
            u = np.asarray(u)
            f = eps + (eta - eps) * 0.5 * (1.0 - r @ u)
            if not 0.0 < f < 1.0:
                return r, ll
            g += (n / f - m / (1.0 - f)) * k * u
            hess -= (n / f ** 2 + m / (1.0 - f) ** 2) * k * k * np.outer(u, u)
        try:
            step = -np.linalg.solve(hess, g)
        except np.linalg.LinAlgError:
            return r, ll
        scale = 1.0
        for _ in range(60):
            trial = r + scale * step
            if trial @ trial <= 1.0:
                ll_trial = _log_likelihood(trial, data, eta, eps)
                if ll_trial > ll:
                    break
            scale *= 0.5
        else:
            return r, ll
        gain = ll_trial - ll
        r, ll = trial, ll_trial
        if gain < 1e-15:
            break
    return r, ll


@dataclass(frozen=True)
class MLEResult:
    rho: DensityMatrix
    log_likelihood: float
    iterations: int


def mle_reconstruct(records: Sequence[MeasurementRecord], rp: ReadoutParams | None = None,
                    mode: str = "raw", tol: float = MLE_TOL,
                    max_iter: int = MLE_MAX_ITER) -> MLEResult:
    """Maximum-likelihood state over the Bloch ball.

    Diluted R-rho-R iteration from the maximally mixed state; the dilution
    halves whenever a step fails to raise the likelihood.  It stops once the
    gain per step drops below ``tol`` and is then polished by Newton steps
    kept inside the ball.

    Raises
    ------
    MLEConvergenceError
        If ``max_iter`` iterations pass without meeting the stopping rule.
    """
    eta, eps = readout_map(rp, mode)
    data = _prepare(records)
    r = (0.0, 0.0, 0.0)
    ll = _log_likelihood(r, data, eta, eps)
    dilution = 1e3
    it = 0
    converged = False
    while it < max_iter:
        it += 1
        while True:
            trial = _rhor_step(r, data, eta, eps, dilution)
            ll_trial = _log_likelihood(trial, data, eta, eps)
            if ll_trial > ll:
                break
            dilution *= 0.5
            if dilution < 1e-12:
                break
        if not ll_trial > ll:
            converged = True
            break
        gain = ll_trial - ll
        r, ll = trial, ll_trial
        dilution = min(2.0 * dilution, 1e3)
        if gain < tol:
            converged = True
            break
    if not converged:
        raise MLEConvergenceError(f"no convergence after {max_iter} iterations")
    r, ll = _newton_refine(r, ll, data, eta, eps)
    norm = float(np.linalg.norm(r))
    if norm > 1.0:
        r = np.asarray(r) / norm
    return MLEResult(DensityMatrix.from_bloch(r), float(ll), it)


def _resample_estimate(args):
    records, rp, mode, psi, seed, i = args
    rng = stream(seed, "bootstrap", i)
    resampled = [MeasurementRecord(rec.basis, rec.shots,
                                   int(rng.binomial(rec.shots, rec.clicks / rec.shots)))
                 for rec in records]
    try:
        rho = mle_reconstruct(resampled, rp, mode=mode).rho
    except MLEConvergenceError:
        return None
    return purity(rho), fidelity(rho, psi)


@dataclass(frozen=True)
class BootstrapResult:
    sigma_purity: float
    sigma_fidelity: float
    n_resamples: int
    n_skipped: int


def bootstrap_errors(records: Sequence[MeasurementRecord], rp: ReadoutParams | None,
                     target, n_resamples: int = 1000, seed: int = 0,
                     mode: str = "raw", workers: int = 1) -> BootstrapResult:
    """Parametric bootstrap of purity and fidelity.

    Resample ``i`` draws ``n_b' ~ Binomial(N_b, n_b / N_b)`` per record from
    the stream ``(seed, "bootstrap", i)`` and re-runs the MLE.  Results are
    collected by index, so they do not depend on ``workers``.
    """
    if n_resamples < 2:
        raise ValueError("need at least two resamples")
    records = list(records)
    psi = np.asarray(target, dtype=complex)
    jobs = [(records, rp, mode, psi, seed, i) for i in range(n_resamples)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_resample_estimate, jobs, chunksize=max(1, n_resamples // (4 * workers))))
    else:
        out = [_resample_estimate(j) for j in jobs]
    good = [o for o in out if o is not None]
    skipped = n_resamples - len(good)
    if skipped > MAX_SKIP_FRACTION * n_resamples:
        raise MLEConvergenceError(f"{skipped} of {n_resamples} bootstrap fits failed")
    vals = np.array(good)
    return BootstrapResult(float(np.std(vals[:, 0], ddof=1)), float(np.std(vals[:, 1], ddof=1)),
                           n_resamples, skipped)


@dataclass(frozen=True)
class TomographyResult:
    bloch_linear: tuple
    linear_physical: bool
    rho_mle: DensityMatrix
    log_likelihood: float
    purity: float
    fidelity: float
    sigma_purity: float
    sigma_fidelity: float
    n_resamples: int
    mode: str = "raw"
    n_skipped: int = 0
    records: tuple = field(default=(), repr=False)

    @property
    def rho_linear(self) -> DensityMatrix | None:
        """Linear-inversion state, or None when it falls outside the Bloch ball."""
        if not self.linear_physical:
            return None
        return DensityMatrix.from_bloch(self.bloch_linear)

    def to_dict(self) -> dict:
        rho = self.rho_mle
        return {
            "mode": self.mode,
            "records": [{"basis": r.basis, "shots": r.shots, "clicks": r.clicks}
                        for r in self.records],
            "linear_inversion": {"bloch": list(self.bloch_linear),
                                 "physical": self.linear_physical},
            "mle": {
                "bloch": [float(v) for v in rho.bloch],
                "rho_real": rho.matrix().real.tolist(),
                "rho_imag": rho.matrix().imag.tolist(),
                "log_likelihood": self.log_likelihood,
            },
            "purity": self.purity,
            "fidelity": self.fidelity,
            "sigma_purity": self.sigma_purity,
            "sigma_fidelity": self.sigma_fidelity,
            "n_resamples": self.n_resamples,
            "n_skipped": self.n_skipped,
        }


def tomography_report(records: Sequence[MeasurementRecord], rp: ReadoutParams | None,
                      target, mode: str = "raw", n_resamples: int = 1000,
                      seed: int = 0, workers: int = 1) -> TomographyResult:
    """Linear inversion, MLE, purity/fidelity and bootstrap errors in one bundle.

    ``n_resamples = 0`` skips the bootstrap and leaves the sigmas as NaN.
    """
    records = tuple(records)
    r_lin, physical = linear_inversion(records, rp, mode)
    mle = mle_reconstruct(records, rp, mode=mode)
    if n_resamples:
        boot = bootstrap_errors(records, rp, target, n_resamples, seed, mode, workers)
    else:
        boot = BootstrapResult(math.nan, math.nan, 0, 0)
    return TomographyResult(
        bloch_linear=tuple(float(v) for v in r_lin),
        linear_physical=physical,
        rho_mle=mle.rho,
        log_likelihood=mle.log_likelihood,
        purity=purity(mle.rho),
        fidelity=fidelity(mle.rho, target),
        sigma_purity=boot.sigma_purity,
        sigma_fidelity=boot.sigma_fidelity,
        n_resamples=boot.n_resamples,
        mode=mode,
        n_skipped=boot.n_skipped,
        records=records,
    )
