"""Damped nonlinear least squares and the sinusoid / exponential model fits.

The engine is a Levenberg-Marquardt loop with central-difference Jacobians.
Model fits reparameterize internally so that physical constraints hold
(amplitude >= 0, decay time > 0) and report the public parameters together
with propagated standard errors.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

MAX_ITER = 500
REL_COST_TOL = 1e-12
GRAD_TOL = 1e-10
FD_STEP = 1e-7
SINGULAR_COND = 1e13
N_FREQ_GRID = 200
N_TAU_GRID = 200
#: Initial Marquardt damping.  Small, so a linear model is solved in one step;
#: a rejected step raises it tenfold until the cost drops.
LAMBDA0 = 1e-8


class SaturatedFringeWarning(UserWarning):
    """Fitted fringe amplitude reaches or exceeds its offset."""


@dataclass(frozen=True)
class Dataset:
    t: np.ndarray
    y: np.ndarray
    sigma: np.ndarray | None = None

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        y = np.asarray(self.y, dtype=float)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "y", y)
        if t.ndim != 1 or t.shape != y.shape:
            raise ValueError("t and y must be 1-D arrays of equal length")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("t must be strictly increasing")
        if self.sigma is not None:
            s = np.asarray(self.sigma, dtype=float)
            if s.shape != t.shape or np.any(s <= 0):
                raise ValueError("sigma must be positive with the same shape as t")
            object.__setattr__(self, "sigma", s)

    def __len__(self):
        return self.t.size

    @property
    def span(self) -> float:
        return float(self.t[-1] - self.t[0])


def binomial_sigma(y, shots) -> np.ndarray:
    """Standard error of click fractions; floored at 0.5/N for 0 or N clicks."""
    y = np.asarray(y, dtype=float)
    shots = np.broadcast_to(np.asarray(shots, dtype=float), y.shape)
    s = np.sqrt(np.clip(y * (1 - y), 0, None) / shots)
    return np.maximum(s, 0.5 / shots)


@dataclass(frozen=True)
class FitResult:
    params: dict
    std_errors: dict
    residual_norm: float
    converged: bool
    iterations: int
    covariance: np.ndarray | None = None
    flags: frozenset = frozenset()
    cost_history: tuple = ()
    dof: int = 0

    def __getitem__(self, name):
        return self.params[name]

    @property
    def singular(self) -> bool:
        return "singular" in self.flags

    @property
    def rms_residual(self) -> float:
        n = self.dof + len(self.params)
        return self.residual_norm / math.sqrt(n) if n else math.nan


def _jacobian(fun, t, theta):
    jac = np.empty((t.size, theta.size))
    for j in range(theta.size):
        h = max(FD_STEP, FD_STEP * abs(theta[j]))
        up = theta.copy()
        dn = theta.copy()
        up[j] += h
        dn[j] -= h
        jac[:, j] = (fun(t, up) - fun(t, dn)) / (2 * h)
    return jac


def _lm(fun, data: Dataset, theta0, max_iter=MAX_ITER):
    """Core damped Gauss-Newton loop in internal parameters.

    Returns (theta, jac, residual, converged, iterations, cost_history).
    """
    t, y = data.t, data.y
    w = 1.0 / data.sigma if data.sigma is not None else np.ones_like(y)
    theta = np.asarray(theta0, dtype=float).copy()
    if y.size < theta.size:
        raise ValueError(f"need at least {theta.size} points, got {y.size}")

    def resid(th):
        return (y - fun(t, th)) * w

    r = resid(theta)
    if not np.all(np.isfinite(r)):
        raise ValueError("model is not finite at the initial parameters")
    cost = 0.5 * float(r @ r)
    floor = 1e-30 * max(1.0, float((y * w) @ (y * w)))
    history = [cost]
    lam = LAMBDA0
    converged = False
    it = 0
    jac = _jacobian(fun, t, theta) * w[:, None]
    while it < max_iter:
        it += 1
        a = jac.T @ jac
        g = jac.T @ r
        if np.linalg.norm(g) < GRAD_TOL or cost <= floor:
            converged = True
            break
        scale = np.maximum(np.diag(a), 1e-12 * max(1.0, np.max(np.diag(a))))
        accepted = False
        while lam < 1e16:
            try:
                step = np.linalg.solve(a + lam * np.diag(scale), g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            trial = theta + step
            r_trial = resid(trial)
            cost_trial = 0.5 * float(r_trial @ r_trial) if np.all(np.isfinite(r_trial)) else math.inf
            if cost_trial < cost:
                accepted = True
                break
            lam *= 10
        if not accepted:
            # No damped step lowers the cost: a minimum to working precision.
            converged = True
            break
        rel = (cost - cost_trial) / cost if cost > 0 else 0.0
        theta, r, cost = trial, r_trial, cost_trial
        history.append(cost)
        lam = max(lam / 10, 1e-15)
        jac = _jacobian(fun, t, theta) * w[:, None]
        if rel < REL_COST_TOL or cost <= floor:
            converged = True
            break
    return theta, jac, r, converged, it, tuple(history)


def _covariance(jac, r, n_params):
    a = jac.T @ jac
    m = r.size
    dof = m - n_params
    d = np.sqrt(np.diag(a))
    if np.any(d == 0) or not np.all(np.isfinite(a)):
        return None
    # condition number of the correlation form, insensitive to parameter units
    corr = a / np.outer(d, d)
    try:
        cond = np.linalg.cond(corr)
    except np.linalg.LinAlgError:
        cond = math.inf
    if not np.isfinite(cond) or cond > SINGULAR_COND:
        return None
    s2 = float(r @ r) / dof if dof > 0 else math.nan
    return np.linalg.inv(corr) / np.outer(d, d) * s2


def least_squares(model: Callable, data: Dataset, theta0: Sequence[float],
                  names: Sequence[str] | None = None, max_iter: int = MAX_ITER) -> FitResult:
    """Fit ``model(t, theta)`` to ``data`` by damped least squares.

    Standard errors come from the inverse curvature at the optimum scaled by
    the residual variance.  A (near-)singular curvature leaves them as NaN and
    sets the ``"singular"`` flag.
    """
    theta0 = np.asarray(theta0, dtype=float)
    names = list(names) if names is not None else [f"p{i}" for i in range(theta0.size)]
    theta, jac, r, converged, it, hist = _lm(model, data, theta0, max_iter)
    cov = _covariance(jac, r, theta.size)
    return _make_result(names, theta, cov, r, converged, it, hist, frozenset())


def _make_result(names, values, cov, r, converged, it, hist, flags):
    flags = set(flags)
    if cov is None:
        flags.add("singular")
        errs = {n: math.nan for n in names}
    else:
        errs = {n: math.sqrt(max(cov[i, i], 0.0)) for i, n in enumerate(names)}
    if not converged:
        flags.add("not_converged")
    return FitResult(
        params={n: float(v) for n, v in zip(names, values)},
        std_errors=errs,
        residual_norm=float(np.linalg.norm(r)),
        converged=converged,
        iterations=it,
        covariance=cov,
        flags=frozenset(flags),
        cost_history=hist,
        dof=r.size - len(names),
    )


def _transform(cov, jac_t):
    return None if cov is None else jac_t @ cov @ jac_t.T


# -- sinusoid ---------------------------------------------------------------

def _linear_fit(cols, y, w):
    a = cols * w[:, None]
    coef, *_ = np.linalg.lstsq(a, y * w, rcond=None)
    res = y * w - a @ coef
    return coef, float(res @ res)


def fit_sinusoid(data: Dataset, freq_hint: float | None = None,
                 offset: float | None = None) -> FitResult:
    """Fit ``y = C + A cos(2 pi f t + phi)`` with ``A >= 0``.

    Internally the model is ``C + a cos(2 pi f t) + b sin(2 pi f t)``, which
    keeps the amplitude non-negative and well conditioned at ``A = 0``.
    Pass ``offset`` to hold ``C`` fixed.  Without ``freq_hint`` the frequency
    is seeded from a 200-point scan over ``[0.25, 4] / span``.

    Result parameters: ``A``, ``f`` (Hz), ``phi`` (rad), ``C``.
    """
    n_free = 3 if offset is not None else 4
    if len(data) < max(8, n_free):
        raise ValueError(f"sinusoid fit needs at least 8 points, got {len(data)}")
    # Fit on a centred clock: far from t = 0 the phase and frequency
    # directions become nearly collinear and slow the iteration badly.
    t0 = 0.5 * (data.t[0] + data.t[-1])
    centred = Dataset(data.t - t0, data.y, data.sigma)
    t, y = centred.t, centred.y
    w = 1.0 / data.sigma if data.sigma is not None else np.ones_like(y)
    y_fit = y - offset if offset is not None else y

    def cols(f):
        x = 2 * np.pi * f * t
        c = [np.cos(x), np.sin(x)]
        if offset is None:
            c.insert(0, np.ones_like(t))
        return np.column_stack(c)

    if freq_hint is not None:
        f0 = float(freq_hint)
    else:
        span = data.span
        if span <= 0:
            raise ValueError("data must span a positive time interval")
        grid = np.linspace(0.25 / span, 4.0 / span, N_FREQ_GRID)
        rss = np.array([_linear_fit(cols(f), y_fit, w)[1] for f in grid])
        if not np.any(np.isfinite(rss)):
            raise ValueError("frequency scan found no finite minimum")
        f0 = float(grid[np.nanargmin(rss)])
    coef, _ = _linear_fit(cols(f0), y_fit, w)

    if offset is None:
        def model(tt, th):
            x = 2 * np.pi * th[3] * tt
            return th[0] + th[1] * np.cos(x) + th[2] * np.sin(x)
        theta0 = [coef[0], coef[1], coef[2], f0]
    else:
        def model(tt, th):
            x = 2 * np.pi * th[2] * tt
            return offset + th[0] * np.cos(x) + th[1] * np.sin(x)
        theta0 = [coef[0], coef[1], f0]

    theta, jac, r, converged, it, hist = _lm(model, centred, theta0)
    cov = _covariance(jac, r, theta.size)
    if offset is None:
        c, a, b, f = theta
    else:
        a, b, f = theta
        c = offset
    if f < 0:
        # (b, f) -> (-b, -f) describes the same curve
        f, b = -f, -b
        if cov is not None:
            flip = np.ones(theta.size)
            flip[-2:] = -1.0
            cov = cov * np.outer(flip, flip)
    amp = math.hypot(a, b)
    phi = math.remainder(math.atan2(-b, a) - 2 * math.pi * f * t0, 2 * math.pi)
    dphi_df = -2 * math.pi * t0
    # d(A, f, phi, C)/d(internal)
    da = (a / amp, b / amp) if amp > 0 else (1.0, 0.0)
    dphi = (b / amp ** 2, -a / amp ** 2) if amp > 0 else (0.0, 0.0)
    if offset is None:
        jt = np.array([
            [0, da[0], da[1], 0],
            [0, 0, 0, 1],
            [0, dphi[0], dphi[1], dphi_df],
            [1, 0, 0, 0],
        ], dtype=float)
    else:
        jt = np.array([
            [da[0], da[1], 0],
            [0, 0, 1],
            [dphi[0], dphi[1], dphi_df],
            [0, 0, 0],
        ], dtype=float)
    pub_cov = _transform(cov, jt)
    flags = set()
    if offset is not None:
        flags.add("fixed_offset")
    result = _make_result(["A", "f", "phi", "C"], [amp, f, phi, c], pub_cov, r,
                          converged, it, hist, flags)
    sig_a = result.std_errors["A"]
    if result.singular or not amp > 2 * sig_a:
        result = replace(result, flags=result.flags | {"low_significance"})
    return result


def visibility(fit: FitResult) -> float:
    """Fringe contrast A / C, i.e. (max - min) / (max + min) of the fitted curve."""
    a, c = fit.params["A"], fit.params["C"]
    if a == 0:
        return 0.0
    if abs(c - a) <= 1e-9 * abs(c):
        return 1.0  # full contrast up to rounding
    if c < a:
        warnings.warn(f"saturated fringe: C = {c:.4g} <= A = {a:.4g}", SaturatedFringeWarning)
        return 1.0
    return a / c


def visibility_error(fit: FitResult) -> float:
    """Delta-method standard error of :func:`visibility`."""
    cov = fit.covariance
    if cov is None:
        return math.nan
    a, c = fit.params["A"], fit.params["C"]
    if c <= 0:
        return math.nan
    grad = np.array([1 / c, 0, 0, -a / c ** 2])
    return math.sqrt(max(float(grad @ cov @ grad), 0.0))


# -- exponential ------------------------------------------------------------

def _exp_grid_init(t, y, w, offset):
    span = t[-1] - t[0]
    best = (math.inf, None, None)
    for tau in np.geomspace(span / 100, 10 * span, N_TAU_GRID):
        e = np.exp(-(t - t[0]) / tau)
        c = np.column_stack([e, 1 - e]) if offset else e[:, None]
        coef, rss = _linear_fit(c, y, w)
        if rss < best[0]:
            best = (rss, tau, coef)
    _, tau, coef = best
    if tau is None:
        raise ValueError("exponential grid initialization failed")
    y0 = coef[0]
    return (y0, tau, coef[1]) if offset else (y0, tau)


def _exp_log_init(t, y, offset):
    if offset:
        lo, hi = float(np.min(y)), float(np.max(y))
        pad = 0.05 * (hi - lo)
        if y[0] >= y[-1]:
            y_inf = lo - pad
            z = y - y_inf
        else:
            y_inf = hi + pad
            z = y_inf - y
    else:
        z = y
    if np.any(z <= 0):
        return None
    slope, icpt = np.polyfit(t - t[0], np.log(z), 1)
    if not slope < 0:
        return None
    tau = -1.0 / slope
    if offset:
        amp = math.exp(icpt) * (1 if y[0] >= y[-1] else -1)
        return (y_inf + amp, tau, y_inf)
    return (math.exp(icpt), tau)


def fit_exponential(data: Dataset, variant: str = "plain",
                    y_inf: float | None = None) -> FitResult:
    """Fit an exponential decay.

    ``plain``:  ``y = y0 exp(-t / tau)``
    ``offset``: ``y = y_inf + (y0 - y_inf) exp(-t / tau)``

    ``tau`` is fitted as ``log(tau)`` so it stays positive.  ``y0`` refers
    to ``t = 0`` even when the data start later.  For the offset variant a
    known asymptote can be held fixed by passing ``y_inf``.
    """
    if variant not in ("plain", "offset"):
        raise ValueError(f"unknown exponential variant {variant!r}")
    if y_inf is not None and variant != "offset":
        raise ValueError("a fixed asymptote needs the offset variant")
    if len(data) < 4:
        raise ValueError("exponential fit needs at least 4 points")
    if y_inf is not None:
        return _fit_fixed_asymptote(data, float(y_inf))
    offset = variant == "offset"
    t, y = data.t, data.y
    w = 1.0 / data.sigma if data.sigma is not None else np.ones_like(y)
    init = _exp_log_init(t, y, offset)
    flags = set()
    if init is None or not math.isfinite(init[1]) or init[1] <= 0:
        init = _exp_grid_init(t, y, w, offset)
        flags.add("grid_init")
    # internal amplitude refers to t[0]; rebased to t = 0 after the fit
    t0 = t[0]

    if offset:
        def model(tt, th):
            return th[2] + (th[0] - th[2]) * np.exp(-(tt - t0) / math.exp(th[1]))
        theta0 = [init[0], math.log(init[1]), init[2]]
    else:
        def model(tt, th):
            return th[0] * np.exp(-(tt - t0) / math.exp(th[1]))
        theta0 = [init[0], math.log(init[1])]

    theta, jac, r, converged, it, hist = _lm(model, data, theta0)
    cov = _covariance(jac, r, theta.size)
    tau = math.exp(theta[1])
    shift = math.exp(t0 / tau)
    if offset:
        y_inf = theta[2]
        y0 = y_inf + (theta[0] - y_inf) * shift
        # d(y0, tau, y_inf)/d(A0, s, y_inf) with A0 the value at t[0]
        jt = np.array([
            [shift, (theta[0] - y_inf) * shift * (-t0 / tau), 1 - shift],
            [0, tau, 0],
            [0, 0, 1],
        ])
        names, vals = ["y0", "tau", "y_inf"], [y0, tau, y_inf]
    else:
        y0 = theta[0] * shift
        jt = np.array([[shift, theta[0] * shift * (-t0 / tau)], [0, tau]])
        names, vals = ["y0", "tau"], [y0, tau]
    return _make_result(names, vals, _transform(cov, jt), r, converged, it, hist, flags)


def _fit_fixed_asymptote(data: Dataset, y_inf: float) -> FitResult:
    t = data.t
    shifted = Dataset(t, data.y - y_inf, data.sigma)
    sign = 1.0 if shifted.y[0] >= shifted.y[-1] else -1.0
    # Decay of |y - y_inf| is a plain exponential; reuse its initialization.
    plain = fit_exponential(Dataset(t, sign * shifted.y, data.sigma), "plain")
    y0 = y_inf + sign * plain["y0"]
    cov = plain.covariance
    return FitResult(
        params={"y0": y0, "tau": plain["tau"], "y_inf": y_inf},
        std_errors={"y0": plain.std_errors["y0"], "tau": plain.std_errors["tau"], "y_inf": 0.0},
        residual_norm=plain.residual_norm,
        converged=plain.converged,
        iterations=plain.iterations,
        covariance=None if cov is None else np.pad(cov, ((0, 1), (0, 1))),
        flags=plain.flags | {"fixed_asymptote"},
        cost_history=plain.cost_history,
        dof=plain.dof,
    )


def exponential_model(t, y0, tau, y_inf=0.0):
    return y_inf + (y0 - y_inf) * np.exp(-np.asarray(t, dtype=float) / tau)


def sinusoid_model(t, A, f, phi, C):
    return C + A * np.cos(2 * np.pi * f * np.asarray(t, dtype=float) + phi)
