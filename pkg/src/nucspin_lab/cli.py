"""``nucspin-lab`` command-line front end.

Configuration files are line-oriented ``key = value`` text with ``#``
comments.  Keys are the dotted field names of :class:`ApparatusParams`
(``relax.gamma_m``, ``readout.p_det``, ...) plus run settings (``shots``,
``seed``, ``rabi.points``, ...).  Numbers may carry a unit suffix; bare
numbers are SI with angular frequencies in rad/s.

Precedence is command-line flags, then the config file, then defaults.
``NUCSPIN_SEED`` supplies the seed when neither a flag nor the file does.

Curves go out as CSV, structured results as JSON with a provenance block.
Failures print one JSON object on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import io
import json
import math
import os
import platform
import re
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .experiments import (TARGETS, ApparatusParams, LatticeParams, gamma_m_from,
                          operation_budget, run_rabi, run_ramsey, run_state_prep_tomography,
                          run_t1, run_t2, t2_relation, transport_displacement,
                          transport_peak_velocity, transport_profile)
from .readout import CavityParams, ReadoutParams, cavity_enhanced_linewidth
from .spin import RelaxationParams

COMMANDS = ("rabi", "ramsey", "tomo", "t1", "t2", "transport", "report")
SEED_ENV = "NUCSPIN_SEED"

EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_IO = 3

TWO_PI = 2 * math.pi

# unit -> (dimension, factor to SI); angular frequencies go to rad/s
UNITS = {
    "rad/s": ("angular", 1.0), "Hz": ("angular", TWO_PI), "kHz": ("angular", TWO_PI * 1e3),
    "MHz": ("angular", TWO_PI * 1e6), "GHz": ("angular", TWO_PI * 1e9),
    "/s": ("rate", 1.0), "1/s": ("rate", 1.0), "s^-1": ("rate", 1.0),
    "s": ("time", 1.0), "ms": ("time", 1e-3), "us": ("time", 1e-6), "µs": ("time", 1e-6),
    "ns": ("time", 1e-9),
    "m": ("length", 1.0), "mm": ("length", 1e-3), "um": ("length", 1e-6),
    "µm": ("length", 1e-6), "nm": ("length", 1e-9),
    "T": ("field", 1.0), "G": ("field", 1e-4), "mG": ("field", 1e-7),
}

_NUMBER = re.compile(r"^([+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)\s*(\S*)$")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        super().__init__(message)
        self.line = line
        self.key = key


class CLIError(Exception):
    def __init__(self, kind: str, message: str, code: int = EXIT_RUNTIME):
        super().__init__(message)
        self.kind = kind
        self.code = code


@dataclass(frozen=True)
class RunSettings:
    mode: str = "sampled"
    seed: int = 0
    shots: int = 500
    out: str = ""
    rabi_periods: float = 2.0
    rabi_points: int = 20
    rabi_atoms: int = 1
    ramsey_periods: float = 3.0
    ramsey_points: int = 37
    tomo_state: str = "a"
    tomo_shots: int = 200
    tomo_resamples: int = 1000
    tomo_workers: int = 1
    tomo_estimator: str = "raw"
    t1_t_max: float = 0.8
    t1_points: int = 21
    t1_weighted: bool = True
    t2_trap_max: float = 0.2
    t2_points: int = 11
    transport_points: int = 101


@dataclass(frozen=True)
class Config:
    apparatus: ApparatusParams = field(default_factory=ApparatusParams)
    settings: RunSettings = field(default_factory=RunSettings)
    #: keys given explicitly in the parsed text; not part of equality
    explicit: frozenset = field(default=frozenset(), compare=False)


def _choice(*options):
    def check(v):
        if v not in options:
            return f"must be one of {', '.join(map(str, options))}"
    return check


def _positive(v):
    if not v > 0:
        return "must be positive"


def _nonneg(v):
    if not v >= 0:
        return "must be >= 0"


def _unit_interval(v):
    if not 0 <= v <= 1:
        return "must lie in [0, 1]"


def _signed_unit(v):
    if not -1 <= v <= 1:
        return "must lie in [-1, 1]"


def _at_least(n):
    def check(v):
        if v < n:
            return f"must be >= {n}"
    return check


# key -> (value kind, range check).  Order fixes the rendered layout.
KEYS = {
    "cavity.g": ("angular", _nonneg),
    "cavity.kappa": ("angular", _positive),
    "cavity.gamma": ("angular", _positive),
    "readout.n_emit": ("int", _at_least(0)),
    "readout.p_det": ("number", _unit_interval),
    "readout.threshold": ("int", _at_least(1)),
    "readout.eps_up": ("number", _unit_interval),
    "readout.window": ("time", _positive),
    "relax.gamma_p": ("rate", _nonneg),
    "relax.gamma_m": ("rate", _nonneg),
    "relax.larmor": ("angular", None),
    "relax.equilibrium_rz": ("number", _signed_unit),
    "rabi_freq": ("angular", _positive),
    "delta_e": ("angular", _nonneg),
    "atom_lifetime": ("time", _positive),
    "lattice.wavelength": ("length", _positive),
    "lattice.delta0": ("angular", _nonneg),
    "lattice.tau_transport": ("time", _positive),
    "polarization_fidelity": ("number", _unit_interval),
    "pulse_relaxation": ("bool", None),
    "mode": ("str", _choice("sampled", "analytic")),
    "seed": ("int", _at_least(0)),
    "shots": ("int", _at_least(1)),
    "out": ("str", None),
    "rabi.periods": ("number", _positive),
    "rabi.points": ("int", _at_least(8)),
    "rabi.atoms": ("int", _choice(1, 2)),
    "ramsey.periods": ("number", _positive),
    "ramsey.points": ("int", _at_least(8)),
    "tomo.state": ("str", _choice(*sorted(TARGETS))),
    "tomo.shots": ("int", _at_least(1)),
    "tomo.resamples": ("int", _at_least(0)),
    "tomo.workers": ("int", _at_least(1)),
    "tomo.estimator": ("str", _choice("raw", "unfolded")),
    "t1.t_max": ("time", _positive),
    "t1.points": ("int", _at_least(3)),
    "t1.weighted": ("bool", None),
    "t2.trap_max": ("time", _positive),
    "t2.points": ("int", _at_least(3)),
    "transport.points": ("int", _at_least(2)),
}

_APPARATUS_GROUPS = {"cavity": CavityParams, "readout": ReadoutParams,
                     "relax": RelaxationParams, "lattice": LatticeParams}
_SETTINGS_FIELDS = {f.name for f in dataclasses.fields(RunSettings)}


def _settings_attr(key: str) -> str | None:
    name = key.replace(".", "_")
    return name if name in _SETTINGS_FIELDS else None


def config_values(cfg: Config) -> dict:
    """Flat ``{dotted key: value}`` view of a config."""
    out = {}
    for key in KEYS:
        attr = _settings_attr(key)
        if attr is not None:
            out[key] = getattr(cfg.settings, attr)
        elif "." in key:
            group, name = key.split(".")
            out[key] = getattr(getattr(cfg.apparatus, group), name)
        else:
            out[key] = getattr(cfg.apparatus, key)
    return out


def _parse_value(key: str, raw: str):
    kind, _ = KEYS[key]
    if kind == "str":
        return raw
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    m = _NUMBER.match(raw)
    if not m:
        raise ValueError(f"malformed number {raw!r}")
    number, unit = m.group(1), m.group(2)
    if kind == "int":
        if unit or not re.fullmatch(r"[+-]?\d+", number):
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(number)
    value = float(number)
    if not unit:
        return value
    if unit not in UNITS:
        raise ValueError(f"unknown unit {unit!r}")
    dim, factor = UNITS[unit]
    if dim != kind:
        raise ValueError(f"unit {unit!r} ({dim}) does not apply to a {kind} value")
    return value * factor


def build_config(values: dict, lines: dict | None = None) -> Config:
    """Assemble and validate a :class:`Config` from a flat key/value map."""
    lines = lines or {}
    merged = config_values(Config())
    merged.update(values)
    for key, value in merged.items():
        check = KEYS[key][1]
        problem = check(value) if check else None
        if problem:
            raise ConfigError(f"{key} {problem} (got {value!r})", lines.get(key), key)

    def group_line(prefix):
        given = [lines[k] for k in lines if k == prefix or k.startswith(prefix + ".")]
        return min(given) if given else None

    kwargs = {}
    for group, cls in _APPARATUS_GROUPS.items():
        sub = {f.name: merged[f"{group}.{f.name}"] for f in dataclasses.fields(cls)}
        try:
            kwargs[group] = cls(**sub)
        except ValueError as exc:
            raise ConfigError(f"{group}: {exc}", group_line(group), group) from None
    for f in dataclasses.fields(ApparatusParams):
        if f.name not in kwargs:
            kwargs[f.name] = merged[f.name]
    try:
        apparatus = ApparatusParams(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    settings = RunSettings(**{_settings_attr(k): v for k, v in merged.items()
                              if _settings_attr(k) is not None})
    return Config(apparatus, settings, frozenset(values))


def parse_config(text: str) -> Config:
    """Parse ``key = value`` lines; missing keys keep their defaults."""
    values, lines = {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {body!r}", lineno)
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno, key)
        if key in values:
            raise ConfigError(f"duplicate key {key!r} (first on line {lines[key]})", lineno, key)
        try:
            values[key] = _parse_value(key, raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}", lineno, key) from None
        lines[key] = lineno
    return build_config(values, lines)


def _render_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_config(cfg: Config) -> str:
    """Canonical text form; bare SI numbers, so ``parse_config`` inverts it exactly."""
    return "".join(f"{k} = {_render_value(v)}\n" for k, v in config_values(cfg).items())


#: keys that change how a run executes but not what it computes
EXECUTION_KEYS = frozenset({"out", "tomo.workers"})


def _result_values(cfg: Config) -> dict:
    return {k: v for k, v in config_values(cfg).items() if k not in EXECUTION_KEYS}


def config_hash(cfg: Config) -> str:
    """SHA-256 of the canonical text of every result-affecting key."""
    text = "".join(f"{k} = {_render_value(v)}\n" for k, v in _result_values(cfg).items())
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# -- output formats --------------------------------------------------------------

def _format_cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.12g" % float(v)


def format_csv(columns: dict) -> str:
    names = list(columns)
    arrays = [np.asarray(columns[n]) for n in names]
    buf = io.StringIO()
    buf.write(",".join(names) + "\n")
    for row in zip(*arrays):
        buf.write(",".join(_format_cell(v) for v in row) + "\n")
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (frozenset, set)):
        return sorted(_jsonable(v) for v in obj)
    return obj


def format_json(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def provenance(cfg: Config, command: str) -> dict:
    return {
        "command": command,
        "config_sha256": config_hash(cfg),
        "config": {k: _render_value(v) for k, v in _result_values(cfg).items()},
        "seed": cfg.settings.seed,
        "mode": cfg.settings.mode,
        "versions": {"nucspin_lab": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
    }


def _fit_dict(fit) -> dict:
    return {"params": fit.params, "std_errors": fit.std_errors, "converged": fit.converged,
            "iterations": fit.iterations, "residual_norm": fit.residual_norm,
            "flags": fit.flags}


def _run_summary(run) -> dict:
    derived = {k: v for k, v in run.derived.items()
               if isinstance(v, (int, float, bool, np.integer, np.floating))}
    return {"experiment": run.name, "mode": run.mode, "derived": derived,
            "fits": {k: _fit_dict(v) for k, v in run.fits.items()}}


def _write(path: str, text: str, stdout) -> None:
    if not path or path == "-":
        stdout.write(text)
        return
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise CLIError("io", f"cannot write {path}: {exc.strerror or exc}", EXIT_IO) from None


# -- experiments -----------------------------------------------------------------

def _shots(cfg: Config):
    return None if cfg.settings.mode == "analytic" else cfg.settings.shots


def _larmor_period(cfg: Config) -> float:
    larmor = abs(cfg.apparatus.relax.larmor)
    if larmor == 0:
        raise CLIError("config", "relax.larmor must be nonzero for Larmor-timed sweeps", EXIT_USAGE)
    return TWO_PI / larmor


def do_rabi(cfg: Config):
    s, p = cfg.settings, cfg.apparatus
    span = s.rabi_periods * TWO_PI / p.rabi_freq
    grid = np.linspace(0.0, span, s.rabi_points, endpoint=False)
    run = run_rabi(p, grid, _shots(cfg), seed=s.seed, n_atoms=s.rabi_atoms)
    return run.columns, _run_summary(run)


def do_ramsey(cfg: Config):
    s = cfg.settings
    span = s.ramsey_periods * _larmor_period(cfg)
    grid = np.linspace(0.0, span, s.ramsey_points, endpoint=False)
    run = run_ramsey(cfg.apparatus, grid, _shots(cfg), seed=s.seed)
    return run.columns, _run_summary(run)


def do_t1(cfg: Config):
    s = cfg.settings
    grid = np.linspace(0.0, s.t1_t_max, s.t1_points)
    _, _, run = run_t1(cfg.apparatus, grid, _shots(cfg), seed=s.seed, weighted=s.t1_weighted)
    return run.columns, _run_summary(run)


def t2_trap_grid(cfg: Config) -> np.ndarray:
    """Trapping times snapped to whole Larmor periods so local fringes share a phase."""
    s = cfg.settings
    period = _larmor_period(cfg)
    raw = np.linspace(0.0, s.t2_trap_max, s.t2_points)
    return np.round(raw / period) * period


def do_t2(cfg: Config):
    _, run = run_t2(cfg.apparatus, t2_trap_grid(cfg), _shots(cfg), seed=cfg.settings.seed)
    return run.columns, _run_summary(run)


def do_transport(cfg: Config):
    lat = cfg.apparatus.lattice
    cols = transport_profile(lat, cfg.settings.transport_points)
    summary = {"experiment": "transport", "displacement": transport_displacement(lat),
               "peak_velocity": transport_peak_velocity(lat)}
    return cols, summary


def do_tomo(cfg: Config, state: str | None = None) -> dict:
    s = cfg.settings
    if s.mode == "analytic":
        raise CLIError("usage", "tomography needs sampled counts; use --mode sampled", EXIT_USAGE)
    state = state or s.tomo_state
    res = run_state_prep_tomography(cfg.apparatus, state, s.tomo_shots, seed=s.seed,
                                    mode=s.tomo_estimator, n_resamples=s.tomo_resamples,
                                    workers=s.tomo_workers)
    target = TARGETS[state]
    return {"state": state, "shots_per_basis": s.tomo_shots,
            "target": {"real": target.real.tolist(), "imag": target.imag.tolist()},
            **res.to_dict()}


def do_report(cfg: Config) -> dict:
    """Formula-level numbers plus every fitted experiment in one document."""
    p = cfg.apparatus
    relax = p.relax
    t1 = relax.t1
    t2 = t2_relation(t1, relax.gamma_m) if math.isfinite(t1) else relax.t2
    report = {
        "formulas": {
            "cavity_enhanced_linewidth": cavity_enhanced_linewidth(p.cavity),
            "detection_efficiency": p.readout.efficiency,
            "t1": t1,
            "t2": t2,
            "gamma_m": gamma_m_from(t1, t2) if math.isfinite(t1) else relax.gamma_m,
            "operation_budget": operation_budget(t2, p.readout.window),
            "transport_displacement": transport_displacement(p.lattice),
            "transport_peak_velocity": transport_peak_velocity(p.lattice),
        },
        "rabi": do_rabi(cfg)[1],
        "ramsey": do_ramsey(cfg)[1],
        "t1": do_t1(cfg)[1],
        "t2": do_t2(cfg)[1],
    }
    if cfg.settings.mode == "sampled":
        report["tomography"] = {k: do_tomo(cfg, k) for k in sorted(TARGETS)}
    return report


_CURVES = {"rabi": do_rabi, "ramsey": do_ramsey, "t1": do_t1, "t2": do_t2,
           "transport": do_transport}


# -- argument handling -------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError("usage", message, EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="master seed (overrides the file)")
    common.add_argument("--out", help="output path; '-' or omitted writes to stdout")
    common.add_argument("--mode", choices=("sampled", "analytic"))
    common.add_argument("--shots", type=int, help="shots per point (per basis for tomo)")

    parser = _Parser(prog="nucspin-lab", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"nucspin-lab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        cmd = sub.add_parser(name, parents=[common])
        if name in _CURVES:
            cmd.add_argument("--summary", help="also write fits and derived numbers as JSON")
        if name == "rabi":
            cmd.add_argument("--atoms", type=int, choices=(1, 2))
        if name == "tomo":
            cmd.add_argument("--state", choices=sorted(TARGETS))
            cmd.add_argument("--workers", type=int)
            cmd.add_argument("--resamples", type=int)
        if name in ("tomo", "report"):
            cmd.add_argument("--estimator", choices=("raw", "unfolded"))
    return parser


def load_config(args, environ) -> Config:
    """Defaults, then the config file, then flags; the seed falls back to the environment."""
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise CLIError("io", f"cannot read {args.config}: {exc.strerror or exc}",
                           EXIT_IO) from None
        cfg = parse_config(text)
    else:
        cfg = Config()
    values = {k: v for k, v in config_values(cfg).items() if k in cfg.explicit}
    if "seed" not in values and environ.get(SEED_ENV):
        try:
            values["seed"] = int(environ[SEED_ENV])
        except ValueError:
            raise CLIError("usage", f"{SEED_ENV} must be an integer", EXIT_USAGE) from None
    flags = {"seed": args.seed, "out": args.out, "mode": args.mode,
             "rabi.atoms": getattr(args, "atoms", None),
             "tomo.state": getattr(args, "state", None),
             "tomo.workers": getattr(args, "workers", None),
             "tomo.resamples": getattr(args, "resamples", None),
             "tomo.estimator": getattr(args, "estimator", None)}
    if args.shots is not None:
        flags["tomo.shots" if args.command == "tomo" else "shots"] = args.shots
    values.update({k: v for k, v in flags.items() if v is not None})
    return build_config(values)


def _error_line(kind: str, message: str, **extra) -> str:
    return json.dumps({"error": kind, "message": message, **extra}, sort_keys=True)


def main(argv=None, stdout=None, stderr=None, environ=None) -> int:
    stdout = stdout if stdout is not None else sys.stdout
    stderr = stderr if stderr is not None else sys.stderr
    environ = environ if environ is not None else os.environ
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args, environ)
        cfg.apparatus.validate()
        if args.command in _CURVES:
            columns, summary = _CURVES[args.command](cfg)
            _write(cfg.settings.out, format_csv(columns), stdout)
            if args.summary:
                summary["provenance"] = provenance(cfg, args.command)
                _write(args.summary, format_json(summary), stdout)
        else:
            body = do_tomo(cfg) if args.command == "tomo" else do_report(cfg)
            body["provenance"] = provenance(cfg, args.command)
            _write(cfg.settings.out, format_json(body), stdout)
    except CLIError as exc:
        stderr.write(_error_line(exc.kind, str(exc)) + "\n")
        return exc.code
    except ConfigError as exc:
        extra = {k: v for k, v in (("line", exc.line), ("key", exc.key)) if v is not None}
        stderr.write(_error_line("config", str(exc), **extra) + "\n")
        return EXIT_USAGE
    except (ValueError, RuntimeError, ArithmeticError) as exc:
        stderr.write(_error_line("runtime", f"{type(exc).__name__}: {exc}") + "\n")
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
