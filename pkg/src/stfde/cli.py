"""Command-line front end.

Subcommands ``forward``, ``inverse``, ``verify`` and ``ml-table`` read a
TOML scenario file (see :data:`CONFIG_SCHEMA` and the README), run the
requested experiment and write plain CSV/JSON into ``--out``. Output is
assembled in a temporary directory next to ``--out`` and renamed into place
only after the run succeeded.

Exit codes: 0 ok, 1 property failure, 2 configuration error, 3 numerical
failure. ``STFDE_LOG`` sets the log level (``DEBUG``, ``INFO``, ...).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import re
import shutil
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import toml
from scipy import integrate, special

from stfde import forward, inverse
from stfde.brownian import BrownianIncrements
from stfde.errors import DomainError, STFDEError, StageError
from stfde.fracops import GridFunction, TimeGrid, rl_integral
from stfde.mlf import ml, ml_derivative, ml_integral_identity_check, ml_signed, ml_table
from stfde.spectral import EigenSystem, SpatialField, elliptic_1d, laplace_1d

logger = logging.getLogger("stfde")

EXIT_OK = 0
EXIT_PROPERTY = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(STFDEError):
    """Invalid command line or scenario file."""


# {{{ expressions

_TOKEN = re.compile(r"\s*(?:(\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)|([A-Za-z_]\w*)|(\S))")
_FUNCTIONS = {"exp": np.exp, "sin": np.sin, "cos": np.cos}


def _tokenize(text: str) -> list[tuple[str, str]]:
    tokens = []
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:  # pragma: no cover - the pattern matches any non-space
            raise ConfigError(f"cannot read expression {text!r}")
        num, name, op = m.groups()
        if num is not None:
            tokens.append(("num", num))
        elif name is not None:
            tokens.append(("name", name))
        elif op in "+-*/^()":
            tokens.append(("op", op))
        else:
            raise ConfigError(f"unexpected character {op!r} in {text!r}")
        pos = m.end()
    tokens.append(("end", ""))
    return tokens


class Expression:
    """Arithmetic over one variable: ``+ - * / ^``, parentheses, ``exp``,
    ``sin``, ``cos``, ``const(value)`` and the constant ``pi``.

    Parsed by recursive descent into closures; nothing is ever passed to
    ``eval``.
    """

    def __init__(self, text: str, variable: str):
        self.text = str(text)
        self.variable = variable
        self._tokens = _tokenize(self.text)
        self._pos = 0
        self._fn = self._expr()
        if self._peek()[0] != "end":
            raise ConfigError(f"trailing input in expression {self.text!r}")
        del self._tokens

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        with np.errstate(all="ignore"):
            out = np.broadcast_to(np.asarray(self._fn(x), dtype=float), x.shape).copy()
        if not np.all(np.isfinite(out)):
            raise ConfigError(f"expression {self.text!r} is not finite on the grid")
        return out

    def _peek(self) -> tuple[str, str]:
        return self._tokens[self._pos]

    def _take(self) -> tuple[str, str]:
        tok = self._tokens[self._pos]
        self._pos += 1
        return tok

    def _expect(self, op: str) -> None:
        if self._take() != ("op", op):
            raise ConfigError(f"expected {op!r} in expression {self.text!r}")

    def _expr(self):
        fn = self._term()
        while self._peek() in (("op", "+"), ("op", "-")):
            op = self._take()[1]
            lhs, rhs = fn, self._term()
            fn = (lambda a, b: lambda x: a(x) + b(x))(lhs, rhs) if op == "+" else (
                lambda a, b: lambda x: a(x) - b(x)
            )(lhs, rhs)
        return fn

    def _term(self):
        fn = self._unary()
        while self._peek() in (("op", "*"), ("op", "/")):
            op = self._take()[1]
            lhs, rhs = fn, self._unary()
            fn = (lambda a, b: lambda x: a(x) * b(x))(lhs, rhs) if op == "*" else (
                lambda a, b: lambda x: a(x) / b(x)
            )(lhs, rhs)
        return fn

    def _unary(self):
        if self._peek() == ("op", "-"):
            self._take()
            inner = self._unary()
            return lambda x: -inner(x)
        if self._peek() == ("op", "+"):
            self._take()
            return self._unary()
        return self._power()

    def _power(self):
        base = self._atom()
        if self._peek() == ("op", "^"):
            self._take()
            exponent = self._unary()  # right associative
            return lambda x: base(x) ** exponent(x)
        return base

    def _atom(self):
        kind, value = self._take()
        if kind == "num":
            c = float(value)
            return lambda x: c
        if kind == "name":
            if value == self.variable:
                return lambda x: x
            if value == "pi":
                return lambda x: math.pi
            if value in _FUNCTIONS or value == "const":
                self._expect("(")
                arg = self._expr()
                self._expect(")")
                if value == "const":
                    return lambda x: np.full(np.shape(x), arg(np.zeros(())))
                f = _FUNCTIONS[value]
                return lambda x: f(arg(x))
            raise ConfigError(f"unknown name {value!r} in expression {self.text!r}")
        if (kind, value) == ("op", "("):
            inner = self._expr()
            self._expect(")")
            return inner
        raise ConfigError(f"unexpected {value or 'end of input'!r} in expression {self.text!r}")


# }}}


# {{{ configuration

#: section -> key -> (type, default); ``None`` means optional without default
CONFIG_SCHEMA: dict[str, dict[str, tuple[type | tuple[type, ...], object]]] = {
    "scenario": {
        "alpha": (float, 0.7),
        "delta": (float, 0.2),
        "T": (float, 1.0),
        "steps": (int, 1000),
        "modes": (int, 8),
        "paths": (int, 1000),
        "seed": (int, 0),
    },
    "operator": {
        "kind": (str, "laplace"),
        "grid_points": (int, 400),
        "a": (str, "1"),
        "c": (str, "0"),
    },
    "initial": {"u0": ((str, list), "0"), "u1": ((str, list), "0")},
    "source": {
        "f1": ((str, list), "0"),
        "g1": (str, "0"),
        "f2": ((str, list), "0"),
        "g2": (str, "0"),
    },
    "inverse": {
        "points": (list, [0.0, 1.0]),
        "n_rec": (int, 4),
        "method": (str, "tikhonov"),
        "reg": (float, None),
        "window": ((str, int), "auto"),
        "fit": (str, "data"),
        "moments": (str, None),
        "simulate": (str, "semi_analytic"),
    },
    "output": {"dump": (bool, False)},
}


def _check_type(section: str, key: str, value, kind):
    kinds = kind if isinstance(kind, tuple) else (kind,)
    if float in kinds and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if isinstance(value, bool) and bool not in kinds:
        raise ConfigError(f"[{section}] {key}: expected {kinds[0].__name__}, got a boolean")
    if not isinstance(value, kinds):
        names = " or ".join(k.__name__ for k in kinds)
        raise ConfigError(f"[{section}] {key}: expected {names}, got {type(value).__name__}")
    if isinstance(value, list):
        for v in value:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"[{section}] {key}: list entries must be numbers")
        value = [float(v) for v in value]
    return value


@dataclass(frozen=True)
class ScenarioConfig:
    """Validated content of a scenario file, defaults filled in."""

    values: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict) -> ScenarioConfig:
        unknown = set(raw) - set(CONFIG_SCHEMA)
        if unknown:
            raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
        out: dict = {}
        for section, keys in CONFIG_SCHEMA.items():
            given = raw.get(section, {})
            if not isinstance(given, dict):
                raise ConfigError(f"[{section}] must be a table")
            extra = set(given) - set(keys)
            if extra:
                raise ConfigError(f"[{section}] unknown key(s): {', '.join(sorted(extra))}")
            sec = {}
            for key, (kind, default) in keys.items():
                if key in given:
                    sec[key] = _check_type(section, key, given[key], kind)
                elif default is not None:
                    sec[key] = default
            out[section] = sec
        cfg = cls(out)
        cfg._validate()
        return cfg

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def to_dict(self) -> dict:
        return json.loads(json.dumps(self.values))

    def with_overrides(self, **overrides) -> ScenarioConfig:
        raw = self.to_dict()
        for key, value in overrides.items():
            if value is not None:
                raw["scenario"][key] = value
        return ScenarioConfig.from_dict(raw)

    def _validate(self) -> None:
        sc = self["scenario"]
        if not sc["T"] > 0:
            raise ConfigError("[scenario] T must be positive")
        for key in ("steps", "modes", "paths"):
            if sc[key] < 1:
                raise ConfigError(f"[scenario] {key} must be >= 1")
        if not 0 <= sc["seed"] < 2**64:
            raise ConfigError("[scenario] seed must be an unsigned 64-bit integer")
        op = self["operator"]
        if op["kind"] not in ("laplace", "elliptic"):
            raise ConfigError("[operator] kind must be 'laplace' or 'elliptic'")
        Expression(op["a"], "x")
        Expression(op["c"], "x")
        for section, keys in (("initial", ("u0", "u1")), ("source", ("f1", "f2"))):
            for key in keys:
                value = self[section][key]
                if isinstance(value, list):
                    if len(value) > sc["modes"]:
                        raise ConfigError(f"[{section}] {key} has more coefficients than modes")
                else:
                    Expression(value, "x")
        for key in ("g1", "g2"):
            Expression(self["source"][key], "t")
        inv = self["inverse"]
        if inv["method"] not in ("tikhonov", "svd"):
            raise ConfigError("[inverse] method must be 'tikhonov' or 'svd'")
        if inv["fit"] not in ("data", "pointwise"):
            raise ConfigError("[inverse] fit must be 'data' or 'pointwise'")
        if inv["simulate"] not in ("semi_analytic", "mc"):
            raise ConfigError("[inverse] simulate must be 'semi_analytic' or 'mc'")
        if isinstance(inv["window"], str) and inv["window"] != "auto":
            raise ConfigError("[inverse] window must be 'auto' or an integer")
        if not inv["points"] or any(p not in (0.0, 1.0) for p in inv["points"]):
            raise ConfigError("[inverse] points must be boundary points 0 and/or 1")


def parse_config(text: str) -> ScenarioConfig:
    try:
        raw = toml.loads(text)
    except toml.TomlDecodeError as exc:
        raise ConfigError(f"malformed TOML: {exc}") from exc
    return ScenarioConfig.from_dict(raw)


def dump_config(cfg: ScenarioConfig) -> str:
    return toml.dumps(cfg.to_dict())


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"scenario file not found: {path}")
    return parse_config(path.read_text())


@dataclass(frozen=True)
class RunConfig:
    subcommand: str
    scenario_path: Path | None
    out: Path | None
    overrides: dict
    workers: int | None
    quick: bool
    simulate_moments: bool
    verbosity: int


def _build_eig(cfg: ScenarioConfig) -> EigenSystem:
    n = cfg["scenario"]["modes"]
    op = cfg["operator"]
    points = max(op["grid_points"], 8 * n)
    if op["kind"] == "laplace":
        return laplace_1d(n, points)
    a = SpatialField.from_callable(Expression(op["a"], "x"), points + 1)
    c = SpatialField.from_callable(Expression(op["c"], "x"), points + 1)
    return elliptic_1d(a, c, n, points)


def _coefficients(value, eig: EigenSystem) -> np.ndarray:
    if isinstance(value, list):
        out = np.zeros(eig.count)
        out[: len(value)] = value
        return out
    f = SpatialField.from_callable(Expression(value, "x"), eig.x.size)
    return eig.project(f)


def build_scenario(cfg: ScenarioConfig) -> forward.Scenario:
    sc = cfg["scenario"]
    eig = _build_eig(cfg)
    grid = TimeGrid(sc["T"], sc["steps"])
    src = cfg["source"]
    g = {k: GridFunction.from_callable(grid, Expression(src[k], "t")) for k in ("g1", "g2")}
    try:
        return forward.Scenario(
            alpha=sc["alpha"],
            delta=sc["delta"],
            eig=eig,
            time_grid=grid,
            u0_coeffs=_coefficients(cfg["initial"]["u0"], eig),
            u1_coeffs=_coefficients(cfg["initial"]["u1"], eig),
            f1_coeffs=_coefficients(src["f1"], eig),
            f2_coeffs=_coefficients(src["f2"], eig),
            g1=g["g1"],
            g2=g["g2"],
            n_paths=sc["paths"],
            seed=sc["seed"],
        )
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc


# }}}


# {{{ output


class _Staging:
    """Temporary directory renamed to the target when the run succeeds."""

    def __init__(self, target: Path):
        self.target = target

    def __enter__(self) -> Path:
        parent = self.target.resolve().parent
        parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.target.name}.", dir=parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return
        old = None
        if self.target.exists():
            old = self.target.with_name(self.tmp.name + ".old")
            os.replace(self.target, old)
        os.replace(self.tmp, self.target)
        if old is not None:
            shutil.rmtree(old, ignore_errors=True)


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as f:
        json.dump(inverse._jsonable(obj), f, indent=2, sort_keys=True)
        f.write("\n")


def _decay_exponent(t: np.ndarray, norm: np.ndarray) -> float | None:
    """Log-log slope of *norm* over the last two decades of ``t``."""
    sel = (t >= t[-1] / 100) & (t > 0) & (norm > 0)
    if sel.sum() < 3:
        return None
    return float(np.polyfit(np.log(t[sel]), np.log(norm[sel]), 1)[0])


def write_norm_table(path: Path, stats: forward.EnsembleStats) -> float | None:
    """``t, l2_mean, l2_rms, local_exponent``; returns the fitted decay exponent."""
    t = stats.grid.nodes
    l2_mean = np.sqrt(np.sum(stats.mean**2, axis=0))
    l2_rms = np.sqrt(np.sum(stats.second_moment, axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        local = np.gradient(np.log(l2_rms), np.log(np.where(t > 0, t, np.nan)))
    fmt = forward.format_float
    with open(path, "w", newline="\n") as f:
        f.write("t,l2_mean,l2_rms,local_exponent\n")
        for k in range(t.size):
            loc = "" if not np.isfinite(local[k]) else fmt(local[k])
            f.write(f"{fmt(t[k])},{fmt(l2_mean[k])},{fmt(l2_rms[k])},{loc}\n")
    return _decay_exponent(t, l2_rms)


# }}}


# {{{ commands

_DUMP_LIMIT = 2**31


def cmd_forward(cfg: ScenarioConfig, run: RunConfig) -> int:
    s = build_scenario(cfg)
    kind = "stochastic" if s.stochastic else "deterministic"
    print(f"regime: {s.regime}, {kind}")
    dump = cfg["output"]["dump"]
    if dump and s.n_paths * s.eig.count * (s.time_grid.n_steps + 1) * 8 > _DUMP_LIMIT:
        raise ConfigError("ensemble too large for a binary dump; lower paths or steps")
    with _Staging(run.out) as tmp:
        t0 = time.perf_counter()
        try:
            if dump:
                ens = forward.simulate(s, workers=run.workers)
                stats = forward.ensemble_stats(ens)
                forward.write_dump(tmp / "ensemble.bin", ens)
            else:
                stats = forward.stream_statistics(s, workers=run.workers)
        except STFDEError as exc:
            raise StageError("forward", exc) from exc
        forward.write_summary_csv(tmp / "summary.csv", stats)
        exponent = write_norm_table(tmp / "norms.csv", stats)
        _write_json(
            tmp / "run.json",
            {
                "regime": s.regime,
                "stochastic": s.stochastic,
                "digest": s.digest(),
                "seed": s.seed,
                "paths": stats.n_paths,
                "norms": stats.norms(),
                "decay_exponent": exponent,
            },
        )
        (tmp / "scenario.toml").write_text(dump_config(cfg))
        logger.info("forward run took %.2f s", time.perf_counter() - t0)
    return EXIT_OK


def _report(result: inverse.RecoveryResult) -> str:
    lines = ["stage residuals (relative):"]
    for k, v in result.residuals.items():
        lines.append(f"  {k}: {v:.3e}  (reg {result.reg[k]:.3e})")
    pw = result.diagnostics.get("pointwise_residuals")
    if pw:
        for k, v in pw.items():
            lines.append(f"  {k} (deconvolution estimate): {v:.3e}")
    lines.append(f"f1: {' '.join(f'{c:+.6f}' for c in result.f1_coeffs)}")
    lines.append(f"f2: {' '.join(f'{c:+.6f}' for c in result.f2_coeffs)}")
    lines.append(f"f2 sign: {result.f2_sign_note}")
    excluded = result.diagnostics.get("excluded_modes")
    if excluded:
        lines.append(f"modes invisible from the observed points: {excluded}")
    return "\n".join(lines) + "\n"


def cmd_inverse(cfg: ScenarioConfig, run: RunConfig) -> int:
    inv = cfg["inverse"]
    s = build_scenario(cfg)
    points = inv["points"]
    if "moments" not in inv and not run.simulate_moments:
        raise ConfigError("no moment data: set [inverse] moments or pass --simulate-moments")
    if inv["n_rec"] > s.eig.count:
        raise ConfigError("[inverse] n_rec exceeds the number of modes")
    if run.simulate_moments:
        moments_path = None
    else:
        moments_path = Path(inv["moments"])
        if not moments_path.is_absolute() and run.scenario_path is not None:
            moments_path = run.scenario_path.parent / moments_path
        if not moments_path.is_file():
            raise ConfigError(f"moment file not found: {moments_path}")
    window = inv["window"]
    window = None if window == 0 else window
    with _Staging(run.out) as tmp:
        try:
            if moments_path is None:
                m = inverse.simulate_moments(s, points, mode=inv["simulate"], workers=run.workers)
                inverse.write_moments_csv(tmp / "moments.csv", m)
            else:
                m = inverse.read_moments_csv(moments_path)
        except DomainError as exc:
            raise ConfigError(str(exc)) from exc
        except STFDEError as exc:
            raise StageError("moments", exc) from exc
        setup = inverse.InverseSetup(
            s.alpha,
            s.delta,
            s.eig,
            GridFunction.from_callable(m.grid, Expression(cfg["source"]["g1"], "t")),
            GridFunction.from_callable(m.grid, Expression(cfg["source"]["g2"], "t")),
        )
        result = inverse.recover_sources(
            m, setup, inv["n_rec"], reg=inv.get("reg"), method=inv["method"], window=window, fit=inv["fit"]
        )
        inverse.write_result_json(tmp / "result.json", result)
        report = _report(result)
        (tmp / "report.txt").write_text(report)
        (tmp / "scenario.toml").write_text(dump_config(cfg))
        print(report, end="")
    return EXIT_OK


def cmd_ml_table(args) -> int:
    xs = np.linspace(0.0, args.x_max, args.points)
    rows = ml_table(args.alpha, args.beta, xs)
    text = "alpha,beta,x,value\n" + "".join(
        ",".join(forward.format_float(v) for v in row) + "\n" for row in rows
    )
    if args.out is None:
        sys.stdout.write(text)
        return EXIT_OK
    with _Staging(Path(args.out)) as tmp:
        (tmp / "ml_table.csv").write_text(text)
    return EXIT_OK


# }}}


# {{{ verification suite


def _check(name: str, error: float, tolerance: float, **extra) -> dict:
    return {
        "name": name,
        "error": float(error),
        "tolerance": float(tolerance),
        "passed": bool(error <= tolerance),
        **extra,
    }


def check_ml_closed_forms() -> list[dict]:
    x = np.linspace(0.0, 50.0, 1000)
    xh = np.linspace(0.0, 5.0, 200)
    return [
        _check("ml_exp", np.max(np.abs(ml(1.0, 1.0, x) - np.exp(-x))), 1e-10),
        _check("ml_cos", np.max(np.abs(ml(2.0, 1.0, x) - np.cos(np.sqrt(x)))), 1e-8),
        _check("ml_erfcx", np.max(np.abs(ml(0.5, 1.0, xh) - special.erfcx(xh))), 1e-8),
    ]


def check_ml_integral_identity(quick: bool) -> dict:
    values = (0.4, 1.5) if quick else (0.4, 0.9, 1.5)
    worst = 0.0
    for a in values:
        for b in (0.5, 1.0, 2.0) if not quick else (0.5, 2.0):
            for t in (0.3, 1.0, 2.5) if not quick else (1.0,):
                lhs, rhs = ml_integral_identity_check(a, b, -5.0, t)
                worst = max(worst, abs(lhs - rhs) / (1 + abs(rhs)))
    return _check("ml_integral_identity", worst, 1e-6)


def check_ml_derivative(quick: bool) -> dict:
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(5 if quick else 20):
        a = rng.uniform(0.3, 1.9)
        lam = rng.uniform(0.5, 20.0)
        t = rng.uniform(0.2, 2.0)
        f = lambda s: ml(a, 1.0, lam * s**a)
        d1 = (f(t + 1e-3) - f(t - 1e-3)) / 2e-3
        d2 = (f(t + 5e-4) - f(t - 5e-4)) / 1e-3
        richardson = (4 * d2 - d1) / 3
        exact = ml_derivative(a, lam, t)
        worst = max(worst, abs(richardson - exact) / max(abs(exact), 1e-12))
    return _check("ml_derivative", worst, 1e-5)


def check_complete_monotonicity() -> dict:
    x = np.arange(0.0, 50.0 + 1e-9, 1e-2)
    violations = 0
    for a, b in ((0.4, 0.4), (0.6, 1.0), (0.9, 1.5)):
        d = ml(a, b, x)
        for k in range(4):
            # (-1)^k Delta^k f >= 0, allowing rounding at the flat tail
            scale = 2**k * 1e-13 * np.max(np.abs(ml(a, b, x)))
            violations += int(np.sum((-1) ** k * d < -scale))
            d = np.diff(d)
    return _check("complete_monotonicity", violations, 0)


def check_semigroup(quick: bool) -> dict:
    n = 200 if quick else 1000
    grid = TimeGrid(1.0, n)
    f = GridFunction.from_callable(grid, lambda t: np.cos(2 * t) + t**2)
    worst = 0.0
    orders = (0.3, 1.1) if quick else (0.3, 0.7, 1.1)
    for a1 in orders:
        for a2 in orders:
            # I^a2 f behaves like t^a2 near 0; the outer rule is told so
            lhs = rl_integral(rl_integral(f, a2), a1, singular=[a2]).values
            rhs = rl_integral(f, a1 + a2).values
            worst = max(worst, np.max(np.abs(lhs - rhs)[1:-1]))
    return _check("semigroup", worst, grid.h, h=grid.h)


def _isometry_scenario(paths: int, seed: int) -> forward.Scenario:
    eig = laplace_1d(1, 8)
    grid = TimeGrid(1.0, 1000)
    one = GridFunction.from_callable(grid, lambda t: np.ones_like(t))
    return forward.Scenario(0.7, 0.2, eig, grid, f2_coeffs=[1.0], g2=one, n_paths=paths, seed=seed)


def check_isometry(quick: bool, seed: int = 20240601) -> list[dict]:
    """Second moment, mean and ``E[X(T) B(T)]`` of ``X = int K dB`` against quadrature."""
    s = _isometry_scenario(20_000 if quick else 100_000, seed)
    a, b = s.alpha, s.beta
    lam = float(s.eig.lambdas[0])
    x_sum = x2_sum = xb_sum = 0.0
    for lo in range(0, s.n_paths, forward.PATH_BLOCK):
        ids = np.arange(lo, min(lo + forward.PATH_BLOCK, s.n_paths))
        x = forward.solve_source(s, ids)[:, 0, -1]
        bt = BrownianIncrements.generate(s.time_grid, s.seed, ids).dB.sum(axis=-1)
        x_sum += x.sum()
        x2_sum += (x**2).sum()
        xb_sum += (x * bt).sum()
    m = s.n_paths
    second = x2_sum / m
    mean = x_sum / m
    cross = xb_sum / m
    oracle2, _ = integrate.quad(
        lambda u: ml(a, b, lam * u**a) ** 2, 0.0, 1.0, weight="alg", wvar=(2 * b - 2, 0.0), epsabs=1e-13
    )
    # int_0^T K = T^beta E_{alpha,beta+1}(-lam T^alpha)
    oracle_cross = float(ml(a, b + 1.0, lam))
    se2 = math.sqrt(2.0 / m) * oracle2
    se_mean = math.sqrt(oracle2 / m)
    se_cross = math.sqrt((oracle2 + oracle_cross**2) / m)
    return [
        _check("isometry_second_moment", abs(second - oracle2) / se2, 3.0, value=second, oracle=oracle2),
        _check("isometry_mean", abs(mean) / se_mean, 3.0, value=mean),
        _check("isometry_cross_moment", abs(cross - oracle_cross) / se_cross, 3.0, value=cross, oracle=oracle_cross),
    ]


def check_weak_residual() -> dict:
    eig = laplace_1d(1, 8)
    grid = TimeGrid(1.0, 1000)
    s = forward.Scenario(0.6, 0.2, eig, grid, u0_coeffs=[1.0])
    rep = forward.weak_residual(forward.simulate(s), s)
    return _check("weak_residual", float(np.max(rep.relative)), 1e-3)


def check_duhamel() -> dict:
    eig = laplace_1d(4, 64)
    grid = TimeGrid(1.0, 1000)
    g1 = GridFunction.from_callable(grid, lambda t: 1 + t / 2)
    s = forward.Scenario(0.8, 0.2, eig, grid, f1_coeffs=[1.0, 0.5, 0.0, -0.2], g1=g1)
    lhs, rhs = inverse.duhamel_sides(s, (0.0, 1.0))
    err = math.sqrt(np.trapezoid((lhs - rhs) ** 2, dx=grid.h).sum() / np.trapezoid(lhs**2, dx=grid.h).sum())
    return _check("duhamel", err, 1e-3)


def check_reference_solver() -> dict:
    eig = laplace_1d(8, 64)
    grid = TimeGrid(1.0, 1000)
    n = np.arange(1, 9)
    u0 = np.where(n % 2 == 1, 4 * math.sqrt(2) / (n * np.pi) ** 3, 0.0)
    s = forward.Scenario(0.8, 0.2, eig, grid, u0_coeffs=u0)
    spectral = forward.simulate(s).values[0]
    ref = forward.reference_timestep(s)
    err = math.sqrt(
        np.trapezoid((spectral - ref) ** 2, dx=grid.h).sum() / np.trapezoid(spectral**2, dx=grid.h).sum()
    )
    return _check("reference_solver", err, 1e-3)


def run_verification(quick: bool = False) -> list[dict]:
    checks = [
        lambda: check_ml_closed_forms(),
        lambda: check_ml_integral_identity(quick),
        lambda: check_ml_derivative(quick),
        check_complete_monotonicity,
        lambda: check_semigroup(quick),
        lambda: check_isometry(quick),
        check_weak_residual,
        check_duhamel,
        check_reference_solver,
    ]
    results = []
    for fn in checks:
        t0 = time.perf_counter()
        out = fn()
        out = out if isinstance(out, list) else [out]
        dt = (time.perf_counter() - t0) / len(out)
        for r in out:
            r["seconds"] = round(dt, 3)
            logger.info("%s: error %.3g (tol %.3g) %s", r["name"], r["error"], r["tolerance"], "ok" if r["passed"] else "FAIL")
        results.extend(out)
    return results


def cmd_verify(run: RunConfig) -> int:
    results = run_verification(run.quick)
    report = {"quick": run.quick, "passed": all(r["passed"] for r in results), "checks": results}
    text = json.dumps(inverse._jsonable(report), indent=2, sort_keys=True) + "\n"
    if run.out is not None:
        with _Staging(run.out) as tmp:
            (tmp / "verify.json").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK if report["passed"] else EXIT_PROPERTY


# }}}


# {{{ entry point


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stfde", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scenario_required: bool) -> None:
        p.add_argument("--scenario", type=Path, required=scenario_required, help="TOML scenario file")
        p.add_argument("--out", type=Path, required=True, help="output directory (replaced atomically)")
        p.add_argument("--seed", type=int)
        p.add_argument("--paths", type=int, help="Monte Carlo paths M")
        p.add_argument("--steps", type=int, help="time steps n")
        p.add_argument("--modes", type=int, help="eigenmodes N")
        p.add_argument("--t-max", type=float, dest="T", help="final time T")
        p.add_argument("--workers", type=int, help="worker threads (default: all CPUs)")

    common(sub.add_parser("forward", help="solve the forward problem"), True)
    p = sub.add_parser("inverse", help="recover f1, f2 from flux moments")
    common(p, True)
    p.add_argument("--simulate-moments", action="store_true", help="simulate the moment data from the scenario")
    p = sub.add_parser("verify", help="run the property suite")
    p.add_argument("--out", type=Path)
    p.add_argument("--quick", action="store_true", help="smaller sizes, finishes within a minute")
    p = sub.add_parser("ml-table", help="tabulate E_{alpha,beta}(-x)")
    p.add_argument("--alpha", type=float, nargs="+", required=True)
    p.add_argument("--beta", type=float, nargs="+", default=[1.0])
    p.add_argument("--x-max", type=float, default=10.0)
    p.add_argument("--points", type=int, default=101)
    p.add_argument("--out", type=Path)
    return parser


def _log_level() -> int:
    value = os.environ.get("STFDE_LOG", "WARNING").strip()
    if value.isdigit():
        return int(value)
    level = logging.getLevelName(value.upper())
    return level if isinstance(level, int) else logging.WARNING


def main(argv=None) -> int:
    level = _log_level()
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        if args.command == "ml-table":
            if args.points < 2 or not args.x_max > 0:
                raise ConfigError("need --points >= 2 and --x-max > 0")
            return cmd_ml_table(args)
        overrides = {
            k: getattr(args, k, None) for k in ("seed", "paths", "steps", "modes", "T")
        }
        workers = getattr(args, "workers", None)
        if workers is not None and workers < 1:
            raise ConfigError("--workers must be >= 1")
        run = RunConfig(
            subcommand=args.command,
            scenario_path=getattr(args, "scenario", None),
            out=args.out,
            overrides=overrides,
            workers=workers,
            quick=getattr(args, "quick", False),
            simulate_moments=getattr(args, "simulate_moments", False),
            verbosity=level,
        )
        if args.command == "verify":
            return cmd_verify(run)
        cfg = load_config(run.scenario_path).with_overrides(**overrides)
        if args.command == "forward":
            return cmd_forward(cfg, run)
        return cmd_inverse(cfg, run)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"numerical failure in stage {exc.stage}: {exc.cause}", file=sys.stderr)
        return EXIT_NUMERIC
    except STFDEError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())


# }}}
