r"""Recovery of separable sources from moments of the boundary flux.

For the source :math:`F = I^\delta(f_1(x) g_1(t) + f_2(x) g_2(t) \dot B)` and
zero initial data, the flux at a boundary point :math:`x_0` satisfies

.. math::

    \mathbb E[\partial_\nu u](x_0, t) = \int_0^t g_1(\tau)\, (I^{a} w_1)(t - \tau)\, d\tau,
    \qquad
    \mathrm{Var}[\partial_\nu u](x_0, t)
        = \int_0^t g_2^2(\tau)\, |(I^{a} w_2)(t - \tau)|^2\, d\tau,

with :math:`a = \alpha + \delta - 1` and
:math:`w_i(t) = \sum_n \langle f_i, \phi_n\rangle\, \partial_\nu\phi_n(x_0)\,
E_{\alpha,1}(-\lambda_n t^\alpha)`, the flux of the source-free solution
started from :math:`f_i`. Both moment equations are Volterra equations of the
first kind; :func:`recover_sources` differentiates them into the second kind,
solves by marching, removes the fractional smoothing and fits mode
coefficients. Differentiation amplifies Monte Carlo noise badly, so by default
those estimates only seed a final fit of the moments themselves: linear in
the ``f_1`` coefficients for the mean, a quadratic form in the ``f_2``
coefficients for the variance.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, signal

from stfde.errors import DomainError, STFDEError, StageError
from stfde.fracops import (
    GridFunction,
    TimeGrid,
    cell_moments,
    fractional_derivative_array,
    rl_integral_array,
    rl_integral_weighted,
    trapezoid_convolve,
)
from stfde.forward import (
    Scenario,
    deterministic_source_modes,
    deterministic_weights,
    format_float,
    read_dump,
    stream_statistics,
)
from stfde.mlf import ml
from stfde.spectral import EigenSystem

logger = logging.getLogger(__name__)

#: raw variances below this are rejected rather than clamped
VARIANCE_FLOOR = -1e-12


# {{{ data containers


@dataclass(frozen=True)
class MomentData:
    """Mean and variance of the conormal flux at boundary points, shape ``(P, n + 1)``."""

    points: tuple[float, ...]
    grid: TimeGrid
    mean_flux: np.ndarray
    var_flux: np.ndarray
    provenance: str = "semi-analytic"

    def __post_init__(self) -> None:
        points = tuple(float(p) for p in self.points)
        object.__setattr__(self, "points", points)
        if not points or any(p not in (0.0, 1.0) for p in points) or len(set(points)) != len(points):
            raise DomainError(f"boundary points must be distinct entries of {{0, 1}}: {points}")
        shape = (len(points), self.grid.n_steps + 1)
        mean = np.asarray(self.mean_flux, dtype=float).reshape(shape)
        var = np.asarray(self.var_flux, dtype=float).reshape(shape)
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
            raise DomainError("moment data has non-finite entries")
        if np.any(var < VARIANCE_FLOOR):
            raise DomainError(f"variance below {VARIANCE_FLOOR}: {var.min()}")
        scale = max(1.0, float(np.max(np.abs(mean))), float(np.max(var)))
        if np.any(np.abs(mean[:, 0]) > 1e-12 * scale) or np.any(var[:, 0] > 1e-12 * scale):
            raise DomainError("moments must vanish at t = 0 (zero initial data)")
        object.__setattr__(self, "mean_flux", mean)
        object.__setattr__(self, "var_flux", np.maximum(var, 0.0))

    def with_noise(self, sigma: float, seed: int = 0) -> MomentData:
        """Copy with i.i.d. ``N(0, sigma^2)`` added to both moments (not at ``t = 0``)."""
        rng = np.random.default_rng(seed)
        noise = sigma * rng.standard_normal((2,) + self.mean_flux.shape)
        noise[..., 0] = 0.0
        return MomentData(
            self.points,
            self.grid,
            self.mean_flux + noise[0],
            np.maximum(self.var_flux + noise[1], 0.0),
            f"{self.provenance}+noise({sigma:g})",
        )


@dataclass(frozen=True)
class InverseSetup:
    """Everything the recovery needs to know besides the unknown ``f_1, f_2``."""

    alpha: float
    delta: float
    eig: EigenSystem
    g1: GridFunction
    g2: GridFunction

    @classmethod
    def from_scenario(cls, s: Scenario) -> InverseSetup:
        if s.g1 is None or s.g2 is None:
            raise DomainError("the scenario needs both temporal factors g1 and g2")
        return cls(s.alpha, s.delta, s.eig, s.g1, s.g2)

    @property
    def smoothing(self) -> float:
        """Order ``alpha + delta - 1`` of the fractional integral in the flux."""
        return self.alpha + self.delta - 1.0


@dataclass(frozen=True)
class ModeFit:
    coeffs: np.ndarray
    #: ``||A c - b|| / ||b||`` (zero for zero data)
    relative_residual: float
    residual: float
    reg: float
    singular_values: np.ndarray
    smallest_retained: float
    excluded: tuple[int, ...] = ()


@dataclass
class RecoveryResult:
    f1_coeffs: np.ndarray
    f2_coeffs: np.ndarray
    #: ``"unique"``, ``"ambiguous"`` or ``"no-signal"``; the global sign of
    #: ``f_2`` is never identifiable and is fixed by making the largest
    #: coefficient positive
    f2_sign_note: str
    residuals: dict[str, float]
    reg: dict[str, float]
    diagnostics: dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "f1_coeffs": [float(c) for c in self.f1_coeffs],
            "f2_coeffs": [float(c) for c in self.f2_coeffs],
            "f2_sign_note": self.f2_sign_note,
            "residuals": {k: float(v) for k, v in self.residuals.items()},
            "regularization": {k: float(v) for k, v in self.reg.items()},
            "diagnostics": _jsonable(self.diagnostics),
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)) and not isinstance(obj, bool):
        return int(obj)
    return obj


def write_result_json(path, result: RecoveryResult) -> None:
    with open(path, "w") as f:
        json.dump(result.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


# }}}


# {{{ moment simulation


def _flux_variance(setup: InverseSetup, coeffs: np.ndarray, point: float) -> np.ndarray:
    """``int_0^t g2^2(t - s) |sum_n c_n dphi_n K_n(s)|^2 ds`` on the grid.

    ``g2^2`` is interpolated linearly; the squared kernel is integrated
    against it with :func:`~stfde.fracops.cell_moments`.
    """
    grid = setup.g2.grid
    alpha, beta = setup.alpha, setup.alpha + setup.delta
    lam = setup.eig.lambdas
    w = coeffs * setup.eig.dphi_trace(np.arange(1, lam.size + 1), point)
    active = np.flatnonzero(w)
    out = np.zeros(grid.n_steps + 1)
    if active.size == 0:
        return out

    def r2(s: np.ndarray) -> np.ndarray:
        # K_n(s) = s^(beta - 1) R_n(s); the power goes into the weight
        return (w[active] @ ml(alpha, beta, lam[active, None] * s[None, :] ** alpha)) ** 2

    m0, m1 = cell_moments(r2, 2 * beta - 2, grid)
    g2 = setup.g2.values**2
    n = grid.n_steps
    out[1:] = signal.fftconvolve(m0, g2[1:])[:n] + signal.fftconvolve(m1, g2[:-1])[:n]
    return np.maximum(out, 0.0)


def duhamel_sides(s: Scenario, points) -> tuple[np.ndarray, np.ndarray]:
    """Both sides of the Duhamel identity for the mean flux at boundary *points*.

    The forward side is the flux of the deterministic source response; the
    other side convolves ``g_1`` with ``I^(alpha+delta-1)`` of the flux of the
    homogeneous solution started from ``f_1``. For ``alpha + delta < 1`` the
    identity is stated for ``I^(1-alpha-delta)`` of the forward flux, so that
    integral is applied to the forward side instead. Shapes ``(P, n + 1)``.
    """
    if s.has_initial_data or s.g1 is None or s.f1_table is not None:
        raise DomainError("the Duhamel identity needs a separable source and zero initial data")
    points = tuple(float(p) for p in np.atleast_1d(points))
    grid = s.time_grid
    traces = s.eig.trace_matrix(points)
    forward = traces @ deterministic_source_modes(s)
    t = grid.nodes
    lam = s.eig.lambdas
    homogeneous = ml(s.alpha, 1.0, lam[:, None] * t[None, :] ** s.alpha) * s.f1_coeffs[:, None]
    w1 = traces @ homogeneous
    a = s.alpha + s.delta - 1.0
    # the flux carries powers t^(k alpha) near 0, shifted by a after smoothing
    singular = [k * s.alpha for k in range(1, 4)]
    if a > 0:
        w1 = rl_integral_array(w1, a, grid.h, singular)
        singular = [a + e for e in [0.0] + singular]
    elif a < 0:
        forward = rl_integral_array(forward, -a, grid.h, [s.beta + e for e in [0.0] + singular])
    return forward, trapezoid_convolve(s.g1.values, w1, grid.h, singular)


def simulate_moments(
    s: Scenario, points, mode: str = "semi_analytic", workers: int | None = None
) -> MomentData:
    """Flux moments at boundary *points* for a scenario with zero initial data.

    ``semi_analytic`` evaluates the mean with the deterministic forward
    quadrature and the variance with the Ito isometry; ``mc`` runs
    ``s.n_paths`` paths of the forward model.
    """
    points = tuple(float(p) for p in np.atleast_1d(points))
    if s.has_initial_data:
        raise DomainError("moment simulation assumes zero initial data")
    traces = s.eig.trace_matrix(points)
    if mode == "semi_analytic":
        if s.f1_table is not None or s.f2_table is not None:
            raise DomainError("semi-analytic moments need a separable source")
        mean = traces @ deterministic_source_modes(s)
        if s.stochastic:
            setup = InverseSetup(s.alpha, s.delta, s.eig, s.g1, s.g2)
            var = np.stack([_flux_variance(setup, s.f2_coeffs, p) for p in points])
        else:
            var = np.zeros_like(mean)
        return MomentData(points, s.time_grid, mean, var, "semi-analytic")
    if mode == "mc":
        stats = stream_statistics(
            s, observable=lambda v: np.einsum("pn,mnk->mpk", traces, v), workers=workers
        )
        return MomentData(points, s.time_grid, stats.mean, stats.variance, f"mc:M={stats.n_paths}")
    raise DomainError(f"unknown moment mode {mode!r}")


def moments_from_dump(path, eig: EigenSystem, points) -> MomentData:
    """Flux moments from a binary ensemble dump and the eigensystem that produced it."""
    t, values = read_dump(path)
    if values.shape[0] < 2:
        raise DomainError("a dump with fewer than 2 paths has no variance")
    if values.shape[1] > eig.count:
        raise DomainError("dump has more modes than the eigensystem")
    points = tuple(float(p) for p in np.atleast_1d(points))
    traces = eig.trace_matrix(points)[:, : values.shape[1]]
    flux = np.einsum("pn,mnk->mpk", traces, values)
    grid = TimeGrid(float(t[-1]), t.size - 1)
    return MomentData(
        points, grid, flux.mean(axis=0), flux.var(axis=0, ddof=1), f"mc:M={values.shape[0]}"
    )


def write_moments_csv(path, m: MomentData) -> None:
    with open(path, "w", newline="\n") as f:
        f.write("x,t,mean,variance\n")
        for p, x in enumerate(m.points):
            for k, t in enumerate(m.grid.nodes):
                f.write(
                    f"{format_float(x)},{format_float(t)},"
                    f"{format_float(m.mean_flux[p, k])},{format_float(m.var_flux[p, k])}\n"
                )


def read_moments_csv(path, provenance: str = "csv") -> MomentData:
    """Read ``x,t,mean,variance`` rows; every point must share the same uniform grid."""
    rows: dict[float, list[tuple[float, float, float]]] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or set(reader.fieldnames) != {"x", "t", "mean", "variance"}:
            raise DomainError("moment CSV needs the header x,t,mean,variance")
        for row in reader:
            rows.setdefault(float(row["x"]), []).append(
                (float(row["t"]), float(row["mean"]), float(row["variance"]))
            )
    if not rows:
        raise DomainError("moment CSV has no rows")
    points = tuple(sorted(rows))
    tables = [np.array(sorted(rows[p])) for p in points]
    t = tables[0][:, 0]
    grid = TimeGrid(float(t[-1]), t.size - 1)
    for tab in tables:
        if tab.shape != tables[0].shape or not np.allclose(tab[:, 0], grid.nodes, rtol=0, atol=1e-9 * grid.t_max):
            raise DomainError("moment CSV times must form the same uniform grid for every x")
    return MomentData(
        points,
        grid,
        np.stack([tab[:, 1] for tab in tables]),
        np.stack([tab[:, 2] for tab in tables]),
        provenance,
    )


# }}}


# {{{ deconvolution


def differentiate(values: np.ndarray, h: float, window: int | None = None) -> np.ndarray:
    """Time derivative along the last axis.

    Without *window*: fourth-order central differences with fourth-order
    one-sided stencils at both ends. With *window*: local quadratic
    regression (Savitzky-Golay) over that many nodes.
    """
    if window:
        if window % 2 == 0 or window < 5:
            raise DomainError("smoothing window must be odd and >= 5")
        return signal.savgol_filter(values, window, 2, deriv=1, delta=h, axis=-1, mode="interp")
    f = values
    n = f.shape[-1]
    if n < 5:
        raise DomainError("need at least 5 samples to differentiate")
    d = np.empty(f.shape)
    d[..., 2:-2] = (f[..., :-4] - 8 * f[..., 1:-3] + 8 * f[..., 3:-1] - f[..., 4:]) / 12
    d[..., 0] = (-25 * f[..., 0] + 48 * f[..., 1] - 36 * f[..., 2] + 16 * f[..., 3] - 3 * f[..., 4]) / 12
    d[..., 1] = (-3 * f[..., 0] - 10 * f[..., 1] + 18 * f[..., 2] - 6 * f[..., 3] + f[..., 4]) / 12
    d[..., -1] = (25 * f[..., -1] - 48 * f[..., -2] + 36 * f[..., -3] - 16 * f[..., -4] + 3 * f[..., -5]) / 12
    d[..., -2] = (3 * f[..., -1] + 10 * f[..., -2] - 18 * f[..., -3] + 6 * f[..., -4] - f[..., -5]) / 12
    return d / h


def volterra_condition(g: GridFunction) -> float:
    """``||g'||_1 / |g(0)|``: large values mean the marching amplifies errors."""
    dg = differentiate(g.values, g.grid.h)
    return float(np.trapezoid(np.abs(dg), dx=g.grid.h) / abs(g.values[0]))


def deconvolve_volterra(
    m: GridFunction, g: GridFunction, window: int | None = None, g_min: float = 1e-8
) -> GridFunction:
    """Solve ``m(t) = int_0^t g(tau) h(t - tau) dtau`` for ``h``.

    Differentiating gives ``m'(t) = g(0) h(t) + int_0^t g'(t - tau) h(tau) dtau``,
    which is marched with the trapezoidal rule. ``m.values`` may hold several
    rows. *window* enables smoothed differentiation of noisy data.
    """
    if m.grid != g.grid:
        raise DomainError("data and kernel live on different grids")
    g0 = float(g.values[0])
    if abs(g0) < g_min:
        raise DomainError(f"|g(0)| = {abs(g0):g} is below {g_min:g}")
    cond = volterra_condition(g)
    if cond > 1e3:
        logger.warning("Volterra kernel is poorly conditioned: ||g'||_1/|g(0)| = %.3g", cond)

    h = m.grid.h
    n = m.grid.n_steps
    dm = differentiate(m.values, h, window)
    dg = differentiate(g.values, h)
    out = np.zeros(dm.shape)
    out[..., 0] = dm[..., 0] / g0
    diag = g0 + 0.5 * h * dg[0]
    for k in range(1, n + 1):
        # newest first: dg[k-1], ..., dg[1] against out[1], ..., out[k-1]
        hist = out[..., 1:k] @ dg[k - 1 : 0 : -1] if k > 1 else 0.0
        out[..., k] = (dm[..., k] - h * (0.5 * dg[k] * out[..., 0] + hist)) / diag
    return GridFunction(m.grid, out)


@dataclass(frozen=True)
class VarianceDeconvolution:
    #: ``|I^(alpha+delta-1) w_2|^2``, clamped at zero
    q: GridFunction
    #: largest amount removed by the clamp
    clamped: float
    #: negative values beyond the noise floor were present
    negative: bool


def deconvolve_variance(
    v: GridFunction, g2: GridFunction, window: int | None = None, noise_floor: float = 1e-6
) -> VarianceDeconvolution:
    """Recover ``q >= 0`` from ``v(t) = int_0^t g2^2(tau) q(t - tau) dtau``."""
    if np.any(v.values < VARIANCE_FLOOR):
        raise DomainError("variance data must be non-negative")
    raw = deconvolve_volterra(v, GridFunction(g2.grid, g2.values**2), window).values
    clamped = float(max(0.0, -raw.min(initial=0.0)))
    scale = float(np.max(np.abs(raw), initial=0.0))
    negative = clamped > noise_floor * scale
    return VarianceDeconvolution(GridFunction(v.grid, np.maximum(raw, 0.0)), clamped, negative)


def invert_fractional_smoothing(h: GridFunction, alpha: float, delta: float) -> GridFunction:
    """Undo ``I^(alpha + delta - 1)``: a derivative for positive order, an integral for negative."""
    if not (0 <= delta < 0.5 and alpha + delta > 0.5):
        raise DomainError("alpha, delta violate 0 <= delta < 1/2, alpha + delta > 1/2")
    a = alpha + delta - 1.0
    if abs(a) < 1e-14:
        return GridFunction(h.grid, h.values.copy())
    if a > 0:
        return GridFunction(h.grid, fractional_derivative_array(h.values, a, h.grid.h))
    # data behave like t^a near 0; integrate t^a * (t^-a h) with the power kept exact
    t = h.grid.nodes
    scaled = np.empty_like(h.values)
    scaled[..., 1:] = h.values[..., 1:] * t[1:] ** (-a)
    scaled[..., 0] = 2 * scaled[..., 1] - scaled[..., 2]
    return GridFunction(h.grid, rl_integral_weighted(scaled, -a, h.grid.h, a))


# }}}


# {{{ mode fitting


def _design(eig: EigenSystem, alpha: float, points, t: np.ndarray, n_rec: int) -> np.ndarray:
    lam = eig.lambdas[:n_rec]
    decay = ml(alpha, 1.0, lam[:, None] * t[None, :] ** alpha).T
    blocks = [decay * eig.dphi_trace(np.arange(1, n_rec + 1), p)[None, :] for p in points]
    return np.concatenate(blocks)


def _time_weights(grid: TimeGrid) -> np.ndarray:
    w = np.full(grid.n_steps + 1, grid.h)
    w[0] = w[-1] = grid.h / 2
    return w


def _visible(eig: EigenSystem, points, n_rec: int) -> np.ndarray:
    # modes whose trace vanishes at every observed point are invisible
    tr = np.abs(eig.trace_matrix(points)[:, :n_rec]).max(axis=0)
    return tr > 1e-10 * tr.max()


# default Tikhonov weights relative to sigma_max^2: trace fits act on
# differentiated data, the data-domain fits do not and need far less damping
TRACE_REG = 1e-6
DATA_REG = 1e-10


class _LinearProblem:
    """Weighted linear least squares ``min ||A c - b||`` over the visible modes."""

    def __init__(
        self, a: np.ndarray, visible: np.ndarray, method: str, reg: float | None, rel_reg: float = TRACE_REG
    ):
        if method not in ("tikhonov", "svd"):
            raise DomainError(f"unknown method {method!r}")
        self.a = a
        self.visible = visible
        self.method = method
        self.u, self.sv, self.vt = np.linalg.svd(a[:, visible], full_matrices=False)
        if method == "tikhonov":
            self.reg = rel_reg * self.sv[0] ** 2 if reg is None else float(reg)
            self.kept = np.ones(self.sv.size, dtype=bool)
        else:
            self.reg = 1e-8 if reg is None else float(reg)
            self.kept = self.sv > self.reg * self.sv[0]

    def solve(self, b: np.ndarray) -> ModeFit:
        u, sv, vt, kept = self.u[:, self.kept], self.sv[self.kept], self.vt[self.kept], self.kept
        coeffs = np.zeros(self.visible.size)
        if self.method == "tikhonov":
            # normal equations (A^T A + reg I) c = A^T b through the SVD of A
            coeffs[self.visible] = vt.T @ ((sv / (sv**2 + self.reg)) * (u.T @ b))
        else:
            coeffs[self.visible] = vt.T @ ((u.T @ b) / sv)
        res = float(np.linalg.norm(self.a @ coeffs - b))
        nb = float(np.linalg.norm(b))
        return ModeFit(
            coeffs=coeffs,
            relative_residual=res / nb if nb > 0 else 0.0,
            residual=res,
            reg=self.reg,
            singular_values=self.sv,
            smallest_retained=float(self.sv[kept][-1]),
            excluded=tuple(int(i) + 1 for i in np.flatnonzero(~self.visible)),
        )


def _trace_problem(eig, alpha, points, grid, n_rec, reg, method, t_min):
    if n_rec < 1 or n_rec > eig.count:
        raise DomainError(f"n_rec must lie in 1..{eig.count}")
    t = grid.nodes
    keep = t >= t_min
    if keep.sum() < 4 * n_rec:
        raise DomainError(f"{keep.sum()} time samples cannot determine {n_rec} modes")
    sw = np.tile(np.sqrt(_time_weights(grid)[keep]), len(points))
    a = _design(eig, alpha, points, t[keep], n_rec) * sw[:, None]
    problem = _LinearProblem(a, _visible(eig, points, n_rec), method, reg)

    def rhs(traces) -> np.ndarray:
        return np.concatenate([traces[p].values[keep] for p in points]) * sw

    return problem, rhs


def recover_modes(
    traces,
    eig: EigenSystem,
    alpha: float,
    n_rec: int,
    reg: float | None = None,
    method: str = "tikhonov",
    t_min: float = 0.0,
) -> ModeFit:
    """Fit ``w(x0, t) = sum_n c_n dphi_n(x0) E_{alpha,1}(-lambda_n t^alpha)``.

    *traces* maps boundary points to :class:`GridFunction` data. Rows are
    weighted with the trapezoidal rule so the residual approximates the
    ``L^2`` norm in time; samples before *t_min* are ignored.

    ``method="tikhonov"`` solves the normal equations with ``reg * I``
    (default ``1e-6 * sigma_max^2``); ``method="svd"`` discards singular values
    below ``reg * sigma_max`` (default ``1e-8``).
    """
    points = list(traces)
    grid = traces[points[0]].grid
    if any(traces[p].grid != grid for p in points):
        raise DomainError("traces live on different grids")
    problem, rhs = _trace_problem(eig, alpha, points, grid, n_rec, reg, method, t_min)
    return problem.solve(rhs(traces))


# }}}


# {{{ data-domain fits


def mean_design(setup: InverseSetup, points, n_rec: int) -> np.ndarray:
    """``D[p, k, n]``: mean flux at ``points[p], t_k`` produced by ``f_1 = phi_n``."""
    grid = setup.g1.grid
    beta = setup.alpha + setup.delta
    n = grid.n_steps
    g1 = setup.g1.values
    cols = np.zeros((n_rec, n + 1))
    for i in range(n_rec):
        w0, w1 = deterministic_weights(setup.alpha, beta, setup.eig.lambdas[i], grid)
        cols[i, 1:] = signal.fftconvolve(w0, g1[1:])[:n] + signal.fftconvolve(w1, g1[:-1])[:n]
    traces = setup.eig.trace_matrix(points)[:, :n_rec]
    return np.einsum("pn,nk->pkn", traces, cols)


def variance_forms(setup: InverseSetup, points, n_rec: int) -> np.ndarray:
    """``Q[p, n, m, k]`` with ``Var(x_p, t_k) = c^T Q[p, :, :, k] c`` for ``f_2 = sum c_n phi_n``."""
    grid = setup.g2.grid
    alpha, beta = setup.alpha, setup.alpha + setup.delta
    lam = setup.eig.lambdas[:n_rec]
    n = grid.n_steps

    def products(s: np.ndarray) -> np.ndarray:
        r = ml(alpha, beta, lam[:, None] * s[None, :] ** alpha)
        return r[:, None, :] * r[None, :, :]

    m0, m1 = cell_moments(products, 2 * beta - 2, grid)
    g2 = setup.g2.values**2
    forms = np.zeros((n_rec, n_rec, n + 1))
    forms[..., 1:] = (
        signal.fftconvolve(m0, g2[None, None, 1:], axes=-1)[..., :n]
        + signal.fftconvolve(m1, g2[None, None, :-1], axes=-1)[..., :n]
    )
    traces = setup.eig.trace_matrix(points)[:, :n_rec]
    return np.einsum("pn,pm,nmk->pnmk", traces, traces, forms)


def fit_mean_data(
    m: MomentData, setup: InverseSetup, n_rec: int, reg: float | None = None, method: str = "tikhonov"
) -> ModeFit:
    """Least-squares fit of ``f_1`` coefficients to the mean flux itself.

    Tikhonov default: ``1e-10 * sigma_max^2``.
    """
    design = mean_design(setup, m.points, n_rec)
    sw = np.sqrt(_time_weights(m.grid))
    a = (design * sw[None, :, None]).reshape(-1, n_rec)
    b = (m.mean_flux * sw).ravel()
    return _LinearProblem(a, _visible(setup.eig, m.points, n_rec), method, reg, DATA_REG).solve(b)


@dataclass(frozen=True)
class VarianceFit:
    fit: ModeFit
    #: other local minima, as ``(coeffs, relative_residual)``, best first
    alternatives: tuple[tuple[np.ndarray, float], ...]
    starts: int


def fit_variance_data(
    m: MomentData,
    setup: InverseSetup,
    n_rec: int,
    reg: float | None = None,
    seeds=(),
    random_starts: int = 8,
) -> VarianceFit:
    """Nonlinear least-squares fit of ``f_2`` coefficients to the flux variance.

    The variance is a quadratic form in the coefficients, so the fit is
    multi-start: every entry of *seeds*, one scaled unit vector per mode and
    *random_starts* seeded random vectors. Solutions are compared up to the
    global sign. Tikhonov regularization defaults to ``1e-10 * sigma_max^2`` of
    the Jacobian at the best start.
    """
    forms = variance_forms(setup, m.points, n_rec)
    visible = _visible(setup.eig, m.points, n_rec)
    forms = forms[:, visible][:, :, visible]
    k = int(visible.sum())
    sw = np.sqrt(_time_weights(m.grid))
    data = m.var_flux
    nb = float(np.linalg.norm(data * sw))
    excluded = tuple(int(i) + 1 for i in np.flatnonzero(~visible))

    def embed(c: np.ndarray) -> np.ndarray:
        out = np.zeros(n_rec)
        out[visible] = c
        return out

    if nb == 0:
        zero = ModeFit(np.zeros(n_rec), 0.0, 0.0, 0.0 if reg is None else float(reg), np.zeros(0), 0.0, excluded)
        return VarianceFit(zero, (), 0)

    def model(c: np.ndarray) -> np.ndarray:
        return np.einsum("n,pnmk,m->pk", c, forms, c)

    def jac(c: np.ndarray) -> np.ndarray:
        return 2 * np.einsum("pnmk,m->pkn", forms, c)

    # unit starts scaled to match the final variance
    diag_end = np.einsum("pnnk->pnk", forms)[..., -1].max(axis=0)
    scale = np.sqrt(data[:, -1].max() / np.where(diag_end > 0, diag_end, np.inf))
    starts = [np.asarray(c, dtype=float)[visible] for c in seeds if np.any(c)]
    starts += [scale[i] * np.eye(k)[i] for i in range(k)]
    rng = np.random.default_rng(0)
    typical = float(np.linalg.norm(scale)) / math.sqrt(k)
    starts += [typical * rng.standard_normal(k) for _ in range(random_starts)]

    def misfit(c):
        return float(np.linalg.norm((model(c) - data) * sw))

    best_start = min(starts, key=misfit)
    js = (jac(best_start) * sw[None, :, None]).reshape(-1, k)
    sv = np.linalg.svd(js, compute_uv=False)
    lam_reg = DATA_REG * sv[0] ** 2 if reg is None else float(reg)
    root = math.sqrt(lam_reg)

    def residual(c):
        return np.concatenate([((model(c) - data) * sw).ravel(), root * c])

    def residual_jac(c):
        return np.concatenate([(jac(c) * sw[None, :, None]).reshape(-1, k), root * np.eye(k)])

    found: list[tuple[np.ndarray, float]] = []
    for c0 in starts:
        sol = optimize.least_squares(residual, c0, jac=residual_jac, method="trf", x_scale="jac")
        c = sol.x
        if np.any(c):
            c = c * math.copysign(1.0, c[np.argmax(np.abs(c))])
        rel = misfit(c) / nb
        if not any(
            np.linalg.norm(c - d) <= 1e-2 * max(np.linalg.norm(d), 1e-300) for d, _ in found
        ):
            found.append((c, rel))
    found.sort(key=lambda z: z[1])
    best, rel = found[0]
    js = (jac(best) * sw[None, :, None]).reshape(-1, k)
    sv = np.linalg.svd(js, compute_uv=False)
    fit = ModeFit(
        coeffs=embed(best),
        relative_residual=rel,
        residual=rel * nb,
        reg=lam_reg,
        singular_values=sv,
        smallest_retained=float(sv[-1]),
        excluded=excluded,
    )
    alternatives = tuple((embed(c), r) for c, r in found[1:])
    return VarianceFit(fit, alternatives, len(starts))


# }}}


# {{{ pipeline


def _noise_level(q: np.ndarray) -> float:
    """Robust standard deviation of the rough part of *q* (MAD of second differences)."""
    if q.size < 5:
        return 0.0
    d2 = np.diff(q, 2)
    # a second difference of white noise has variance 6 sigma^2
    return float(1.4826 * np.median(np.abs(d2 - np.median(d2))) / math.sqrt(6.0))


def _zero_threshold(q: np.ndarray, eps: float) -> float:
    return max(eps * float(q.max(initial=0.0)), 3.0 * _noise_level(q))


def _intervals(q: np.ndarray, threshold: float, min_len: int = 5) -> list[tuple[int, int]]:
    """Maximal runs where ``q > threshold``; the sign may flip only between runs.

    Runs shorter than *min_len* nodes are treated as noise.
    """
    if not q.max(initial=0.0) > 0:
        return []
    on = q > threshold
    edges = np.flatnonzero(np.diff(np.concatenate([[0], on.astype(int), [0]])))
    return [(lo, hi) for lo, hi in zip(edges[::2], edges[1::2]) if hi - lo >= min_len]


def _segments(runs, size: int) -> list[tuple[int, int]]:
    """Split ``[0, size)`` so that every run owns the gap after it (the first also the gap before)."""
    starts = [0] + [lo for lo, _ in runs[1:]]
    ends = starts[1:] + [size]
    return list(zip(starts, ends))


def _keep_heaviest(runs, q: np.ndarray, budget: int):
    """The *budget* runs carrying most of ``int q``, in time order."""
    if len(runs) <= budget:
        return runs
    mass = [float(q[lo:hi].sum()) for lo, hi in runs]
    top = sorted(np.argsort(mass)[::-1][:budget])
    return [runs[i] for i in top]


def _within(other: float, best: float, tol: float = 0.01) -> bool:
    """Whether a competing fit is as good as the best one up to a relative *tol*."""
    return other <= best * (1.0 + tol) + 1e-14


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (STFDEError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        raise StageError(name, exc) from exc


def _default_window(m: MomentData) -> int | None:
    return None if m.provenance.startswith("semi-analytic") else 7


def recover_sources(
    m: MomentData,
    setup: InverseSetup | Scenario,
    n_rec: int,
    reg: float | None = None,
    method: str = "tikhonov",
    window: int | None | str = "auto",
    t_min: float | None = None,
    max_sign_patterns: int = 256,
    zero_eps: float = 1e-6,
    fit: str = "data",
) -> RecoveryResult:
    """Recover the mode coefficients of ``f_1`` and ``f_2`` from flux moments.

    Mean route: deconvolve with ``g_1``, undo the fractional smoothing, fit.
    When ``alpha + delta < 1`` the data are first integrated with
    ``I^(1 - alpha - delta)``, which commutes with the convolution, so the
    deconvolution directly yields ``w_1``. Variance route: deconvolve with
    ``g_2^2``, take square roots, choose signs on every interval where the
    result is nonzero by least-squares residual, undo the smoothing, fit.

    With ``fit="data"`` (default) these estimates seed a final least-squares
    fit against the moments themselves (:func:`fit_mean_data`,
    :func:`fit_variance_data`), which avoids differentiating noisy data.
    ``fit="pointwise"`` returns the deconvolution estimates. ``window="auto"``
    smooths everything except semi-analytic data over 7 nodes.
    """
    if fit not in ("data", "pointwise"):
        raise DomainError(f"unknown fit {fit!r}")
    if isinstance(setup, Scenario):
        setup = InverseSetup.from_scenario(setup)
    grid = m.grid
    if setup.g1.grid != grid or setup.g2.grid != grid:
        raise StageError("setup", DomainError("g1, g2 must be sampled on the data grid"))
    for name, g in (("g1", setup.g1), ("g2", setup.g2)):
        if abs(g.values[0]) < 1e-8:
            raise StageError("setup", DomainError(f"{name}(0) must be nonzero"))
    if window == "auto":
        window = _default_window(m)

    alpha, delta = setup.alpha, setup.delta
    a = setup.smoothing
    t_min = 10 * grid.h if t_min is None else t_min
    points = m.points
    diag: dict[str, object] = {
        "provenance": m.provenance,
        "fit": fit,
        "window": window,
        "condition_g1": volterra_condition(setup.g1),
        "condition_g2sq": volterra_condition(GridFunction(grid, setup.g2.values**2)),
    }
    problem, rhs = _stage(
        "fit:setup", _trace_problem, setup.eig, alpha, points, grid, n_rec, reg, method, t_min
    )

    # mean route
    mean = m.mean_flux
    if a < 0:
        mean = _stage("mean:integrate", rl_integral_array, mean, -a, grid.h)
    h1 = _stage("mean:deconvolve", deconvolve_volterra, GridFunction(grid, mean), setup.g1, window)
    w1 = h1 if a < 0 else _stage("mean:invert", invert_fractional_smoothing, h1, alpha, delta)
    fit1 = _stage(
        "mean:fit", problem.solve, rhs({p: GridFunction(grid, w1.values[i]) for i, p in enumerate(points)})
    )

    # variance route
    var_dec = [
        _stage("variance:deconvolve", deconvolve_variance, GridFunction(grid, m.var_flux[i]), setup.g2, window)
        for i in range(len(points))
    ]
    diag["variance_clamp"] = [d.clamped for d in var_dec]
    diag["variance_negative"] = [d.negative for d in var_dec]
    thresholds = [_zero_threshold(d.q.values, zero_eps) for d in var_dec]
    diag["zero_threshold"] = thresholds
    # below the threshold q is indistinguishable from zero; its square root would be pure bias
    magnitude = [np.sqrt(np.where(d.q.values > th, d.q.values, 0.0)) for d, th in zip(var_dec, thresholds)]
    runs = [_intervals(d.q.values, th) for d, th in zip(var_dec, thresholds)]
    diag["sign_intervals"] = [len(r) for r in runs]
    budget = max(1, int(math.log2(max_sign_patterns)) + 1)
    runs = [_keep_heaviest(r, d.q.values, budget) for r, d in zip(runs, var_dec)]
    while sum(len(r) for r in runs) > budget:
        # share the budget between points by dropping the lightest run overall
        i = max(range(len(runs)), key=lambda j: len(runs[j]))
        runs[i] = _keep_heaviest(runs[i], var_dec[i].q.values, len(runs[i]) - 1)
    diag["sign_intervals_searched"] = [len(r) for r in runs]

    # the inversion is linear: invert each signed segment once, combine per pattern
    basis = []
    for i in range(len(points)):
        rows = []
        for lo, hi in _segments(runs[i], grid.n_steps + 1) if runs[i] else []:
            piece = np.zeros(grid.n_steps + 1)
            piece[lo:hi] = magnitude[i][lo:hi]
            rows.append(_stage("variance:invert", invert_fractional_smoothing, GridFunction(grid, piece), alpha, delta).values)
        basis.append(rows)

    def fit_signs(signs: tuple[float, ...]) -> ModeFit:
        data = {}
        offset = 0
        for i, p in enumerate(points):
            k = len(basis[i])
            w2 = sum((s * b for s, b in zip(signs[offset : offset + k], basis[i])), np.zeros(grid.n_steps + 1))
            offset += k
            data[p] = GridFunction(grid, w2)
        return problem.solve(rhs(data))

    n_runs = sum(len(r) for r in runs)
    if n_runs == 0:
        fit2 = _stage("variance:fit", fit_signs, ())
        note = "no-signal"
    else:
        candidates = sorted(
            (
                (_stage("variance:fit", fit_signs, (1.0,) + rest), (1.0,) + rest)
                for rest in itertools.product((1.0, -1.0), repeat=n_runs - 1)
            ),
            key=lambda c: c[0].relative_residual,
        )
        fit2, signs = candidates[0]
        ambiguous = len(candidates) > 1 and _within(candidates[1][0].relative_residual, fit2.relative_residual)
        note = "ambiguous" if ambiguous else "unique"
        diag["sign_pattern"] = list(signs)
        if len(candidates) > 1:
            diag["runner_up_residual"] = candidates[1][0].relative_residual

    f2 = fit2.coeffs.copy()
    if np.any(f2):
        f2 *= math.copysign(1.0, f2[np.argmax(np.abs(f2))])

    if fit == "data":
        diag["pointwise_f1"] = fit1.coeffs
        diag["pointwise_f2"] = f2
        diag["pointwise_residuals"] = {"mean": fit1.relative_residual, "variance": fit2.relative_residual}
        fit1 = _stage("mean:data-fit", fit_mean_data, m, setup, n_rec, reg, method)
        vfit = _stage("variance:data-fit", fit_variance_data, m, setup, n_rec, reg, seeds=(f2,))
        fit2 = vfit.fit
        f2 = fit2.coeffs
        diag["variance_starts"] = vfit.starts
        if vfit.starts == 0:
            note = "no-signal"
        else:
            close = [r for _, r in vfit.alternatives if _within(r, fit2.relative_residual)]
            note = "ambiguous" if close else "unique"
            if vfit.alternatives:
                diag["runner_up_residual"] = vfit.alternatives[0][1]
                diag["runner_up_f2"] = vfit.alternatives[0][0]

    diag["excluded_modes"] = sorted(set(fit1.excluded) | set(fit2.excluded))
    diag["smallest_singular_value"] = min(fit1.smallest_retained, fit2.smallest_retained)
    return RecoveryResult(
        f1_coeffs=fit1.coeffs,
        f2_coeffs=f2,
        f2_sign_note=note,
        residuals={"mean": fit1.relative_residual, "variance": fit2.relative_residual},
        reg={"mean": fit1.reg, "variance": fit2.reg},
        diagnostics=diag,
    )


# }}}
