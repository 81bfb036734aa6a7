r"""Forward problem in mode space.

With the eigensystem :math:`\{\lambda_n, \phi_n\}` of :math:`\mathcal A`, the
solution is :math:`u(x, t) = \sum_n v_n(t) \phi_n(x)` where, for zero source,

.. math::

    v_n(t) = \langle u_0, \phi_n \rangle E_{\alpha,1}(-\lambda_n t^\alpha)
        + \langle u_1, \phi_n \rangle\, t\, E_{\alpha,2}(-\lambda_n t^\alpha),

(the second term only for :math:`\alpha > 1`) and, for zero initial data and
source :math:`F = I^\delta(F_1 + F_2 \dot B)`,

.. math::

    v_n(t) = \int_0^t K_n(t - \tau) F_{1,n}(\tau)\, d\tau
        + \int_0^t K_n(t - \tau) F_{2,n}(\tau)\, dB(\tau),
    \qquad
    K_n(s) = s^{\alpha+\delta-1} E_{\alpha,\alpha+\delta}(-\lambda_n s^\alpha).

The deterministic integral integrates the kernel exactly against the
piecewise linear interpolant of :math:`F_{1,n}`. The stochastic one uses the
exact :math:`L^2` average of the kernel on each subinterval, so every
increment carries the right variance.
"""

from __future__ import annotations

import hashlib
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, signal

from stfde.brownian import PATH_BLOCK, BrownianIncrements
from stfde.errors import DomainError, GridMismatchError, RegimeError
from stfde.fracops import (
    GridFunction,
    TimeGrid,
    cell_moments,
    rl_integral_array,
    rl_integral_ito,
    rl_matrix,
)
from stfde.mlf import ml
from stfde.spectral import EigenSystem, fractional_norm_coeffs

DUMP_MAGIC = b"STFDEENS"
DUMP_VERSION = 1
_DUMP_HEADER = struct.Struct("<8sIQQQ")


# {{{ scenario


def _coeffs(values, count: int, name: str) -> np.ndarray:
    if values is None:
        return np.zeros(count)
    arr = np.asarray(values, dtype=float)
    if arr.shape != (count,):
        raise DomainError(f"{name} must have length {count}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} has non-finite entries")
    return arr


@dataclass(frozen=True)
class Scenario:
    """Full description of one forward problem.

    The source is :math:`I^\\delta(F_1 + F_2 \\dot B)` with mode tables
    ``F_i[n - 1, k]``. In the separable case ``F_i = f_i(x) g_i(t)`` the
    tables are ``outer(f_i_coeffs, g_i.values)``; general tables can be passed
    through ``f1_table`` and ``f2_table`` instead.
    """

    alpha: float
    delta: float
    eig: EigenSystem
    time_grid: TimeGrid
    u0_coeffs: np.ndarray | None = None
    u1_coeffs: np.ndarray | None = None
    f1_coeffs: np.ndarray | None = None
    f2_coeffs: np.ndarray | None = None
    g1: GridFunction | None = None
    g2: GridFunction | None = None
    f1_table: np.ndarray | None = None
    f2_table: np.ndarray | None = None
    n_paths: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        a, d = self.alpha, self.delta
        if not (0 < a < 2) or a == 1:
            raise DomainError(f"alpha must lie in (0, 1) or (1, 2): {a}")
        if not (0 <= d < 0.5 and a + d > 0.5):
            raise DomainError(f"delta violates 0 <= delta < 1/2, alpha + delta > 1/2: {d}")
        if self.n_paths < 1:
            raise DomainError("n_paths must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise DomainError("seed must be an unsigned 64-bit integer")

        count = self.eig.count
        for name in ("u0_coeffs", "u1_coeffs", "f1_coeffs", "f2_coeffs"):
            object.__setattr__(self, name, _coeffs(getattr(self, name), count, name))
        for name in ("g1", "g2"):
            g = getattr(self, name)
            if g is not None and g.grid != self.time_grid:
                raise GridMismatchError(f"{name} is not sampled on the scenario grid")
        shape = (count, self.time_grid.n_steps + 1)
        for name in ("f1_table", "f2_table"):
            tab = getattr(self, name)
            if tab is not None:
                tab = np.asarray(tab, dtype=float)
                if tab.shape != shape:
                    raise DomainError(f"{name} must have shape {shape}")
                object.__setattr__(self, name, tab)

    @property
    def T(self) -> float:
        return self.time_grid.t_max

    @property
    def beta(self) -> float:
        """Kernel index ``alpha + delta``."""
        return self.alpha + self.delta

    @property
    def regime(self) -> str:
        return "subdiffusion" if self.alpha < 1 else "wave"

    def source_table(self, which: int) -> np.ndarray:
        """Mode table ``F_which`` of shape ``(N, n_steps + 1)``."""
        tab = self.f1_table if which == 1 else self.f2_table
        if tab is not None:
            return tab
        coeffs = self.f1_coeffs if which == 1 else self.f2_coeffs
        g = self.g1 if which == 1 else self.g2
        if g is None:
            return np.zeros((self.eig.count, self.time_grid.n_steps + 1))
        return np.outer(coeffs, g.values)

    @property
    def has_initial_data(self) -> bool:
        return bool(np.any(self.u0_coeffs) or (self.alpha > 1 and np.any(self.u1_coeffs)))

    @property
    def has_deterministic_source(self) -> bool:
        return bool(np.any(self.source_table(1)))

    @property
    def stochastic(self) -> bool:
        return bool(np.any(self.source_table(2)))

    def digest(self) -> str:
        """Hash of everything that determines the ensemble."""
        h = hashlib.sha256()
        h.update(repr((self.alpha, self.delta, self.time_grid, self.n_paths, self.seed)).encode())
        h.update(np.ascontiguousarray(self.eig.lambdas).tobytes())
        h.update(np.ascontiguousarray(self.eig.traces).tobytes())
        for arr in (self.u0_coeffs, self.u1_coeffs, self.source_table(1), self.source_table(2)):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class FieldEnsemble:
    """Mode trajectories ``values[path, n - 1, k] = v_n(t_k)`` for a set of paths."""

    grid: TimeGrid
    values: np.ndarray
    lambdas: np.ndarray
    scenario_digest: str
    seed: int | None = None
    path_ids: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.values.ndim != 3 or self.values.shape[-1] != self.grid.n_steps + 1:
            raise DomainError(f"bad ensemble shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DomainError("ensemble has non-finite entries")

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def n_modes(self) -> int:
        return self.values.shape[1]


# }}}


# {{{ closed-form initial-value solutions


def initial_modes(alpha: float, lambdas, u0, u1, t) -> np.ndarray:
    """``v_n(t)`` for zero source, shape ``(N, len(t))``."""
    lambdas = np.asarray(lambdas, dtype=float)
    t = np.asarray(t, dtype=float)
    arg = lambdas[:, None] * t[None, :] ** alpha
    out = np.asarray(u0, dtype=float)[:, None] * ml(alpha, 1.0, arg)
    if alpha > 1:
        out = out + np.asarray(u1, dtype=float)[:, None] * t * ml(alpha, 2.0, arg)
    return out


def _deterministic_ensemble(s: Scenario, values: np.ndarray) -> FieldEnsemble:
    return FieldEnsemble(
        grid=s.time_grid,
        values=values[None],
        lambdas=s.eig.lambdas,
        scenario_digest=s.digest(),
    )


def _check_no_source(s: Scenario) -> None:
    if s.has_deterministic_source or s.stochastic:
        raise RegimeError("initial-value solver called with a nonzero source")


def solve_initial_subdiffusion(s: Scenario) -> FieldEnsemble:
    """Source-free solution for ``0 < alpha < 1`` (a single deterministic path)."""
    if not s.alpha < 1:
        raise RegimeError(f"subdiffusion needs alpha < 1, got {s.alpha}")
    _check_no_source(s)
    v = initial_modes(s.alpha, s.eig.lambdas, s.u0_coeffs, None, s.time_grid.nodes)
    return _deterministic_ensemble(s, v)


def solve_initial_wave(s: Scenario) -> FieldEnsemble:
    """Source-free solution for ``1 < alpha < 2`` (a single deterministic path)."""
    if not s.alpha > 1:
        raise RegimeError(f"diffusion-wave needs alpha > 1, got {s.alpha}")
    _check_no_source(s)
    v = initial_modes(s.alpha, s.eig.lambdas, s.u0_coeffs, s.u1_coeffs, s.time_grid.nodes)
    return _deterministic_ensemble(s, v)


# }}}


# {{{ source kernels


def kernel(alpha: float, beta: float, lam: float, s) -> np.ndarray:
    """``K(s) = s^(beta - 1) E_{alpha,beta}(-lam s^alpha)`` for ``s > 0``."""
    s = np.asarray(s, dtype=float)
    return s ** (beta - 1.0) * ml(alpha, beta, lam * s**alpha)


def deterministic_weights(alpha: float, beta: float, lam: float, grid: TimeGrid):
    """Product-trapezoid weights ``(w0, w1)`` for ``int_0^t K(s) g(t - s) ds``.

    With ``g`` linear on every subinterval,
    ``r_k = sum_i w0[i] g[k - i] + w1[i] g[k - i - 1]``, ``i = 0..k-1``. The
    kernel moments come from the antiderivatives
    ``P0(s) = s^beta E_{alpha,beta+1}(-lam s^alpha)`` and
    ``Q(s) = s P0(s) - s^(beta+1) E_{alpha,beta+2}(-lam s^alpha)``.
    """
    h = grid.h
    s = grid.nodes
    arg = lam * s**alpha
    p0 = s**beta * ml(alpha, beta + 1.0, arg)
    p1 = s ** (beta + 1.0) * ml(alpha, beta + 2.0, arg)
    q = s * p0 - p1
    i = np.arange(grid.n_steps)
    a = np.diff(p0)
    b = np.diff(q)
    w0 = ((i + 1) * h * a - b) / h
    w1 = (b - i * h * a) / h
    return w0, w1


def stochastic_weights(alpha: float, beta: float, lam: float, grid: TimeGrid) -> np.ndarray:
    """Kernel weights ``Kbar[m - 1]`` on ``[(m - 1) h, m h]``, ``m = 1..n``.

    ``|Kbar|`` is the exact ``L^2`` average of the kernel over the subinterval,
    so the discrete sum reproduces the Ito isometry cell by cell; the sign is
    that of the kernel's exact subinterval mean.
    """
    h = grid.h
    m0, m1 = cell_moments(lambda s: ml(alpha, beta, lam * s**alpha) ** 2, 2 * beta - 2, grid)
    s = grid.nodes
    mean = np.diff(s**beta * ml(alpha, beta + 1.0, lam * s**alpha))
    return np.where(mean < 0, -1.0, 1.0) * np.sqrt(np.maximum(m0 + m1, 0.0) / h)


def _convolve_rows(kernels: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Causal convolution of ``y[..., n, :]`` with ``kernels[n, :]``."""
    length = y.shape[-1]
    return signal.fftconvolve(kernels, y, axes=-1)[..., :length]


def deterministic_source_modes(s: Scenario) -> np.ndarray:
    """Deterministic source response ``(N, n_steps + 1)``; zero at ``t = 0``."""
    grid = s.time_grid
    table = s.source_table(1)
    out = np.zeros(table.shape)
    active = np.flatnonzero(np.any(table != 0, axis=1))
    if active.size == 0:
        return out
    w = [deterministic_weights(s.alpha, s.beta, s.eig.lambdas[i], grid) for i in active]
    w0 = np.stack([x[0] for x in w])
    w1 = np.stack([x[1] for x in w])
    tab = table[active]
    out[active, 1:] = _convolve_rows(w0, tab[:, 1:]) + _convolve_rows(w1, tab[:, :-1])
    return out


def stochastic_kernels(s: Scenario) -> np.ndarray:
    """``Kbar`` for every mode, shape ``(N, n_steps)``."""
    return np.stack(
        [stochastic_weights(s.alpha, s.beta, lam, s.time_grid) for lam in s.eig.lambdas]
    )


def stochastic_modes(kbar: np.ndarray, table: np.ndarray, dB: np.ndarray) -> np.ndarray:
    """``sum_j Kbar_n[k - 1 - j] F_n(t_j) dB_j`` for a batch ``dB`` of shape ``(P, n)``."""
    y = table[None, :, :-1] * dB[:, None, :]
    out = np.zeros(y.shape[:-1] + (y.shape[-1] + 1,))
    out[..., 1:] = _convolve_rows(kbar[None], y)
    return out


# }}}


# {{{ path evaluation


@dataclass(frozen=True)
class _Prepared:
    base: np.ndarray
    kbar: np.ndarray | None
    table2: np.ndarray | None


def _prepare(s: Scenario) -> _Prepared:
    base = deterministic_source_modes(s)
    if s.has_initial_data:
        base = base + initial_modes(
            s.alpha, s.eig.lambdas, s.u0_coeffs, s.u1_coeffs, s.time_grid.nodes
        )
    if not s.stochastic:
        return _Prepared(base, None, None)
    return _Prepared(base, stochastic_kernels(s), s.source_table(2))


def _paths(s: Scenario, prep: _Prepared, ids: np.ndarray) -> np.ndarray:
    if prep.kbar is None:
        return np.broadcast_to(prep.base, (ids.size,) + prep.base.shape).copy()
    inc = BrownianIncrements.generate(s.time_grid, s.seed, ids)
    return prep.base + stochastic_modes(prep.kbar, prep.table2, inc.dB)


def solve_source(s: Scenario, path_id) -> np.ndarray:
    """Mode trajectories of the source problem for one path (or an array of paths).

    Initial data must vanish. Returns shape ``(N, n_steps + 1)`` for a scalar
    ``path_id`` and ``(P, N, n_steps + 1)`` otherwise.
    """
    if s.has_initial_data:
        raise RegimeError("solve_source expects zero initial data")
    prep = _prepare(s)
    ids = np.atleast_1d(np.asarray(path_id, dtype=np.int64))
    out = _paths(s, prep, ids)
    return out[0] if np.ndim(path_id) == 0 else out


def _blocks(n_paths: int):
    return [
        np.arange(b, min(b + PATH_BLOCK, n_paths), dtype=np.int64)
        for b in range(0, n_paths, PATH_BLOCK)
    ]


def _map_blocks(fn, blocks, workers: int | None):
    workers = workers or os.cpu_count() or 1
    if workers == 1 or len(blocks) == 1:
        return map(fn, blocks)
    pool = ThreadPoolExecutor(max_workers=workers)
    try:
        return list(pool.map(fn, blocks))
    finally:
        pool.shutdown()


def simulate(s: Scenario, workers: int | None = None) -> FieldEnsemble:
    """All ``s.n_paths`` paths (one path if the scenario is deterministic).

    This materializes ``M x N x (n_steps + 1)`` values; use
    :func:`stream_statistics` for large ensembles.
    """
    prep = _prepare(s)
    if not s.stochastic:
        return _deterministic_ensemble(s, prep.base)
    parts = list(_map_blocks(lambda ids: _paths(s, prep, ids), _blocks(s.n_paths), workers))
    return FieldEnsemble(
        grid=s.time_grid,
        values=np.concatenate(parts),
        lambdas=s.eig.lambdas,
        scenario_digest=s.digest(),
        seed=s.seed,
        path_ids=np.arange(s.n_paths, dtype=np.int64),
    )


# }}}


# {{{ reference time stepping


def reference_mesh(grid: TimeGrid, alpha: float, lam_max: float, ratio: float = 0.05):
    """Uniform nodes plus a geometric cluster toward ``t = 0``.

    Near the origin the spacing is at most ``ratio * t``, down to the time
    where ``lam_max t^alpha = 1e-6``; beyond ``h / ratio`` the mesh is the
    uniform grid. Returns the mesh and the positions of the uniform nodes.
    """
    h = grid.h
    t_min = (1e-6 / lam_max) ** (1.0 / alpha)
    t_c = min(h / ratio, grid.t_max)
    count = int(math.ceil(math.log(t_c / t_min) / math.log1p(ratio)))
    geo = t_c * np.exp(-math.log1p(ratio) * np.arange(count, -1, -1))
    uniform = grid.nodes
    # geometric points within a tiny distance of a uniform node are dropped
    gap = np.abs(geo - np.round(geo / h) * h)
    mesh = np.union1d(geo[gap > 1e-3 * ratio * geo], uniform)
    return mesh, np.searchsorted(mesh, uniform)


def solve_mode_equation(lambdas, rhs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Solve ``v + lambda W v = rhs`` for every row, ``W`` lower triangular."""
    eye = np.eye(weights.shape[0])
    return np.stack(
        [
            linalg.solve_triangular(eye + lam * weights, r, lower=True)
            for lam, r in zip(lambdas, rhs)
        ]
    )


def reference_timestep(s: Scenario) -> np.ndarray:
    """Deterministic mode trajectories from the integrated mode equation.

    Solves ``v + lambda I^alpha v = u0 + t u1 + I^(alpha + delta) F_1`` with
    an implicit product-trapezoid rule on :func:`reference_mesh`; does not use
    the Mittag-Leffler function. Requires ``F_2 = 0``. Returns values on the
    uniform nodes.
    """
    if s.stochastic:
        raise RegimeError("reference_timestep needs a deterministic scenario")
    grid = s.time_grid
    mesh, at = reference_mesh(grid, s.alpha, float(np.max(s.eig.lambdas)))
    rhs = np.repeat(s.u0_coeffs[:, None], mesh.size, axis=1)
    if s.alpha > 1:
        rhs = rhs + s.u1_coeffs[:, None] * mesh
    if s.has_deterministic_source:
        table = s.source_table(1)
        fine = np.stack([np.interp(mesh, grid.nodes, row) for row in table])
        rhs = rhs + fine @ rl_matrix(mesh, s.beta).T
    v = solve_mode_equation(s.eig.lambdas, rhs, rl_matrix(mesh, s.alpha))
    return v[:, at]


# }}}


# {{{ statistics


@dataclass
class _Moments:
    """Streaming mean and sum of squared deviations (Chan et al. update)."""

    count: int = 0
    mean: np.ndarray | float = 0.0
    m2: np.ndarray | float = 0.0

    @classmethod
    def of(cls, x: np.ndarray) -> _Moments:
        mean = x.mean(axis=0)
        return cls(x.shape[0], mean, ((x - mean) ** 2).sum(axis=0))

    def merge(self, other: _Moments) -> _Moments:
        if self.count == 0:
            return other
        n = self.count + other.count
        d = other.mean - self.mean
        mean = self.mean + d * (other.count / n)
        m2 = self.m2 + other.m2 + d**2 * (self.count * other.count / n)
        return _Moments(n, mean, m2)


@dataclass(frozen=True)
class EnsembleStats:
    """Sample statistics of mode trajectories, arrays of shape ``(N, n_steps + 1)``."""

    grid: TimeGrid
    mean: np.ndarray
    variance: np.ndarray
    second_moment: np.ndarray
    n_paths: int
    lambdas: np.ndarray

    @property
    def sup_l2(self) -> float:
        """:math:`\\sup_t \\|u(t)\\|_{L^2(D \\times \\Omega)}`."""
        return float(np.sqrt(np.max(self.second_moment.sum(axis=0))))

    @property
    def l2(self) -> float:
        """:math:`\\|u\\|_{L^2(D \\times (0, T) \\times \\Omega)}` (trapezoid in time)."""
        return float(np.sqrt(np.trapezoid(self.second_moment.sum(axis=0), dx=self.grid.h)))

    def l2_h(self, gamma: float) -> float:
        """:math:`\\|u\\|_{L^2((0,T) \\times \\Omega; D(\\mathcal A^{\\gamma}))}`,
        equivalent to the :math:`H^{2\\gamma}(D)` norm."""
        rms = np.sqrt(self.second_moment.T)
        sq = fractional_norm_coeffs(rms, self.lambdas, gamma) ** 2
        return float(np.sqrt(np.trapezoid(sq, dx=self.grid.h)))

    def norms(self, gamma: float = 1.0) -> dict[str, float]:
        return {
            "sup_l2": self.sup_l2,
            "l2": self.l2,
            f"l2_h{2 * gamma:g}": self.l2_h(gamma),
        }


def _finish(acc: _Moments, grid: TimeGrid, lambdas: np.ndarray) -> EnsembleStats:
    m = acc.count
    mean = np.asarray(acc.mean, dtype=float)
    m2 = np.asarray(acc.m2, dtype=float)
    variance = m2 / (m - 1) if m > 1 else np.zeros_like(mean)
    return EnsembleStats(
        grid=grid,
        mean=mean,
        variance=variance,
        second_moment=mean**2 + m2 / m,
        n_paths=m,
        lambdas=lambdas,
    )


def ensemble_stats(e: FieldEnsemble) -> EnsembleStats:
    """Sample mean, unbiased variance and norm functionals of an ensemble.

    A single deterministic path is accepted (variance zero); a stochastic
    ensemble needs at least two paths.
    """
    if e.n_paths < 2 and e.seed is not None:
        raise DomainError("variance needs at least 2 paths")
    acc = _Moments()
    for start in range(0, e.n_paths, PATH_BLOCK):
        acc = acc.merge(_Moments.of(e.values[start : start + PATH_BLOCK]))
    return _finish(acc, e.grid, e.lambdas)


def stream_statistics(
    s: Scenario, observable=None, workers: int | None = None
) -> EnsembleStats:
    """Statistics over ``s.n_paths`` paths without storing them.

    *observable* maps a block of mode trajectories ``(P, N, n + 1)`` to any
    array ``(P, ...)``; the default keeps the trajectories. Blocks are reduced
    in a fixed order, so the result does not depend on *workers*.
    """
    prep = _prepare(s)
    obs = observable or (lambda v: v)
    if not s.stochastic:
        ids = np.zeros(1, dtype=np.int64)
        acc = _Moments.of(obs(_paths(s, prep, ids)))
        acc = _Moments(s.n_paths, acc.mean, acc.m2)
    else:
        if s.n_paths < 2:
            raise DomainError("variance needs at least 2 paths")
        parts = _map_blocks(
            lambda ids: _Moments.of(obs(_paths(s, prep, ids))), _blocks(s.n_paths), workers
        )
        acc = _Moments()
        for part in parts:
            acc = acc.merge(part)
    return _finish(acc, s.time_grid, s.eig.lambdas)


# }}}


# {{{ weak residual


@dataclass(frozen=True)
class ResidualReport:
    """``L^2(0, T)`` norms of the integrated mode-equation residual."""

    #: shape ``(M, N)``
    per_path: np.ndarray
    #: ``L^2(0, T)`` norms of the trajectories themselves, shape ``(M, N)``
    solution_norms: np.ndarray

    @property
    def per_mode(self) -> np.ndarray:
        return self.per_path.mean(axis=0)

    @property
    def mean(self) -> float:
        return float(self.per_path.sum(axis=1).mean())

    @property
    def relative(self) -> np.ndarray:
        """Worst-case ratio ``|r_n| / |v_n|`` per mode (zero where ``v_n = 0``)."""
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(self.solution_norms > 0, self.per_path / self.solution_norms, 0.0)
        return ratio.max(axis=0)


def _l2_time(values: np.ndarray, h: float) -> np.ndarray:
    return np.sqrt(np.trapezoid(values**2, dx=h, axis=-1))


def singular_exponents(s: Scenario) -> list[float]:
    """Non-smooth powers ``t^e``, ``e < 1``, present in the mode trajectories.

    Initial data contribute ``t^(k alpha)``, sources ``t^(alpha + delta + k alpha)``.
    """
    out = []
    starts = [0.0] if s.has_initial_data else []
    if s.has_deterministic_source or s.stochastic:
        starts.append(s.beta)
    for e0 in starts:
        k = 0 if e0 else 1
        while e0 + k * s.alpha < 1:
            out.append(e0 + k * s.alpha)
            k += 1
    return out


def weak_residual(e: FieldEnsemble, s: Scenario) -> ResidualReport:
    """Residual ``v_n + lambda_n I^alpha v_n - [u0_n + t u1_n + (I^alpha F)_n]``.

    ``I^alpha v_n`` uses the product-trapezoid rule corrected for
    :func:`singular_exponents`; on a uniform grid this is accurate for modes
    with ``lambda_n h^alpha`` well below one. The stochastic part of
    ``I^alpha F = I^(alpha + delta) (F_1 + F_2 dB)`` is an Ito integral that
    must be driven by the increments that produced the ensemble; they are
    regenerated from its seed lineage.
    """
    if e.scenario_digest != s.digest():
        raise DomainError("ensemble was not produced by this scenario")
    grid = s.time_grid
    h, t = grid.h, grid.nodes
    rhs = np.repeat(s.u0_coeffs[:, None], t.size, axis=1)
    if s.alpha > 1:
        rhs = rhs + s.u1_coeffs[:, None] * t
    if s.has_deterministic_source:
        rhs = rhs + rl_integral_array(s.source_table(1), s.beta, h)
    rhs = np.broadcast_to(rhs, e.values.shape)

    if s.stochastic:
        if e.seed is None or e.path_ids is None:
            raise DomainError("stochastic residual needs the increments of the ensemble")
        inc = BrownianIncrements.generate(grid, e.seed, e.path_ids)
        table = GridFunction(grid, s.source_table(2)[None])
        ito = rl_integral_ito(table, s.beta, _Broadcast(inc))
        rhs = rhs + ito.values

    lam = e.lambdas[None, :, None]
    iv = rl_integral_array(e.values, s.alpha, h, singular=singular_exponents(s))
    r = e.values + lam * iv - rhs
    return ResidualReport(per_path=_l2_time(r, h), solution_norms=_l2_time(e.values, h))


@dataclass(frozen=True)
class _Broadcast:
    """Increments reshaped to ``(M, 1, n)`` so that they broadcast over modes."""

    inc: BrownianIncrements
    grid: TimeGrid = field(init=False)
    dB: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "grid", self.inc.grid)
        object.__setattr__(self, "dB", self.inc.dB[:, None, :])


# }}}


# {{{ output


def format_float(x: float) -> str:
    return f"{x:.17g}"


def summary_rows(stats: EnsembleStats):
    t = stats.grid.nodes
    for n in range(stats.mean.shape[0]):
        for k in range(t.size):
            yield (n + 1, t[k], stats.mean[n, k], stats.variance[n, k], stats.n_paths)


def write_summary_csv(path, stats: EnsembleStats) -> None:
    """CSV with columns ``mode,t,mean,variance,M`` (floats with 17 digits)."""
    with open(path, "w", newline="\n") as f:
        f.write("mode,t,mean,variance,M\n")
        for n, t, m, v, count in summary_rows(stats):
            f.write(f"{n},{format_float(t)},{format_float(m)},{format_float(v)},{count}\n")


def write_dump(path, e: FieldEnsemble) -> None:
    """Binary dump of all paths.

    Layout (little-endian): 8-byte magic ``STFDEENS``, ``uint32`` version,
    ``uint64`` M, N, n_steps, then ``n_steps + 1`` float64 time nodes, then
    ``M * N * (n_steps + 1)`` float64 values in path, mode, time order.
    """
    m, n, k = e.values.shape
    with open(path, "wb") as f:
        f.write(_DUMP_HEADER.pack(DUMP_MAGIC, DUMP_VERSION, m, n, k - 1))
        f.write(e.grid.nodes.astype("<f8").tobytes())
        f.write(np.ascontiguousarray(e.values, dtype="<f8").tobytes())


def read_dump(path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(t, values)`` from a file written by :func:`write_dump`."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _DUMP_HEADER.size:
        raise DomainError("truncated ensemble dump")
    magic, version, m, n, steps = _DUMP_HEADER.unpack_from(raw)
    if magic != DUMP_MAGIC or version != DUMP_VERSION:
        raise DomainError("not an ensemble dump (bad magic or version)")
    expected = _DUMP_HEADER.size + 8 * (steps + 1) * (1 + m * n)
    if len(raw) != expected:
        raise DomainError(f"dump size {len(raw)} does not match header ({expected})")
    data = np.frombuffer(raw, dtype="<f8", offset=_DUMP_HEADER.size)
    t = data[: steps + 1].astype(float)
    values = data[steps + 1 :].reshape(m, n, steps + 1).astype(float)
    return t, values


# }}}
