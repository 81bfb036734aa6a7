r"""Riemann-Liouville and Caputo operators on uniform time grids.

The Riemann-Liouville integral of order :math:`a > 0`,

.. math::

    I^a f(t) = \frac{1}{\Gamma(a)} \int_0^t (t - \tau)^{a - 1} f(\tau)\, d\tau,

is discretized by product integration: *f* is replaced by its piecewise
linear interpolant and the kernel is integrated exactly on every
subinterval. The stochastic variant :func:`rl_integral_ito` replaces the
kernel on each subinterval by its exact :math:`L^2` average, so that the
discrete sum satisfies the Ito isometry interval by interval.

All array routines act along the last axis, so batches of paths can be
processed at once.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import signal, special

from stfde.errors import DomainError, GridMismatchError

# above this many nodes (or for batched inputs) use FFT convolution
_DIRECT_MAX = 4096


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k T / n_steps`` on ``[0, T]``."""

    t_max: float
    n_steps: int

    def __post_init__(self) -> None:
        if not (self.t_max > 0 and math.isfinite(self.t_max)):
            raise DomainError(f"t_max must be positive: {self.t_max}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise DomainError(f"n_steps must be an integer >= 2: {self.n_steps}")

    @property
    def h(self) -> float:
        return self.t_max / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.h

    def refine(self, factor: int = 2) -> TimeGrid:
        return TimeGrid(self.t_max, self.n_steps * factor)


@dataclass(frozen=True)
class GridFunction:
    """Values of a function at the nodes of a :class:`TimeGrid`."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if values.shape[-1] != self.grid.n_steps + 1:
            raise DomainError(
                f"expected {self.grid.n_steps + 1} values, got {values.shape[-1]}"
            )
        if not np.all(np.isfinite(values)):
            raise DomainError("grid function has non-finite values")

    @classmethod
    def from_callable(cls, grid: TimeGrid, f) -> GridFunction:
        return cls(grid, np.broadcast_to(f(grid.nodes), (grid.n_steps + 1,)).copy())

    @property
    def t(self) -> np.ndarray:
        return self.grid.nodes


def _check_same_grid(a: TimeGrid, b: TimeGrid) -> None:
    if a != b:
        raise GridMismatchError(f"grid mismatch: {a} vs {b}")


# {{{ convolution helper


def causal_convolve(kernel: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``out[..., k] = sum_{j <= k} kernel[k - j] y[..., j]`` for ``k < len(y)``."""
    n = y.shape[-1]
    kernel = kernel[:n]
    if y.ndim == 1 and n <= _DIRECT_MAX:
        return np.convolve(kernel, y)[:n]
    return signal.fftconvolve(
        np.broadcast_to(kernel, y.shape[:-1] + kernel.shape), y, axes=-1
    )[..., :n]


# }}}


# {{{ Riemann-Liouville integral


def rl_weights(order: float, n_steps: int) -> tuple[np.ndarray, np.ndarray]:
    """Product-trapezoid weights (without the ``h^a / Gamma(a + 2)`` factor).

    Returns ``(w, w_first)`` such that

    .. math::

        I^a f(t_k) \\approx \\frac{h^a}{\\Gamma(a + 2)} \\Big(
            w^{(0)}_k f_0 + \\sum_{j=1}^{k} w_{k-j} f_j \\Big).
    """
    a1 = order + 1.0
    m = np.arange(n_steps + 1, dtype=float)
    w = np.empty(n_steps + 1)
    w[0] = 1.0
    w[1:] = (m[1:] + 1) ** a1 - 2 * m[1:] ** a1 + (m[1:] - 1) ** a1
    w_first = np.zeros(n_steps + 1)
    w_first[1:] = (m[1:] - 1) ** a1 - (m[1:] - a1) * m[1:] ** order
    return w, w_first


def _plain_rl(values: np.ndarray, order: float, h: float) -> np.ndarray:
    n = values.shape[-1] - 1
    w, w_first = rl_weights(order, n)
    out = np.zeros(values.shape)
    out[..., 1:] = causal_convolve(w, values[..., 1:]) + w_first[1:] * values[..., :1]
    return out * (h**order / math.gamma(order + 2.0))


def _distinct_exponents(exponents) -> list[float]:
    # integers are integrated exactly already; near-duplicates make the
    # starting system singular; powers beyond the rule's order 2 are already
    # resolved and correcting them only amplifies the higher terms
    out: list[float] = []
    for e in sorted(float(e) for e in exponents):
        if abs(e - round(e)) < 1e-9 or not 0 < e < 2:
            continue
        if out and e - out[-1] < 0.02:
            continue
        out.append(e)
    return out


def starting_weights(order: float, h: float, n_steps: int, exponents) -> np.ndarray:
    """Correction weights ``S[j - 1, k]`` for the values ``f_j - f_0``, ``j = 1..m``.

    With them the product-trapezoid rule integrates ``t**e`` exactly for every
    non-integer *e* in *exponents* with ``0 < e < 2``, which removes the leading error of data that behave
    like ``c_0 + sum_e c_e t^e`` near the origin.
    """
    exps = _distinct_exponents(exponents)
    m = len(exps)
    if m == 0:
        return np.zeros((0, n_steps + 1))
    t = np.arange(n_steps + 1) * h
    j = np.arange(1, m + 1) * h
    vander = j[None, :] ** np.array(exps)[:, None]
    defect = np.stack(
        [
            math.gamma(e + 1) / math.gamma(e + 1 + order) * t ** (e + order)
            - _plain_rl(t**e, order, h)
            for e in exps
        ]
    )
    return np.linalg.solve(vander, defect)


def rl_integral_array(
    values: np.ndarray, order: float, h: float, singular=()
) -> np.ndarray:
    """:func:`rl_integral` on raw arrays (time along the last axis)."""
    if not order > 0:
        raise DomainError(f"order must be positive: {order}")
    out = _plain_rl(values, order, h)
    weights = starting_weights(order, h, values.shape[-1] - 1, singular)
    m = weights.shape[0]
    if m:
        out = out + (values[..., 1 : m + 1] - values[..., :1]) @ weights
    return out


def trapezoid_convolve(g: np.ndarray, y: np.ndarray, h: float, singular=()) -> np.ndarray:
    """``int_0^t g(t - tau) y(tau) dtau`` on the grid by the trapezoidal rule.

    *g* is a smooth 1D array; *y* may be batched along leading axes. For data
    with non-integer powers ``tau^e`` near 0 (*singular*, ``0 < e < 2``) the
    leading Euler-Maclaurin defect ``zeta(-e) h^(1+e) g(t)`` is removed with
    weights fitted on the first samples of *y*.
    """
    g = np.asarray(g, dtype=float)
    y = np.asarray(y, dtype=float)
    n = g.size
    full = signal.fftconvolve(np.broadcast_to(g, y.shape), y, axes=-1)[..., :n]
    out = h * (full - 0.5 * (g[0] * y + g * y[..., :1]))
    exps = _distinct_exponents(singular)
    m = len(exps)
    if m and n > m:
        j = np.arange(1, m + 1) * h
        vander = j[None, :] ** np.array(exps)[:, None]
        defect = np.array([special.zeta(-e) * h ** (1 + e) for e in exps])
        omega = np.linalg.solve(vander, defect)
        fitted = (y[..., 1 : m + 1] - y[..., :1]) @ omega
        out = out - fitted[..., None] * g
        out[..., 0] = 0.0
    return out


def rl_integral(f: GridFunction, order: float, singular=()) -> GridFunction:
    """Riemann-Liouville integral :math:`I^a f` by product trapezoidal rule.

    *singular* lists non-integer powers ``t^e`` that *f* may contain near
    ``t = 0``; the rule is corrected to integrate them exactly.
    """
    return GridFunction(f.grid, rl_integral_array(f.values, order, f.grid.h, singular))


def rl_matrix(nodes: np.ndarray, order: float) -> np.ndarray:
    """Product-trapezoid matrix of :math:`I^a` on an arbitrary increasing mesh.

    ``(W @ f)[k]`` integrates the piecewise linear interpolant of *f* exactly
    against the kernel. Subinterval moments are written through incomplete
    beta functions, which stay accurate when a subinterval is tiny compared
    with its distance to ``t_k``.
    """
    t = np.asarray(nodes, dtype=float)
    if t[0] != 0 or np.any(np.diff(t) <= 0):
        raise DomainError("mesh must start at 0 and increase strictly")
    a = order
    n = t.size
    mat = np.zeros((n, n))
    b2 = special.beta(2.0, a)
    for k in range(1, n):
        x = t[k] - t[:k]
        d = np.diff(t[: k + 1])
        z = np.minimum(d / x, 1.0)
        # int over [t_j, t_j+1] of (t_k - s)^(a-1) and of (t_k - s)^(a-1) (s - t_j)
        m0 = -np.expm1(a * np.log1p(-np.where(z < 1, z, 0.0))) * x**a / a
        m0 = np.where(z < 1, m0, x**a / a)
        m1 = x ** (a + 1) * b2 * special.betainc(2.0, a, z)
        mat[k, :k] += m0 - m1 / d
        mat[k, 1 : k + 1] += m1 / d
    return mat / math.gamma(a)


def rl_integral_weighted(values: np.ndarray, order: float, h: float, power: float) -> np.ndarray:
    """``I^a [t^p f]`` on a uniform grid, with *f* piecewise linear and ``p > -1``.

    The factor ``t^p`` stays inside the kernel, so data that behave like
    ``t^p`` times a smooth function are integrated without the loss the
    plain rule suffers near ``t = 0``. Cost is quadratic in the number of
    steps.
    """
    if not order > 0:
        raise DomainError(f"order must be positive: {order}")
    if not power > -1:
        raise DomainError(f"power must exceed -1: {power}")
    values = np.asarray(values, dtype=float)
    n = values.shape[-1] - 1
    a, p = order, power
    b1 = special.beta(p + 1.0, a)
    b2 = special.beta(p + 2.0, a)
    mat = np.zeros((n + 1, n + 1))
    for k in range(1, n + 1):
        tk = k * h
        z = np.arange(k + 1) / k
        # int over cell j of (t_k - s)^(a-1) s^p and of (t_k - s)^(a-1) s^(p+1)
        i0 = np.diff(special.betainc(p + 1.0, a, z)) * b1 * tk ** (a + p)
        i1 = np.diff(special.betainc(p + 2.0, a, z)) * b2 * tk ** (a + p + 1)
        right = (i1 - np.arange(k) * h * i0) / h
        mat[k, :k] += i0 - right
        mat[k, 1 : k + 1] += right
    return values @ mat.T / math.gamma(a)


_GAUSS_NODES = 8
# first cell: pieces [h 2^-(j+1), h 2^-j], then Gauss-Jacobi on [0, h 2^-J]
_FIRST_CELL_PIECES = 40


def cell_moments(integrand, p: float, grid: TimeGrid) -> tuple[np.ndarray, np.ndarray]:
    """``int s^p G(s)`` against the two linear hat halves of every cell.

    Returns ``(m0, m1)`` with ``m0[..., i]`` weighted by ``(s_(i+1) - s) / h``
    and ``m1[..., i]`` by ``(s - s_i) / h`` on ``[s_i, s_(i+1)]``.

    ``integrand(s)`` evaluates ``G`` on a 1D array and may return extra
    leading axes. Cells ``i >= 1`` use Gauss-Legendre with the power included
    in the integrand; the first cell is split geometrically toward 0 and its
    innermost piece uses Gauss-Jacobi with weight ``s^p``.
    """
    h, n = grid.h, grid.n_steps
    x, wx = special.roots_legendre(_GAUSS_NODES)
    x = 0.5 * (x + 1.0)
    wx = 0.5 * wx

    lo = np.arange(1, n) * h
    s_cells = lo[:, None] + h * x[None, :]
    w_cells = s_cells**p * (h * wx)
    edges = h * 0.5 ** np.arange(_FIRST_CELL_PIECES + 1)
    a, b = edges[1:], edges[:-1]
    s_first = a[:, None] + (b - a)[:, None] * x[None, :]
    w_first = s_first**p * ((b - a)[:, None] * wx)
    # innermost piece [0, e]: Jacobi weight (1 + y)^p on [-1, 1]
    e = edges[-1]
    y, wy = special.roots_jacobi(_GAUSS_NODES, 0.0, p)
    s_inner = 0.5 * e * (y + 1.0)
    w_inner = (0.5 * e) ** (p + 1) * wy

    nodes = np.concatenate([s_cells.ravel(), s_first.ravel(), s_inner])
    g = np.asarray(integrand(nodes), dtype=float)
    lead = g.shape[:-1]
    k1 = s_cells.size
    k2 = k1 + s_first.size

    m0 = np.empty(lead + (n,))
    m1 = np.empty(lead + (n,))
    f = g[..., :k1].reshape(lead + s_cells.shape) * w_cells
    m1[..., 1:] = (f * ((s_cells - lo[:, None]) / h)).sum(axis=-1)
    m0[..., 1:] = f.sum(axis=-1) - m1[..., 1:]

    first = np.concatenate([s_first.ravel(), s_inner])
    f = g[..., k1:] * np.concatenate([w_first.ravel(), w_inner])
    m1[..., 0] = (f * (first / h)).sum(axis=-1)
    m0[..., 0] = f.sum(axis=-1) - m1[..., 0]
    return m0, m1


def rl_derivative(f: GridFunction, order: float, singular=()) -> GridFunction:
    """Riemann-Liouville derivative ``d/dt I^{1 - order} f`` for ``0 < order < 1``.

    Differentiation uses second-order centered differences with one-sided
    second-order stencils at both ends. *singular* is passed on to the inner
    integral (see :func:`rl_integral`). For ``f(0) != 0`` the result carries
    the ``t^{-order}`` boundary layer of the exact derivative, which the grid
    cannot resolve, so a :class:`RuntimeWarning` is emitted.
    """
    if not 0 < order < 1:
        raise DomainError(f"order must lie in (0, 1): {order}")
    values = f.values
    if np.any(np.abs(values[..., 0]) > 1e-12 * max(1.0, float(np.max(np.abs(values))))):
        warnings.warn(
            "rl_derivative: f(0) != 0, expect a t^(-order) artifact near t = 0",
            RuntimeWarning,
            stacklevel=2,
        )
    g = rl_integral_array(values, 1.0 - order, f.grid.h, singular)
    return GridFunction(f.grid, np.gradient(g, f.grid.h, axis=-1, edge_order=2))


def fractional_derivative_array(values: np.ndarray, order: float, h: float) -> np.ndarray:
    """Riemann-Liouville derivative of any order in ``(0, 2)`` on raw arrays."""
    if not 0 < order < 2:
        raise DomainError(f"order must lie in (0, 2): {order}")
    if order >= 1:
        inner = fractional_derivative_array(values, order - 1.0, h) if order > 1 else values
        return np.gradient(inner, h, axis=-1, edge_order=2)
    g = rl_integral_array(values, 1.0 - order, h)
    return np.gradient(g, h, axis=-1, edge_order=2)


# }}}


# {{{ Caputo derivative


def _l1(values: np.ndarray, order: float, h: float) -> np.ndarray:
    n = values.shape[-1] - 1
    j = np.arange(n, dtype=float)
    b = (j + 1) ** (1 - order) - j ** (1 - order)
    out = np.zeros(values.shape)
    out[..., 1:] = causal_convolve(b, np.diff(values, axis=-1))
    return out * (h ** (-order) / math.gamma(2 - order))


def caputo_derivative(f: GridFunction, order: float) -> GridFunction:
    """Caputo derivative by the L1 scheme (order < 1) or its L2-type extension.

    For ``1 < order < 2`` the first derivative is approximated at the nodes by
    second-order differences and the L1 scheme of order ``order - 1`` is
    applied to it. The value at ``t = 0`` is set to zero.
    """
    if not (0 < order < 1 or 1 < order < 2):
        raise DomainError(f"order must lie in (0, 1) or (1, 2): {order}")
    if f.grid.n_steps < 4:
        raise DomainError("caputo_derivative needs at least 4 steps")
    h = f.grid.h
    if order < 1:
        return GridFunction(f.grid, _l1(f.values, order, h))
    df = np.gradient(f.values, h, axis=-1, edge_order=2)
    return GridFunction(f.grid, _l1(df, order - 1.0, h))


# }}}


# {{{ Ito integral


def power_kernel_l2_average(exponent: float, n_steps: int, h: float) -> np.ndarray:
    """Root mean square of ``s**exponent`` over ``[(m-1) h, m h]``, ``m = 1..n``.

    Requires ``exponent > -1/2`` so that the square is integrable.
    """
    p = 2.0 * exponent + 1.0
    if not p > 0:
        raise DomainError("kernel is not square integrable at the origin")
    m = np.arange(2, n_steps + 1, dtype=float)
    # m^p - (m-1)^p without cancellation
    diff = np.ones(n_steps)
    diff[1:] = -np.expm1(p * np.log1p(-1.0 / m)) * m**p
    return np.sqrt(diff * h ** (p - 1.0) / p)


def rl_integral_ito(f: GridFunction, order: float, increments) -> GridFunction:
    """Discrete :math:`\\Gamma(a)^{-1}\\int_0^t (t-\\tau)^{a-1} f(\\tau)\\, dB(\\tau)`.

    On each subinterval the kernel is replaced by its exact :math:`L^2`
    average and *f* is frozen at the left endpoint. ``f.values`` may be a
    single path or broadcast against ``increments.dB``.
    """
    _check_same_grid(f.grid, increments.grid)
    if not order > 0.5:
        raise DomainError("the Ito integral needs order > 1/2")
    n, h = f.grid.n_steps, f.grid.h
    kbar = power_kernel_l2_average(order - 1.0, n, h) / math.gamma(order)
    y = f.values[..., :-1] * increments.dB
    out = np.zeros(y.shape[:-1] + (n + 1,))
    out[..., 1:] = causal_convolve(kbar, y)
    return GridFunction(f.grid, out)


# }}}
