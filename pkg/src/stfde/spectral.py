r"""Dirichlet eigensystems of :math:`\mathcal A u = -(a u')' + c u` on ``(0, 1)``.

Sign convention for boundary traces: ``dphi_trace(n, x)`` is the outward
conormal derivative :math:`a(x)\,\partial_\nu \phi_n(x)`, with outward normal
``-1`` at ``x = 0`` and ``+1`` at ``x = 1``. For the Laplacian this gives
``-sqrt(2) n pi`` at ``x = 0`` and ``sqrt(2) n pi cos(n pi)`` at ``x = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg
from scipy.interpolate import CubicSpline

from stfde.errors import ConvergenceError, DomainError


def trapezoid_weights(x: np.ndarray) -> np.ndarray:
    w = np.empty_like(x)
    dx = np.diff(x)
    w[0] = dx[0] / 2
    w[-1] = dx[-1] / 2
    w[1:-1] = (dx[:-1] + dx[1:]) / 2
    return w


@dataclass(frozen=True)
class SpatialField:
    """Samples of a function on a uniform grid over ``[0, 1]`` (endpoints included)."""

    values: np.ndarray
    dirichlet: bool = False
    tag: str | None = None

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if values.ndim != 1 or values.size < 3:
            raise DomainError("a spatial field needs at least 3 samples")
        if not np.all(np.isfinite(values)):
            raise DomainError("spatial field has non-finite values")
        if self.dirichlet and (abs(values[0]) > 1e-12 or abs(values[-1]) > 1e-12):
            raise DomainError("Dirichlet-compatible field must vanish at the endpoints")

    @classmethod
    def from_callable(cls, f, points: int, **kwargs) -> SpatialField:
        x = np.linspace(0.0, 1.0, points)
        return cls(np.broadcast_to(f(x), x.shape).copy(), **kwargs)

    @classmethod
    def constant(cls, value: float, points: int = 201) -> SpatialField:
        return cls(np.full(points, float(value)), tag=f"const({value})")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.values.size)


@dataclass(frozen=True)
class EigenSystem:
    """Truncated eigensystem ``{lambda_n, phi_n}``, ``n = 1..count``.

    ``phi_eval``, ``dphi_trace`` and ``inner`` take 1-based mode numbers.
    """

    lambdas: np.ndarray
    #: eigenfunctions sampled on ``x``, shape ``(count, len(x))``
    modes: np.ndarray
    x: np.ndarray
    #: conormal traces, shape ``(count, 2)`` for ``x = 0`` and ``x = 1``
    traces: np.ndarray
    backend: str
    _evaluator: Callable[[int, np.ndarray], np.ndarray] = field(repr=False, compare=False)

    @property
    def count(self) -> int:
        return self.lambdas.size

    def phi_eval(self, n: int, x) -> np.ndarray:
        self._check_mode(n)
        return self._evaluator(n, np.asarray(x, dtype=float))

    def dphi_trace(self, n, x):
        """Conormal derivative of mode(s) *n* at boundary point *x* (0 or 1)."""
        idx = _boundary_index(x)
        n_arr = np.asarray(n)
        if np.any(n_arr < 1) or np.any(n_arr > self.count):
            raise DomainError(f"mode out of range 1..{self.count}: {n}")
        return self.traces[n_arr - 1, idx]

    def trace_matrix(self, points) -> np.ndarray:
        """``T[p, n-1] = dphi_trace(n, points[p])``."""
        return np.stack([self.traces[:, _boundary_index(p)] for p in points])

    def inner(self, f: SpatialField, n: int) -> float:
        """:math:`L^2(0,1)` projection onto mode *n* (trapezoid rule on f's grid)."""
        return float(self.project(f)[n - 1])

    def project(self, f: SpatialField, count: int | None = None) -> np.ndarray:
        """All projections ``<f, phi_n>``, ``n = 1..count``."""
        count = self.count if count is None else count
        x = f.x
        if x.size == self.x.size:
            phi = self.modes[:count]
        else:
            phi = np.stack([self._evaluator(k, x) for k in range(1, count + 1)])
        return phi @ (trapezoid_weights(x) * f.values)

    def synthesize(self, coeffs, x=None) -> np.ndarray:
        """``sum_n coeffs[..., n-1] phi_n(x)``."""
        coeffs = np.asarray(coeffs, dtype=float)
        k = coeffs.shape[-1]
        if x is None:
            phi = self.modes[:k]
        else:
            phi = np.stack([self.phi_eval(n, x) for n in range(1, k + 1)])
        return coeffs @ phi

    def gram(self) -> np.ndarray:
        w = trapezoid_weights(self.x)
        return (self.modes * w) @ self.modes.T

    def _check_mode(self, n: int) -> None:
        if not 1 <= n <= self.count:
            raise DomainError(f"mode out of range 1..{self.count}: {n}")


def _boundary_index(x) -> int:
    if x == 0:
        return 0
    if x == 1:
        return 1
    raise DomainError(f"boundary points are 0 and 1, got {x}")


def laplace_1d(count: int, grid_points: int) -> EigenSystem:
    """Closed-form eigensystem of ``-u''``: ``(n pi)^2``, ``sqrt(2) sin(n pi x)``."""
    if count < 1:
        raise DomainError("count must be >= 1")
    if grid_points < 4 * count:
        raise DomainError("need grid_points >= 4 * count to resolve the top mode")
    n = np.arange(1, count + 1)
    x = np.linspace(0.0, 1.0, grid_points + 1)
    modes = np.sqrt(2.0) * np.sin(np.pi * n[:, None] * x[None, :])
    slope = np.sqrt(2.0) * n * np.pi
    traces = np.stack([-slope, slope * np.cos(n * np.pi)], axis=1)

    def evaluator(k: int, xs: np.ndarray) -> np.ndarray:
        return np.sqrt(2.0) * np.sin(k * np.pi * xs)

    return EigenSystem(
        lambdas=(n * np.pi) ** 2.0,
        modes=modes,
        x=x,
        traces=traces,
        backend="analytic",
        _evaluator=evaluator,
    )


def _sample(field_: SpatialField, x: np.ndarray) -> np.ndarray:
    return np.interp(x, field_.x, field_.values)


def elliptic_1d(a: SpatialField, c: SpatialField, count: int, grid_points: int) -> EigenSystem:
    """Eigensystem of ``-(a u')' + c u`` from a second-order finite-difference matrix.

    The matrix is symmetric tridiagonal (Dirichlet rows eliminated) and is
    diagonalized with LAPACK ``stemr``. Eigenvectors are normalized under the
    trapezoidal inner product and oriented so that ``phi_n'(0) > 0``.
    """
    if count < 1:
        raise DomainError("count must be >= 1")
    if grid_points < 8 * count:
        raise DomainError("need grid_points >= 8 * count")
    m = grid_points
    x = np.linspace(0.0, 1.0, m + 1)
    h = 1.0 / m
    a_half = _sample(a, 0.5 * (x[:-1] + x[1:]))
    if np.any(a_half <= 0) or np.any(a.values <= 0):
        raise DomainError("ellipticity violated: a must be positive")
    c_nodes = _sample(c, x)
    if np.any(c_nodes < 0):
        raise DomainError("c must be non-negative")

    diag = (a_half[:-1] + a_half[1:]) / h**2 + c_nodes[1:-1]
    off = -a_half[1:-1] / h**2
    try:
        lam, vec = linalg.eigh_tridiagonal(
            diag, off, select="i", select_range=(0, count - 1), lapack_driver="stemr"
        )
    except linalg.LinAlgError as exc:  # pragma: no cover
        raise ConvergenceError(f"tridiagonal eigensolver failed: {exc}") from exc

    modes = np.zeros((count, m + 1))
    modes[:, 1:-1] = vec.T
    norms = np.sqrt((modes**2) @ trapezoid_weights(x))
    modes /= norms[:, None]
    modes *= np.sign(modes[:, 1])[:, None]

    # one-sided third-order stencils for u'(0) and u'(1)
    d0 = (-11 * modes[:, 0] + 18 * modes[:, 1] - 9 * modes[:, 2] + 2 * modes[:, 3]) / (6 * h)
    d1 = (11 * modes[:, -1] - 18 * modes[:, -2] + 9 * modes[:, -3] - 2 * modes[:, -4]) / (6 * h)
    traces = np.stack([-a.values[0] * d0, a.values[-1] * d1], axis=1)

    splines = [CubicSpline(x, modes[k]) for k in range(count)]

    def evaluator(k: int, xs: np.ndarray) -> np.ndarray:
        return splines[k - 1](xs)

    return EigenSystem(
        lambdas=lam, modes=modes, x=x, traces=traces, backend="matrix", _evaluator=evaluator
    )


def stiffness_operator(a: SpatialField, c: SpatialField, grid_points: int):
    """Finite-difference operator ``A_h`` (interior nodes) matching :func:`elliptic_1d`."""
    m = grid_points
    x = np.linspace(0.0, 1.0, m + 1)
    h = 1.0 / m
    a_half = _sample(a, 0.5 * (x[:-1] + x[1:]))
    c_nodes = _sample(c, x)

    def apply(u: np.ndarray) -> np.ndarray:
        flux = a_half * np.diff(u) / h
        out = np.zeros_like(u)
        out[1:-1] = -(flux[1:] - flux[:-1]) / h + c_nodes[1:-1] * u[1:-1]
        return out

    return apply


def fractional_norm_coeffs(coeffs, lambdas: np.ndarray, gamma: float):
    """``(sum_n |lambda_n^gamma c_n|^2)^{1/2}`` along the last axis."""
    coeffs = np.asarray(coeffs, dtype=float)
    k = coeffs.shape[-1]
    return np.sqrt(np.sum((lambdas[:k] ** gamma * coeffs) ** 2, axis=-1))


def fractional_norm(field_: SpatialField, eig: EigenSystem, gamma: float) -> float:
    """Truncated :math:`D(\\mathcal A^\\gamma)` norm of a field."""
    if not -1 <= gamma <= 2:
        raise DomainError("gamma must lie in [-1, 2]")
    return float(fractional_norm_coeffs(eig.project(field_), eig.lambdas, gamma))
