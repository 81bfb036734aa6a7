r"""Two-parameter Mittag-Leffler function on the negative real axis.

.. math::

    E_{\alpha,\beta}(z) = \sum_{k=0}^\infty \frac{z^k}{\Gamma(\alpha k + \beta)}

:func:`eval_ml` computes :math:`E_{\alpha,\beta}(-x)` for :math:`x \ge 0` by
switching between three representations:

* the power series (compensated summation) for :math:`x \le 1`;
* the algebraic asymptotic expansion with five terms once the omitted terms
  drop below :math:`10^{-13}`, plus the two pole contributions
  :math:`\frac{2}{\alpha}\,\mathrm{Re}\,(s^{1-\beta} e^{s})`,
  :math:`s = x^{1/\alpha} e^{i\pi/\alpha}`, when :math:`\alpha > 1`;
* in between, inversion of the Laplace transform
  :math:`s^{\alpha-\beta}/(s^\alpha + x)` along the parabola
  :math:`s(u) = \mu (1 + iu)^2` with an 80-node trapezoidal rule.

For :math:`\alpha > 1` the poles of the transform can sit close to the
parabola; :math:`\mu` is then chosen so that they are at least half a unit
away from the real axis in the :math:`u` plane, and their residues are added
when they fall to the right of the contour.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from stfde.errors import ConvergenceError, DomainError, AccuracyError
from stfde.gamma import rgamma

#: absolute accuracy target of :func:`eval_ml`
ML_TOL = 1.0e-10

_SERIES_MAX = 1.0
_ASYM_TERMS = 5
_ASYM_FLOOR = 1.0e-13

_CONTOUR_NODES = 80
_CONTOUR_MU = 8.0
# decay of exp(mu (1 - U^2)) at the truncation point
_CONTOUR_CUT = 36.0


@dataclass(frozen=True)
class MLParams:
    """Parameters :math:`(\\alpha, \\beta)` of :math:`E_{\\alpha,\\beta}`."""

    alpha: float
    beta: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.alpha) and math.isfinite(self.beta)):
            raise DomainError(f"non-finite parameters: {self}")
        if self.alpha <= 0:
            raise DomainError(f"alpha must be positive: {self.alpha}")
        if self.alpha > 2:
            raise DomainError(f"alpha > 2 is not supported: {self.alpha}")


# {{{ series


def _series(alpha: float, beta: float, z: np.ndarray) -> np.ndarray:
    """Kahan-compensated power series, valid for moderate ``|z|`` of any sign."""
    total = np.zeros_like(z)
    comp = np.zeros_like(z)
    power = np.ones_like(z)
    scale = np.maximum(np.abs(z), 1.0)
    for k in range(2000):
        term = power * rgamma(alpha * k + beta)
        y = term - comp
        t = total + y
        comp = (t - total) - y
        total = t
        if k > 4 and alpha * k + beta > 1 and np.all(np.abs(term) <= 1e-18 * scale):
            break
        power = power * z
    else:  # pragma: no cover
        raise ConvergenceError("Mittag-Leffler series did not converge")
    return total


# }}}


# {{{ asymptotic expansion


def _pole_terms(alpha: float, beta: float, x: np.ndarray) -> np.ndarray:
    # the two conjugate poles x^{1/alpha} exp(+-i pi/alpha) of the transform
    s = x ** (1.0 / alpha) * np.exp(1j * np.pi / alpha)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (2.0 / alpha) * np.real(np.exp(s + (1.0 - beta) * np.log(s)))
    return np.where(x > 0, r, 0.0)


def _asymptotic(alpha: float, beta: float, x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    for k in range(1, _ASYM_TERMS + 1):
        out -= (-x) ** (-k) * rgamma(beta - alpha * k)
    if alpha > 1:
        out += _pole_terms(alpha, beta, x)
    elif alpha == 1 and beta == round(beta):
        # single real pole; the algebraic part above is then exact
        out += (-x) ** (1.0 - beta) * np.exp(-x)
    return out


def asymptotic_threshold(alpha: float, beta: float) -> float:
    """Smallest ``x`` where the five-term expansion is used."""
    x0 = 50.0
    for k in range(_ASYM_TERMS + 1, _ASYM_TERMS + 4):
        c = abs(float(rgamma(beta - alpha * k)))
        if c > 0:
            x0 = max(x0, (c / _ASYM_FLOOR) ** (1.0 / k))
    return x0


# }}}


# {{{ contour integral


def _contour_mu(alpha: float, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return the parabola parameter and a mask of poles enclosed by it."""
    mu = np.full_like(x, _CONTOUR_MU)
    if alpha <= 1:
        return mu, np.zeros(x.shape, dtype=bool)

    # pole s* maps to u* with Im u* = 1 - sqrt(c / mu)
    half = 0.5 * np.pi / alpha
    c = x ** (1.0 / alpha) * math.cos(half) ** 2
    enclosed = c > _CONTOUR_MU / 4
    close = enclosed & (c < 2.25 * _CONTOUR_MU)
    mu = np.where(close, c / 2.25, mu)
    return mu, enclosed


def _integrand(alpha: float, beta: float, x: np.ndarray, mu: np.ndarray, nodes: int):
    u_max = np.sqrt(1.0 + _CONTOUR_CUT / mu)
    step = u_max / nodes
    u = step[:, None] * np.arange(nodes + 1)[None, :]

    w = 1.0 + 1j * u
    z = mu[:, None] * w**2
    logz = np.log(z)
    num = np.exp(z + (alpha - beta) * logz) * (2j * mu[:, None] * w)
    return step, num, np.exp(alpha * logz)


def _trapezoid(
    alpha: float, beta: float, x: np.ndarray, mu: np.ndarray, nodes: int
) -> tuple[np.ndarray, np.ndarray]:
    """Trapezoidal sums with *nodes* and *nodes* / 2 intervals."""
    shared = bool(np.all(mu == mu[0]))
    if shared:
        # node data depends on mu only; evaluate it once
        step, num, za = _integrand(alpha, beta, x[:1], mu[:1], nodes)
    else:
        step, num, za = _integrand(alpha, beta, x, mu, nodes)
    g = (num / (za + x[:, None])).imag

    fine = np.ones(nodes + 1)
    fine[0] = fine[-1] = 0.5
    coarse = np.zeros(nodes + 1)
    coarse[::2] = 2.0
    coarse[0] = coarse[-1] = 1.0
    return step / np.pi * (g @ fine), step / np.pi * (g @ coarse)


def _contour(alpha: float, beta: float, x: np.ndarray) -> np.ndarray:
    mu, enclosed = _contour_mu(alpha, x)
    fixed = mu == _CONTOUR_MU
    fine = np.empty_like(x)
    coarse = np.empty_like(x)
    for mask in (fixed, ~fixed):
        if np.any(mask):
            fine[mask], coarse[mask] = _trapezoid(
                alpha, beta, x[mask], mu[mask], _CONTOUR_NODES
            )

    # the trapezoidal error squares when the node count doubles; a
    # half-resolution discrepancy above sqrt(tol) means it is not converging
    estimate = float(np.max(np.abs(fine - coarse), initial=0.0))
    if estimate > math.sqrt(ML_TOL):
        raise AccuracyError(
            f"contour quadrature for E_{{{alpha},{beta}}} did not converge",
            estimate=estimate,
        )
    if alpha > 1:
        fine = fine + np.where(enclosed, _pole_terms(alpha, beta, x), 0.0)
    return fine


# }}}


def eval_ml(params: MLParams, x):
    """Evaluate :math:`E_{\\alpha,\\beta}(-x)` for ``x >= 0``.

    *x* may be a scalar or an array; the result has the same shape.
    """
    alpha, beta = params.alpha, params.beta
    xa = np.asarray(x, dtype=float)
    if np.any(np.isnan(xa)) or np.any(xa < 0):
        raise DomainError("eval_ml expects x >= 0")

    flat = xa.ravel()
    out = np.empty_like(flat)

    x_asym = asymptotic_threshold(alpha, beta)
    if alpha == 1.0:
        # exp(-x) only enters the expansion for integer beta
        x_asym = max(x_asym, 40.0)

    small = flat <= _SERIES_MAX
    large = flat >= x_asym
    mid = ~(small | large)

    if np.any(small):
        out[small] = _series(alpha, beta, -flat[small])
    if np.any(large):
        out[large] = _asymptotic(alpha, beta, flat[large])
    if np.any(mid):
        out[mid] = _contour(alpha, beta, flat[mid])

    out = out.reshape(xa.shape)
    return out if out.ndim else float(out)


def ml(alpha: float, beta: float, x):
    """Shorthand for ``eval_ml(MLParams(alpha, beta), x)``."""
    return eval_ml(MLParams(alpha, beta), x)


def ml_signed(alpha: float, beta: float, z):
    """Evaluate :math:`E_{\\alpha,\\beta}(z)` for real *z* of either sign.

    Negative arguments go through :func:`eval_ml`; positive ones (no
    cancellation) are summed directly, so they are limited to moderate sizes.
    """
    za = np.asarray(z, dtype=float)
    out = np.empty_like(za)
    neg = za <= 0
    if np.any(neg):
        out[neg] = eval_ml(MLParams(alpha, beta), -za[neg])
    if np.any(~neg):
        if np.max(za[~neg]) ** (1.0 / alpha) > 600:
            raise DomainError("positive argument too large for the series")
        out[~neg] = _series(alpha, beta, za[~neg])
    return out if out.ndim else float(out)


def ml_derivative(alpha: float, lam: float, t):
    r"""Time derivative of :math:`E_{\alpha,1}(-\lambda t^\alpha)`.

    Uses :math:`\frac{d}{dt} E_{\alpha,1}(-\lambda t^\alpha) =
    -\lambda t^{\alpha-1} E_{\alpha,\alpha}(-\lambda t^\alpha)`.
    """
    if alpha <= 0 or lam <= 0:
        raise DomainError("ml_derivative expects alpha > 0 and lam > 0")
    ta = np.asarray(t, dtype=float)
    if np.any(ta < 0):
        raise DomainError("ml_derivative expects t >= 0")
    if np.any(ta == 0) and alpha < 1:
        raise DomainError("derivative is singular at t = 0 for alpha < 1")

    with np.errstate(divide="ignore"):
        out = -lam * ta ** (alpha - 1) * ml(alpha, alpha, lam * ta**alpha)
    return out if np.ndim(out) else float(out)


def ml_integral_identity_check(
    alpha: float, beta: float, lam: float, t: float
) -> tuple[float, float]:
    r"""Both sides of :math:`\int_0^t E_{\alpha,\beta}(\lambda\tau^\alpha)
    \tau^{\beta-1} d\tau = t^\beta E_{\alpha,\beta+1}(\lambda t^\alpha)`.

    The left side is computed independently of the right: substituting
    :math:`\tau = t u^{1/\alpha}` turns it into
    :math:`\frac{t^\beta}{\alpha}\int_0^1 E_{\alpha,\beta}(\lambda t^\alpha u)
    u^{\beta/\alpha - 1} du`, whose integrand is entire in *u*, so a
    Gauss-Jacobi rule carrying the algebraic weight converges spectrally.
    Two rule sizes are compared as the convergence check.
    """
    if alpha <= 0 or beta <= 0 or t <= 0:
        raise DomainError("expected alpha > 0, beta > 0, t > 0")
    c = beta / alpha - 1.0
    z = lam * t**alpha

    def rule(n: int) -> float:
        x, w = special.roots_jacobi(n, 0.0, c)
        f = np.asarray(ml_signed(alpha, beta, z * (x + 1.0) / 2.0), dtype=float)
        return t**beta / alpha * float(np.dot(w, f)) / 2.0 ** (c + 1.0)

    lhs, check = rule(64), rule(32)
    rhs = t**beta * ml_signed(alpha, beta + 1.0, z)
    err = abs(lhs - check)
    if not np.isfinite(lhs) or err > 1e-9 * (1.0 + abs(rhs)):
        raise ConvergenceError(
            "quadrature of the Mittag-Leffler integral did not converge",
            estimate=err,
        )
    return float(lhs), float(rhs)


def ml_table(alphas, betas, xs) -> list[tuple[float, float, float, float]]:
    """Rows ``(alpha, beta, x, value)`` over the Cartesian product."""
    rows = []
    for a in alphas:
        for b in betas:
            values = eval_ml(MLParams(a, b), np.asarray(xs, dtype=float))
            rows.extend((a, b, float(x), float(v)) for x, v in zip(xs, values))
    return rows
