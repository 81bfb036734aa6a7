"""Gamma function via the Lanczos approximation (g=7, 9 coefficients).

All functions accept scalars or arrays and evaluate elementwise.
"""

from __future__ import annotations

import math

import numpy as np

_G = 7.0
_COEFFS = np.array(
    [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ]
)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _lanczos_log(z: np.ndarray) -> np.ndarray:
    # log Gamma(z) for z >= 0.5
    zm = z - 1.0
    s = np.full_like(zm, _COEFFS[0])
    for i in range(1, _COEFFS.size):
        s = s + _COEFFS[i] / (zm + i)
    t = zm + _G + 0.5
    return _HALF_LOG_2PI + (zm + 0.5) * np.log(t) - t + np.log(s)


def _is_pole(z: np.ndarray) -> np.ndarray:
    return (z <= 0.0) & (z == np.round(z))


def _sinpi(z: np.ndarray) -> np.ndarray:
    # sin(pi z) with the argument reduced exactly, accurate next to the integers
    n = np.round(z)
    return np.where(n % 2 == 0, 1.0, -1.0) * np.sin(np.pi * (z - n))


def lgamma_abs(z):
    """Return ``log|Gamma(z)|``; ``inf`` at the poles."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    right = z >= 0.5
    out[right] = _lanczos_log(z[right])
    left = ~right
    if np.any(left):
        zl = z[left]
        with np.errstate(divide="ignore"):
            s = np.abs(_sinpi(zl))
            out[left] = math.log(math.pi) - np.log(s) - _lanczos_log(1.0 - zl)
        out[left & _is_pole(z)] = np.inf
    return out if out.ndim else out[()]


def rgamma(z):
    """Reciprocal Gamma ``1/Gamma(z)``, an entire function; exact zeros at the poles."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    right = z >= 0.5
    out[right] = np.exp(-_lanczos_log(z[right]))
    left = ~right
    if np.any(left):
        zl = z[left]
        # reflection: 1/Gamma(z) = sin(pi z) Gamma(1 - z) / pi
        out[left] = _sinpi(zl) * np.exp(_lanczos_log(1.0 - zl)) / np.pi
        out[left & _is_pole(z)] = 0.0
    # exact at the positive integers, so that E_{a,1}(0) = 1 to the last bit
    ints = (z >= 1) & (z <= 171) & (z == np.round(z))
    if np.any(ints):
        out[ints] = [1.0 / math.factorial(int(k) - 1) for k in z[ints]]
    return out if out.ndim else out[()]


def gamma(z):
    """Gamma function; ``inf`` at the poles."""
    z = np.asarray(z, dtype=float)
    with np.errstate(divide="ignore"):
        out = 1.0 / rgamma(z)
    out = np.where(_is_pole(z), np.inf, out)
    return out if out.ndim else out[()]
