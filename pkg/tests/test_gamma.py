import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import special

from stfde.gamma import gamma, lgamma_abs, rgamma


def test_known_values():
    assert gamma(5.0) == pytest.approx(24.0, rel=1e-14)
    assert gamma(0.5) == pytest.approx(math.sqrt(math.pi), rel=1e-14)
    assert gamma(-0.5) == pytest.approx(-2 * math.sqrt(math.pi), rel=1e-14)


def test_poles():
    z = np.array([0.0, -1.0, -7.0])
    assert np.all(rgamma(z) == 0.0)
    assert np.all(np.isinf(gamma(z)))
    assert np.all(np.isinf(lgamma_abs(z)))


@given(st.floats(-30.0, 150.0).filter(lambda z: abs(z - round(z)) > 1e-6 or z > 0))
def test_reciprocal_matches_scipy(z):
    assert rgamma(z) == pytest.approx(special.rgamma(z), rel=1e-12, abs=1e-300)


@given(st.floats(0.01, 170.0))
def test_log_matches_stdlib(z):
    assert lgamma_abs(z) == pytest.approx(math.lgamma(z), rel=1e-13, abs=1e-13)
