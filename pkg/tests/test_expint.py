"""Exponential integral tests against an independent series oracle."""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import exp1

from mecoffload.expint import e1, E1_CROSSOVER, _e1_series, _e1_continued_fraction

# Frozen from a 200-term alternating series evaluated in 60-digit decimal
# arithmetic (see tools in this test's history; independent of the module).
E1_ORACLE = {
    1.0: 0.21938393439552027367716377546012164903,
    0.5: 0.55977359477616081174679593931508523522,
    2.0: 0.04890051070806111956723983522804952231,
    0.25: 1.04428263444373819453643816123228225189,
}


@pytest.mark.parametrize("z,expected", sorted(E1_ORACLE.items()))
def test_matches_series_oracle(z, expected):
    assert e1(z) == pytest.approx(expected, rel=1e-13)


def test_asymptotic_decay():
    assert e1(50.0) < 1e-23


def test_strictly_decreasing():
    assert e1(0.5) > e1(1.0)


def test_domain_error():
    for bad in (0.0, -1.0, -1e-300):
        with pytest.raises(ValueError):
            e1(bad)


def test_branches_agree_near_crossover():
    for z in np.linspace(0.5, 2.0, 61):
        assert _e1_series(z) == pytest.approx(_e1_continued_fraction(z), rel=1e-12)


def test_crossover_is_documented():
    assert E1_CROSSOVER == 1.0


def test_accuracy_against_scipy():
    for z in np.logspace(-8, 2.5, 200):
        assert e1(float(z)) == pytest.approx(float(exp1(z)), rel=1e-12)


def test_derivative_recurrence():
    # d/dz E1(z) = -exp(-z)/z, checked by central differences.
    for z in np.logspace(math.log10(0.01), math.log10(20.0), 40):
        z = float(z)
        h = 1e-5 * z
        fd = (e1(z + h) - e1(z - h)) / (2.0 * h)
        exact = -math.exp(-z) / z
        assert abs(fd - exact) <= 1e-8 * abs(exact)


def test_underflow_regime_returns_zero():
    assert e1(800.0) == 0.0


@given(st.floats(min_value=1e-6, max_value=500.0),
       st.floats(min_value=1.0 + 1e-9, max_value=4.0))
def test_monotone_decrease_property(z, factor):
    assert e1(z) > e1(z * factor)
