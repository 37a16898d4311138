"""Exponential integral E1 for the water-filling closed forms.

E1(z) = integral of exp(-t)/t from z to infinity, z > 0.  Implemented with
the classic two-regime scheme: an alternating power series below the
crossover and a Lentz-evaluated continued fraction above it.  Target
relative accuracy is 1e-12 over the full positive axis; both branches
overlap near the crossover so they can be cross-checked against each other.
"""

import math

__all__ = ["e1", "E1_CROSSOVER"]

# Series converges fast for z <= 1; the continued fraction is the faster and
# better-conditioned branch beyond that.
E1_CROSSOVER = 1.0

_EULER_GAMMA = 0.57721566490153286060651209008240243

# exp(-z) underflows to 0.0 past ~745; E1(z) < 1e-326 there.
_UNDERFLOW_Z = 745.0


def _e1_series(z: float) -> float:
    # E1(z) = -gamma - ln z + sum_{k>=1} (-1)^{k+1} z^k / (k * k!)
    total = -_EULER_GAMMA - math.log(z)
    term = 1.0
    for k in range(1, 64):
        term *= -z / k
        contrib = -term / k
        total += contrib
        if abs(contrib) < 1e-17 * abs(total):
            return total
    raise ArithmeticError(f"E1 series did not converge for z={z!r}")


def _e1_continued_fraction(z: float) -> float:
    # Modified Lentz on E1(z) = exp(-z) / (z + 1 - 1/(z + 3 - 4/(z + 5 - ...)))
    # with a_k = -k^2 and b_k = z + 2k + 1.
    tiny = 1e-300
    b = z + 1.0
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for k in range(1, 200):
        a = -float(k * k)
        b += 2.0
        d = a * d + b
        if d == 0.0:
            d = tiny
        c = b + a / c
        if c == 0.0:
            c = tiny
        d = 1.0 / d
        delta = c * d
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return math.exp(-z) * h
    raise ArithmeticError(f"E1 continued fraction did not converge for z={z!r}")


def e1(z: float) -> float:
    """Exponential integral E1 at z > 0.

    Raises:
        ValueError: if z <= 0 (the integral diverges at 0 and is not
            real-valued for negative arguments).
    """
    z = float(z)
    if not z > 0.0:
        raise ValueError(f"e1 requires z > 0, got {z!r}")
    if z > _UNDERFLOW_Z:
        return 0.0
    if z <= E1_CROSSOVER:
        return _e1_series(z)
    return _e1_continued_fraction(z)
