import math
from fractions import Fraction


def ceil_fraction(q, n):
    """``ceil(q * n)`` computed on the rational nearest to ``q``.

    Plain float products give ``ceil(0.2 * 15) == 4``; snapping ``q`` to a
    small-denominator rational first gives the intended 3.
    """
    exact = Fraction(q).limit_denominator(1_000_000)
    return math.ceil(exact * n)
