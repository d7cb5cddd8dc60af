import math
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aaas.riskcore import EmptyTable, InvalidAlpha, InvalidReturnPeriod, pml, tvar

FIXTURE = [0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0]


def test_pml_fixture():
    assert pml(FIXTURE, 5) == 80.0
    assert pml([7.0], 100) == 7.0
    assert pml(FIXTURE, 10) == 90.0
    assert pml(FIXTURE, 2) == 50.0


def test_tvar_fixture():
    assert tvar(FIXTURE, 0.8) == 85.0
    assert tvar(FIXTURE, 0.7) == 80.0
    assert tvar([3.5, 3.5, 3.5], 0.25) == 3.5
    assert tvar([3.5, 3.5, 3.5], 0.99) == 3.5


def test_errors():
    with pytest.raises(EmptyTable):
        pml([], 5)
    with pytest.raises(EmptyTable):
        tvar([], 0.5)
    for r in (1, 0.5, float("nan"), float("inf")):
        with pytest.raises(InvalidReturnPeriod):
            pml(FIXTURE, r)
    for a in (0.0, 1.0, -0.1, float("nan")):
        with pytest.raises(InvalidAlpha):
            tvar(FIXTURE, a)


losses = st.lists(st.floats(0, 1e9, allow_nan=False), min_size=1, max_size=200)


@given(losses, st.floats(1.0001, 1e4), st.floats(1.0001, 1e4))
def test_pml_monotone_in_return_period(ylt, r1, r2):
    lo, hi = sorted((r1, r2))
    assert pml(ylt, lo) <= pml(ylt, hi)


@given(losses, st.floats(0.001, 0.999))
def test_tvar_at_least_matching_quantile(ylt, alpha):
    m = max(1, math.ceil((1 - alpha) * len(ylt) - 1e-9))
    quantile = sorted(ylt, reverse=True)[m - 1]
    assert tvar(ylt, alpha) >= quantile * (1 - 1e-12)


def test_pml_against_brute_force_counting():
    # k-th largest == smallest value whose exceedance count (>=) is at least k
    rng = random.Random(3)
    for _ in range(50):
        ylt = [float(rng.randint(0, 20)) for _ in range(rng.randint(1, 40))]
        r = rng.choice([1.5, 2, 4, 5, 10, 250])
        k = max(1, int(len(ylt) // r))
        brute = max(v for v in ylt if sum(1 for w in ylt if w >= v) >= k)
        assert pml(np.array(ylt), r) == brute
