import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coxmil.survcore import (
    Cohort,
    SurvivalRecord,
    UndefinedCIndexError,
    c_index,
    chi2_sf_1df,
    kaplan_meier,
    logrank_test,
    nelson_aalen,
    risk_set,
)

from conftest import brute_force_cindex_counts, random_cohort


def cohort(times, events=None):
    events = [1] * len(times) if events is None else events
    return Cohort.from_arrays(times, events)


# five-vs-five logrank fixture, tabulated by hand
GROUP_A = ([1, 3, 4, 6, 8], [1, 1, 0, 1, 0])
GROUP_B = ([2, 3, 5, 7, 9], [1, 0, 1, 1, 1])
# per event time (t, O_a - E_a, V):
#   1: 1-5/10,  5*5*1*9/(100*9)     2: 0-4/9,   4*5*1*8/(81*8)
#   3: 1-4/8,   4*4*1*7/(64*7)      5: 0-2/5,   2*3*1*4/(25*4)
#   6: 1-2/4,   2*2*1*3/(16*3)      7: 0-1/3,   1*2*1*2/(9*2)     9: 0, n=1 -> V=0
HAND_O_MINUS_E = Fraction(1, 2) - Fraction(4, 9) + Fraction(1, 2) - Fraction(2, 5) + Fraction(1, 2) - Fraction(1, 3)
HAND_V = Fraction(1, 4) + Fraction(20, 81) + Fraction(1, 4) + Fraction(6, 25) + Fraction(1, 4) + Fraction(2, 9)
HAND_STAT = HAND_O_MINUS_E ** 2 / HAND_V


class TestRecords:
    def test_negative_time_rejected(self):
        with pytest.raises(ValueError):
            SurvivalRecord("a", -1.0, 1)

    def test_bad_event_rejected(self):
        with pytest.raises(ValueError):
            SurvivalRecord("a", 1.0, 2)

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            Cohort([SurvivalRecord("a", 1, 1), SurvivalRecord("a", 2, 0)])

    def test_empty_cohort_rejected(self):
        with pytest.raises(ValueError):
            Cohort([])

    def test_covariate_width_checked(self):
        with pytest.raises(ValueError):
            Cohort([SurvivalRecord("a", 1, 1, (1.0,)), SurvivalRecord("b", 2, 0, (1.0, 2.0))])


class TestRiskSet:
    def test_earliest_includes_all(self):
        assert risk_set(cohort([1, 2, 3]), 0) == {0, 1, 2}

    def test_latest_only_itself(self):
        assert risk_set(cohort([1, 2, 3]), 2) == {2}

    def test_ties_included(self):
        assert risk_set(cohort([2, 2, 5]), 0) == {0, 1, 2}

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            risk_set(cohort([1, 2]), 2)

    def test_nested_and_contains_self(self, rng):
        for _ in range(20):
            t, e = random_cohort(rng, 15)
            c = cohort(t, e)
            sets = [risk_set(c, i) for i in range(len(c))]
            for i in range(len(c)):
                assert i in sets[i]
                for j in range(len(c)):
                    if t[i] <= t[j]:
                        assert sets[j] <= sets[i]


class TestKaplanMeier:
    def test_all_events(self):
        np.testing.assert_allclose(kaplan_meier(cohort([1, 2, 3, 4])).survival, [0.75, 0.5, 0.25, 0.0])

    def test_all_censored(self):
        km = kaplan_meier(cohort([1, 2, 3], [0, 0, 0]))
        assert km.points == []
        assert km.survival_at(10.0) == 1.0

    def test_hand_fixture(self):
        km = kaplan_meier(cohort([1, 2, 3, 4], [1, 0, 1, 1]))
        assert km.times.tolist() == [1.0, 3.0, 4.0]
        assert km.survival.tolist() == [0.75, 0.375, 0.0]
        assert [p.at_risk for p in km.points] == [4, 2, 1]

    def test_tied_deaths(self):
        km = kaplan_meier(cohort([1, 1, 2, 3], [1, 1, 0, 1]))
        assert km.survival.tolist() == [0.5, 0.0]

    def test_empirical_without_censoring(self, rng):
        t = rng.exponential(size=50)
        km = kaplan_meier(cohort(t))
        grid = np.linspace(0, t.max(), 40)
        np.testing.assert_allclose(km.survival_at(grid), [(t > g).mean() for g in grid], atol=1e-12)

    def test_non_increasing(self, rng):
        for _ in range(20):
            t, e = random_cohort(rng, 30)
            s = kaplan_meier(cohort(t, e)).survival
            assert np.all(np.diff(s) <= 0) and np.all((s >= 0) & (s <= 1))


class TestLogrank:
    def test_identical_groups(self):
        res = logrank_test(cohort([1, 2, 3, 4], [1, 0, 1, 1]), cohort([1, 2, 3, 4], [1, 0, 1, 1]))
        assert res.statistic == 0.0
        assert res.p_value == 1.0

    def test_separated_groups_positive(self):
        res = logrank_test(cohort([1, 2, 3]), cohort([10, 11, 12], [0, 0, 0]))
        assert res.statistic > 0
        assert res.p_value < 1

    def test_hand_tabulated_fixture(self):
        res = logrank_test(GROUP_A, GROUP_B)
        assert HAND_STAT == Fraction(841, 11819)
        assert res.statistic == pytest.approx(float(HAND_STAT), abs=1e-9)
        assert res.p_value == pytest.approx(math.erfc(math.sqrt(float(HAND_STAT) / 2)), abs=1e-12)

    def test_symmetric_and_monotone_invariant(self, rng):
        for _ in range(20):
            ta, ea = random_cohort(rng, 12)
            tb, eb = random_cohort(rng, 9)
            ab = logrank_test((ta, ea), (tb, eb))
            ba = logrank_test((tb, eb), (ta, ea))
            assert ab.statistic == pytest.approx(ba.statistic, rel=1e-12)
            warp = lambda t: np.exp(t / 3.0) + t ** 3  # noqa: E731
            warped = logrank_test((warp(ta), ea), (warp(tb), eb))
            assert warped.statistic == pytest.approx(ab.statistic, rel=1e-12)

    def test_no_events(self):
        res = logrank_test(cohort([1, 2], [0, 0]), cohort([3, 4], [0, 0]))
        assert (res.statistic, res.p_value) == (0.0, 1.0)

    def test_chi2_tail_matches_scipy(self):
        from scipy import stats
        for x in [0.01, 0.5, 1.0, 3.84, 10.0, 40.0]:
            assert chi2_sf_1df(x) == pytest.approx(stats.chi2.sf(x, 1), rel=1e-10)


class TestCIndex:
    def test_perfect(self):
        assert c_index([1, 2, 3], [1, 1, 1], [3, 2, 1]).c_index == 1.0

    def test_reversed(self):
        assert c_index([1, 2, 3], [1, 1, 1], [1, 2, 3]).c_index == 0.0

    def test_hand_fixture(self):
        res = c_index([2, 4, 5], [1, 1, 0], [5, 1, 3])
        assert (res.concordant, res.discordant, res.tied_risk, res.permissible) == (2, 1, 0, 3)
        assert res.c_index == pytest.approx(2 / 3, abs=1e-15)

    def test_tied_risk_half(self):
        res = c_index([1, 2], [1, 1], [0.3, 0.3])
        assert res.tied_risk == 1 and res.c_index == 0.5

    def test_undefined(self):
        with pytest.raises(UndefinedCIndexError):
            c_index([1, 2, 3], [0, 0, 0], [1, 2, 3])
        with pytest.raises(UndefinedCIndexError):
            c_index([2, 2], [1, 1], [1, 0])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            c_index([1, 2], [1], [1, 2])

    @given(st.integers(2, 30).flatmap(lambda n: st.tuples(
        st.lists(st.floats(0, 100, allow_nan=False), min_size=n, max_size=n, unique=True),
        st.lists(st.integers(0, 1), min_size=n, max_size=n),
        st.lists(st.floats(-5, 5, allow_nan=False), min_size=n, max_size=n, unique=True))))
    @settings(max_examples=200, deadline=None)
    def test_negated_risk_complements(self, data):
        t, e, r = (np.array(v, dtype=float) for v in data)
        try:
            c = c_index(t, e, r).c_index
        except UndefinedCIndexError:
            return
        assert c_index(t, e, -r).c_index == pytest.approx(1 - c, abs=1e-12)

    def test_counts_equal_brute_force(self, rng):
        for _ in range(200):
            n = int(rng.integers(2, 50))
            t, e = random_cohort(rng, n)
            r = rng.integers(0, 6, n).astype(float)
            if brute_force_cindex_counts(t, e, r)[3] == 0:
                continue
            res = c_index(t, e, r)
            assert (res.concordant, res.discordant, res.tied_risk, res.permissible) == \
                brute_force_cindex_counts(t, e, r)


def test_nelson_aalen_hand():
    times, chf = nelson_aalen([1, 2, 3], [1, 1, 1])
    np.testing.assert_allclose(chf, [1 / 3, 1 / 3 + 1 / 2, 1 / 3 + 1 / 2 + 1])
    _, on_grid = nelson_aalen([1, 2, 3], [1, 0, 1], grid=[0.5, 1, 2.5, 3])
    np.testing.assert_allclose(on_grid, [0, 1 / 3, 1 / 3, 1 / 3 + 1])
