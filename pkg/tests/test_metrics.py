import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from emu.errors import DegenerateError, PreconditionError, ShapeError
from emu.metrics import (
    REPORT_KEYS,
    absolute_difference,
    build_report,
    check_report,
    complex_correlation,
    per_subject_stats,
    phase_difference,
    relative_difference,
    sample_metrics,
    timing_comparison,
)
from emu.solver import FieldMap, SolveStats

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def cfield(shape=(4, 5), seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


# AD -----------------------------------------------------------------------

def test_ad_examples():
    y = cfield()
    assert not absolute_difference(y, y).any()
    assert absolute_difference(np.array([3 + 4j]), np.array([0j]))[0] == 5.0
    assert np.array_equal(absolute_difference(y, 2 * y), absolute_difference(2 * y, y))


def test_ad_accepts_fieldmaps():
    y = cfield()
    assert absolute_difference(FieldMap(y, 4e8), FieldMap(y, 4e8)).shape == y.shape


def test_shape_mismatch():
    for fn in (absolute_difference, relative_difference, phase_difference,
               complex_correlation):
        with pytest.raises(ShapeError):
            fn(cfield((2, 2)), cfield((2, 3)))


# RD -----------------------------------------------------------------------

def test_rd_examples():
    y = cfield()
    assert not relative_difference(y, y).any()
    assert relative_difference(np.array([2.0, 1.0]), np.array([1.0, 1.0])).tolist() == [50.0, 0.0]


@pytest.mark.parametrize("c", [1e-3, 0.5, 7.0, 1e4])
def test_rd_scale_invariant(c):
    y, p = cfield(seed=1), cfield(seed=2)
    assert np.allclose(relative_difference(c * y, c * p), relative_difference(y, p), rtol=1e-12)


def test_rd_degenerate():
    with pytest.raises(DegenerateError):
        relative_difference(np.zeros(3), np.ones(3))


@settings(max_examples=100, deadline=None)
@given(arrays(complex, 6, elements=st.complex_numbers(max_magnitude=1e3, allow_nan=False)),
       arrays(complex, 6, elements=st.complex_numbers(max_magnitude=1e3, allow_nan=False)))
def test_rd_matches_scalar_reference(y, p):
    peak = max(abs(v) for v in y)
    if peak == 0:
        return
    ref = [abs(abs(a) - abs(b)) / peak * 100 for a, b in zip(y, p)]
    assert np.allclose(relative_difference(y, p), ref, rtol=1e-12, atol=1e-12)


# PD -----------------------------------------------------------------------

def polar(angles):
    return np.array([cmath.rect(1.0, a) for a in angles])


def test_pd_examples():
    assert phase_difference(polar([0.7]), polar([0.7]))[0] == pytest.approx(0.0, abs=1e-15)
    assert phase_difference(polar([0.0]), polar([math.pi]))[0] == pytest.approx(math.pi)
    assert phase_difference(polar([0.1]), polar([6.2]))[0] == pytest.approx(0.1832, abs=5e-5)
    assert phase_difference(polar([0.1]), polar([6.2]))[0] == pytest.approx(
        2 * math.pi - 6.1, rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=1, max_size=8),
       st.lists(st.floats(-20, 20), min_size=1, max_size=8))
def test_pd_range(a, b):
    n = min(len(a), len(b))
    pd = phase_difference(polar(a[:n]), polar(b[:n]), floor=None)
    assert np.all((pd >= 0) & (pd <= math.pi))


def test_pd_masks_low_amplitude():
    y = np.array([1.0, 1e-9, 0.0])
    pd = phase_difference(y, -y)
    assert pd[0] == pytest.approx(math.pi)
    assert np.isnan(pd[1]) and np.isnan(pd[2])
    assert not np.isnan(phase_difference(y, -y, floor=None)).any()


# CC -----------------------------------------------------------------------

@pytest.mark.parametrize("c", [2, -1, 1j, 0.5 * cmath.exp(1j * math.pi / 3)])
def test_cc_complex_scale_invariance(c):
    y = cfield(seed=3)
    assert complex_correlation(y, c * y) == pytest.approx(1.0, abs=1e-12)
    assert complex_correlation(c * y, y) == pytest.approx(1.0, abs=1e-12)
    p = cfield(seed=4)
    assert complex_correlation(y, c * p) == pytest.approx(complex_correlation(y, p), rel=1e-12)


def test_cc_examples():
    y = cfield()
    assert complex_correlation(y, y) == pytest.approx(1.0, abs=1e-15)
    assert complex_correlation(np.array([1, 0]), np.array([0, 1])) == 0.0


def test_cc_degenerate():
    with pytest.raises(DegenerateError):
        complex_correlation(np.zeros(3), np.ones(3))


def test_cc_centered_variant():
    y = cfield(seed=5)
    assert complex_correlation(y, y + 10, centered=True) == pytest.approx(1.0, abs=1e-12)
    assert complex_correlation(y, y + 10) < 1.0


@settings(max_examples=100, deadline=None)
@given(arrays(complex, 5, elements=st.complex_numbers(min_magnitude=1e-3, max_magnitude=1e3,
                                                      allow_nan=False)),
       arrays(complex, 5, elements=st.complex_numbers(min_magnitude=1e-3, max_magnitude=1e3,
                                                      allow_nan=False)))
def test_cc_bounded(y, p):
    cc = complex_correlation(y, p)
    assert 0.0 <= cc <= 1.0


# aggregation --------------------------------------------------------------

def test_per_subject_examples():
    assert per_subject_stats({"a": [1.0, 1.0]}) == [("a", 1.0, 0.0)]
    (_, m, s), = per_subject_stats({"a": [0.9, 1.0]})
    assert m == pytest.approx(0.95) and s == pytest.approx(0.05)
    (_, m2, s2), = per_subject_stats({"a": [1.0, 0.9]})
    assert (m, s) == (m2, s2)
    with pytest.raises(PreconditionError):
        per_subject_stats({"a": []})


def test_timing_examples():
    assert timing_comparison([2.0], [0.004]) == pytest.approx((2.0, 0.004, 500.0))
    assert timing_comparison([1.0, 3.0], [1.0, 3.0])[2] == 1.0
    assert timing_comparison([SolveStats(5, 1e-9, 2.0)], [0.5])[2] == 4.0
    with pytest.raises(PreconditionError):
        timing_comparison([], [1.0])


def test_report_schema():
    y = cfield(seed=6)
    rows = [{"subject": s, "antenna": [0, k], "trained_ring": True,
             **sample_metrics(y, y * (1 + 0.01 * k))} for s in ("s008", "s009") for k in range(3)]
    rep = check_report(build_report("eval", 4e8, rows,
                                    {"solver_mean_s": 1.0, "surrogate_mean_s": 0.1,
                                     "speedup": 10.0}))
    assert tuple(rep) == REPORT_KEYS
    assert [s["subject"] for s in rep["subjects"]] == ["s008", "s009"]
    assert rep["summary"]["count"] == 6
    with pytest.raises(ShapeError):
        check_report({**rep, "extra": 1})


def test_metrics_deterministic():
    y, p = cfield(seed=7), cfield(seed=8)
    assert sample_metrics(y, p) == sample_metrics(y, p)
