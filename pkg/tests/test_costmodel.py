import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from switchsgd.costmodel import CostParams, th_all, th_comp, th_engine, th_mem


def params(**kw):
    base = dict(n_fpgas=1, n_engines=1, n_features=65536, minibatch=64, precision=4)
    base.update(kw)
    return CostParams(**base)


def test_th_comp_golden():
    # work = 8 * 1024 * 4 = 32768 cycles against 48 + 1000 idle
    assert th_comp(params()) == pytest.approx(18.605, abs=0.001)


def test_th_comp_peak_when_no_latency():
    p = params(rtt_cycles=0)
    p = dataclasses.replace(p, rtt_cycles=0)
    # fill cycles still nonzero, so just below peak; zero both via huge work
    big = params(n_features=2**26, rtt_cycles=0)
    assert th_comp(big) < 19.2
    assert th_comp(big) == pytest.approx(19.2, rel=1e-4)


def test_th_comp_drops_as_fpgas_split_work():
    single = th_comp(params(n_fpgas=1))
    split = th_comp(params(n_fpgas=2))
    assert split < single


def test_th_mem_table():
    assert th_mem(1) == 10.2
    assert th_mem(2) == 13.3
    assert th_mem(3) == 13.8
    assert th_mem(4) == 14.8
    assert th_mem(8) == 14.8
    with pytest.raises(ValueError):
        th_mem(0)


def test_th_engine_takes_minimum():
    p = params()
    assert th_comp(p) == pytest.approx(18.605, abs=0.001)
    assert th_engine(p) == 14.8  # memory bound at s=4
    assert th_all(p) == 14.8


def test_th_all_scales_by_engines():
    p = params(n_fpgas=2, n_engines=3)
    assert th_all(p) == pytest.approx(th_engine(p) * 6)


def test_near_linear_scaleout_one_engine():
    base = th_all(params(n_fpgas=1, n_features=10**6, minibatch=16))
    for f in (2, 4, 8):
        ratio = th_all(params(n_fpgas=f, n_features=10**6, minibatch=16)) / base
        assert ratio >= 0.9 * f


def test_validation():
    with pytest.raises(ValueError):
        params(minibatch=4)
    with pytest.raises(ValueError):
        params(precision=0)
    with pytest.raises(ValueError):
        params(precision=9)
    with pytest.raises(ValueError):
        params(n_engines=0)
    with pytest.raises(ValueError):
        params(n_features=0)


def test_fill_cycles_tracks_precision():
    assert params(precision=1).fill_cycles == 42
    assert params(precision=8).fill_cycles == 56


@given(
    s=st.integers(1, 8),
    f=st.integers(1, 8),
    g=st.integers(1, 8),
    b=st.sampled_from([8, 16, 64, 256]),
    m=st.sampled_from([64, 65536, 10**6]),
)
@settings(max_examples=100, deadline=None)
def test_bounds_hold_everywhere(s, f, g, b, m):
    p = CostParams(n_fpgas=f, n_engines=g, n_features=m, minibatch=b, precision=s)
    e = th_engine(p)
    assert 0 < th_comp(p) < 19.2
    assert e <= th_mem(s)
    assert e <= 19.2
    assert th_all(p) == pytest.approx(e * f * g)
