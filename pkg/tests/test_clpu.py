import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feederrestore.clpu import clpu_coefficients, demand_factors, load_at_step, sample_curve, scale_factor
from feederrestore.netmodel import ClpuParams, NetworkValidationError


def direct_curve(s_u, s_d, alpha, delay, k):
    """Delayed exponential written out independently."""
    return s_u if k <= delay else s_d + (s_u - s_d) * math.exp(-alpha * (k - delay))


def test_no_clpu_is_flat():
    p = ClpuParams(s_u=1.0, s_d=1.0, delay_steps=1, n_samples=10)
    assert [scale_factor(p, k) for k in range(1, 11)] == [1.0] * 10
    assert list(demand_factors(sample_curve(p), 1.0, [0, 1, 1, 1])) == [0, 1, 1, 1]


def test_hand_value():
    p = ClpuParams(s_u=2.0, s_d=1.0, alpha_decay=0.5, delay_steps=2)
    assert scale_factor(p, 1) == 2.0
    assert scale_factor(p, 2) == 2.0
    assert scale_factor(p, 3) == pytest.approx(1 + math.exp(-0.5), abs=1e-15)


def test_decays_to_diversified():
    p = ClpuParams(s_u=2.0, s_d=1.0, alpha_decay=0.5, delay_steps=2)
    assert scale_factor(p, 10_000) == pytest.approx(1.0, abs=1e-12)


def test_default_profile_within_one_percent_after_four_substeps():
    p = ClpuParams()
    assert abs(scale_factor(p, p.delay_steps + 4) - p.s_d) <= 0.01 * (p.s_u - p.s_d) + 1e-12


def test_never_picked_up():
    c = sample_curve(ClpuParams())
    assert np.all(demand_factors(c, 2.0, [0] * 12) == 0)


def test_picked_up_at_last_step():
    c = sample_curve(ClpuParams())
    f = demand_factors(c, 2.0, [0] * 6 + [1])
    assert f[-1] == 2.0 and np.all(f[:-1] == 0)


def test_load_at_step_scales_phases():
    c = sample_curve(ClpuParams(s_u=2.0, s_d=1.0, alpha_decay=1.0, delay_steps=1))
    p, q = load_at_step(c, 2.0, [0, 1, 1], (10.0, 0.0, 5.0), (3.0, 0.0, 1.0))
    assert p.shape == (3, 3)
    assert list(p[1]) == [20.0, 0.0, 10.0]
    assert p[2, 0] == pytest.approx(10 * (1 + math.exp(-1)))
    assert q[2, 2] == pytest.approx(1 * (1 + math.exp(-1)))


def test_rejects_non_monotone_history():
    c = sample_curve(ClpuParams())
    with pytest.raises(ValueError):
        demand_factors(c, 2.0, [0, 1, 0])
    with pytest.raises(ValueError):
        demand_factors(c, 2.0, [0, 2])


def test_rejects_bad_params():
    with pytest.raises(NetworkValidationError):
        ClpuParams(s_u=0.5, s_d=1.0)
    with pytest.raises(NetworkValidationError):
        ClpuParams(delay_steps=0)


def test_coefficients_are_affine_form():
    c = sample_curve(ClpuParams(s_u=2.0, s_d=1.0, alpha_decay=0.7, delay_steps=2))
    hist = [0, 0, 1, 1, 1, 1, 1, 1]
    f = demand_factors(c, 2.0, hist)
    for t in range(1, len(hist) + 1):
        val = sum(k * hist[tau - 1] for tau, k in clpu_coefficients(c, 2.0, t))
        assert val == pytest.approx(f[t - 1], abs=1e-12)


@settings(max_examples=80, deadline=None)
@given(s_u=st.floats(1.0, 4.0), ratio=st.floats(0.2, 1.0), alpha=st.floats(0.05, 3.0),
       delay=st.integers(1, 6), pickup=st.integers(0, 20), extra=st.integers(1, 40))
def test_single_pickup_telescopes(s_u, ratio, alpha, delay, pickup, extra):
    s_d = s_u * ratio
    p = ClpuParams(s_u=s_u, s_d=s_d, alpha_decay=alpha, delay_steps=delay)
    c = sample_curve(p)
    T = pickup + extra
    hist = [0] * pickup + [1] * extra
    f = demand_factors(c, s_u, hist)
    for t in range(T):
        k = t - pickup + 1
        if k < 1:
            assert f[t] == 0
            continue
        expected = direct_curve(s_u, s_d, alpha, delay, min(k, c.n))
        assert abs(f[t] - expected) <= 1e-12
        assert s_d - 1e-12 <= f[t] <= s_u + 1e-12
