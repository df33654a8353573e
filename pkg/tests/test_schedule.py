import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from natadiff_lab.errors import ScheduleError
from natadiff_lab.rng import make_rng
from natadiff_lab.schedule import (
    ScheduleTable,
    alpha_beta,
    bridge_params,
    ddim_reverse_step,
    resample_bridge,
    sample_forward,
)


def table_with(alpha_bar_at, t_index=3, T=6):
    ab = np.linspace(1.0, 0.01, T + 1)
    ab[t_index] = alpha_bar_at
    return ScheduleTable(T, ab, np.arange(T + 1))


@pytest.mark.parametrize("ctor", [ScheduleTable.linear, ScheduleTable.ddpm_linear])
def test_vp_identity(ctor):
    table = ctor(1000)
    assert np.max(np.abs(table.alpha**2 + table.beta**2 - 1.0)) <= 1e-12
    assert alpha_beta(table, 0) == (1.0, 0.0)


def test_hand_evaluated_alpha_beta():
    table = table_with(0.64)
    a, b = alpha_beta(table, 3)
    assert a == pytest.approx(0.8, abs=1e-15)
    assert b == pytest.approx(0.6, abs=1e-15)


@pytest.mark.parametrize("bad", [
    dict(alpha_bar=[1.0, 0.9, 0.95, 0.5], sampling_times=[0, 1, 3]),
    dict(alpha_bar=[0.9, 0.8, 0.7, 0.5], sampling_times=[0, 1, 3]),
    dict(alpha_bar=[1.0, 0.9, 0.8, 0.0], sampling_times=[0, 1, 3]),
    dict(alpha_bar=[1.0, 0.9, 0.8, 0.5], sampling_times=[0, 2, 2, 3]),
    dict(alpha_bar=[1.0, 0.9, 0.8, 0.5], sampling_times=[1, 3]),
])
def test_invalid_tables_rejected(bad):
    with pytest.raises(ScheduleError):
        ScheduleTable(3, **bad)


def test_time_range_checked():
    table = ScheduleTable.linear(10, 0.1, 3)
    with pytest.raises(ScheduleError):
        alpha_beta(table, 11)
    with pytest.raises(ScheduleError):
        alpha_beta(table, -1)


def test_bridge_degenerate_cases():
    table = ScheduleTable.ddpm_linear(1000)
    p = bridge_params(table, 400, 400)
    assert (p.a, p.b_sq) == (1.0, 0.0)
    p = bridge_params(table, 0, 700)
    assert p.a == pytest.approx(table.alpha[700], abs=1e-15)
    assert p.b_sq == pytest.approx(table.beta[700] ** 2, abs=1e-15)


def test_bridge_hand_values():
    ab = np.array([1.0, 0.9, 0.64, 0.5, 0.25, 0.1])
    table = ScheduleTable(5, ab, np.arange(6))
    p = bridge_params(table, 2, 4)
    assert p.a == pytest.approx(0.625, abs=1e-14)
    assert p.b_sq == pytest.approx(0.609375, abs=1e-14)
    assert p.a**2 * 0.36 + p.b_sq == pytest.approx(0.75, abs=1e-14)


def test_bridge_ordering_error():
    with pytest.raises(ScheduleError):
        bridge_params(ScheduleTable.linear(100, num_sampling_steps=11), 50, 10)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 1000), st.integers(0, 1000))
def test_bridge_consistency_property(u, v):
    table = ScheduleTable.ddpm_linear(1000)
    tau, t = min(u, v), max(u, v)
    p = bridge_params(table, tau, t)
    assert abs(p.a**2 * table.beta[tau] ** 2 + p.b_sq - table.beta[t] ** 2) <= 1e-10
    assert p.b_sq >= 0.0


def test_sample_forward_reproducible():
    table = ScheduleTable.linear(100, num_sampling_steps=11)
    x0 = np.array([1.0, -2.0])
    a = sample_forward(table, x0, 40, make_rng(3))
    b = sample_forward(table, x0, 40, make_rng(3))
    assert np.array_equal(a, b)


def test_two_stage_matches_direct_forward():
    table = ScheduleTable.ddpm_linear(1000)
    x0 = np.tile([1.5, -0.5], (10_000, 1))
    direct = sample_forward(table, x0, 600, make_rng(1))
    staged = resample_bridge(table, sample_forward(table, x0, 250, make_rng(2)), 250, 600, make_rng(3))
    for m in (direct, staged):
        assert np.allclose(m.mean(axis=0), table.alpha[600] * x0[0], atol=0.05)
    assert np.allclose(staged.var(axis=0), direct.var(axis=0), rtol=0.1)


def test_ddim_step_recovers_with_true_noise():
    table = ScheduleTable.ddpm_linear(1000)
    rng = make_rng(0)
    x0 = rng.standard_normal((5, 3))
    eps = rng.standard_normal((5, 3))
    xt = table.alpha[500] * x0 + table.beta[500] * eps
    back = ddim_reverse_step(table, xt, eps, 500, 0)
    assert np.allclose(back, x0, atol=1e-12)
    with pytest.raises(ScheduleError):
        ddim_reverse_step(table, xt, eps, 100, 200)


def test_config_shorthands():
    t = ScheduleTable.from_spec(1000, "ddpm_linear(1e-4, 0.02)", "uniform(100)")
    assert t.sampling_times[0] == 0 and t.sampling_times[-1] == 1000
    assert t.sampling_times.size == 100
    with pytest.raises(ScheduleError):
        ScheduleTable.from_spec(1000, "cosine(3)", "uniform(10)")
