import numpy as np
import pytest

from gncprior.gmm import GaussianMixture, energy_batch, five_mode_mixture
from gncprior.gnc import (FlowDivergence, GMMFamily, Schedule, attainment_rate,
                          equally_spaced_starts, gnc_flow_step, log_schedule, rate_grid,
                          run_gnc_flow)

FIVE = GMMFamily(five_mode_mixture())
POINT = GMMFamily(GaussianMixture.isotropic_1d([1.0], [0.0], [0.0]))


def test_log_schedule_values():
    np.testing.assert_allclose(log_schedule(1, 1e-4, 5).values, [1, 1e-1, 1e-2, 1e-3, 1e-4], rtol=1e-12)
    np.testing.assert_allclose(log_schedule(0.25, 0.01, 3).values, [0.25, 0.05, 0.01], rtol=1e-12)
    with pytest.raises(ValueError):
        log_schedule(1, 1, 1)
    with pytest.raises(ValueError):
        log_schedule(1, 0.1, 0)


def test_schedule_rejects_increasing():
    with pytest.raises(ValueError):
        Schedule(np.array([0.1, 0.2]), 1.0)
    with pytest.raises(ValueError):
        Schedule(np.array([0.1]), -1.0)


def test_step_examples():
    assert gnc_flow_step(POINT, 1.7, 0.3) == pytest.approx(0.0, abs=1e-15)
    assert gnc_flow_step(FIVE, 0.37, 0.5, eta=0.0) == 0.37
    _, g, _ = energy_batch(five_mode_mixture(), np.array([-3.0]), 1.0, hessian=False)
    assert gnc_flow_step(FIVE, -3.0, 1.0) == pytest.approx(-3.0 - g[0, 0], rel=1e-14)
    with pytest.raises(ValueError):
        gnc_flow_step(FIVE, 0.0, 0.0)


def test_step_flags_non_finite():
    def bad(x, t):
        return np.zeros_like(x), np.full_like(np.asarray(x, float), np.nan)
    with pytest.raises(FlowDivergence):
        gnc_flow_step(bad, 1.0, 0.1)


def test_trajectory():
    traj = run_gnc_flow(FIVE, 0.9, log_schedule(1.0, 1e-4, 100))
    assert len(traj) == 101
    assert abs(traj[-1] - 0.5) < 0.05
    one = run_gnc_flow(FIVE, 0.9, Schedule(np.array([0.3]), 1.0))
    assert one[1] == gnc_flow_step(FIVE, 0.9, 0.3)


def test_contraction_on_gaussian():
    fam = GMMFamily(GaussianMixture.isotropic_1d([1.0], [0.4], [0.2]))
    traj = np.array(run_gnc_flow(fam, 2.5, log_schedule(1.0, 1e-3, 30, eta=0.5)))
    d = np.abs(traj - 0.4)
    assert np.all(np.diff(d) <= 1e-15)
    grads = [abs(fam(x, t)[1]) for x, t in zip(traj[1:], log_schedule(1.0, 1e-3, 30).values)]
    assert grads[-1] < grads[0]


def test_starts_and_rates():
    s = equally_spaced_starts(-3, 3, 1000)
    assert s[0] == -3 and s[-1] == 3 and s.size == 1000
    with pytest.raises(ValueError):
        equally_spaced_starts(-3, 3, 1)
    conv = GMMFamily(GaussianMixture.isotropic_1d([1.0], [0.5], [0.05]))
    assert attainment_rate(conv, 200, (-3, 3), Schedule.constant(0.05, 50), 0.5) == 1.0
    assert attainment_rate(FIVE, 1000, (-3, 3), log_schedule(1.0, 1e-4, 100), 0.5) == 1.0


def test_rate_grid_shape_and_determinism():
    rows = rate_grid(FIVE, [1e-4, 1e-1], [1, 10], n_starts=101)
    assert [(r[0], r[1]) for r in rows] == [(1e-4, 1), (1e-4, 10), (1e-1, 1), (1e-1, 10)]
    assert rows == rate_grid(FIVE, [1e-4, 1e-1], [1, 10], n_starts=101)
