"""Tests for the Euler-Maruyama trajectory engine."""

import io

import numpy as np
import pytest

from qubitfeedback import lq
from qubitfeedback import trajectories as tj
from qubitfeedback.filters import GROUND_STATE, ModelParams


QUBIT = ModelParams(kappa_s_sq=1.0, kappa_f_sq=0.0, horizon_T=1.0)
MIXED = ModelParams(kappa_s_sq=0.5, horizon_T=1.0)
ANGLE = ModelParams(alpha=0.5, horizon_T=1.0)


def test_wrap_angle():
    np.testing.assert_allclose(tj.wrap_angle(0.3), 0.3)
    np.testing.assert_allclose(tj.wrap_angle(np.pi), -np.pi)
    np.testing.assert_allclose(tj.wrap_angle(-np.pi), -np.pi)
    np.testing.assert_allclose(tj.wrap_angle(3.0 * np.pi), -np.pi)
    np.testing.assert_allclose(tj.wrap_angle(2.0 * np.pi + 0.1), 0.1, atol=1e-12)


# ---------------------------------------------------------------------------
# single steps


def test_step_diffusive_drift_only():
    p = tj.step_diffusive([0.0, 0.0, 1.0], [0.0, 0.0], 0.01, 0.0, QUBIT)
    np.testing.assert_allclose(p, [0.0, 0.0, 0.98], atol=1e-15)


def test_step_diffusive_with_noise_before_projection():
    # loose tolerance shows the raw Euler arithmetic
    p = tj.step_diffusive(
        [0.0, 0.0, 1.0], [0.0, 0.0], 0.01, 0.1, QUBIT, ball_tol=1e-2
    )
    np.testing.assert_allclose(p, [0.2, 0.0, 0.98], atol=1e-15)
    # default tolerance projects the same point back onto the sphere
    q = tj.step_diffusive([0.0, 0.0, 1.0], [0.0, 0.0], 0.01, 0.1, QUBIT)
    np.testing.assert_allclose(np.linalg.norm(q), 1.0)
    np.testing.assert_allclose(q, np.array([0.2, 0.0, 0.98]) / np.linalg.norm([0.2, 0.0, 0.98]))


def test_step_counting_jump_resets_exactly():
    p = tj.step_counting([0.3, -0.2, 0.5], [1.0, -1.0], 0.01, True, QUBIT)
    np.testing.assert_array_equal(p, GROUND_STATE)


def test_step_counting_no_jump():
    p = tj.step_counting(
        [1.0, 0.0, 0.0], [0.0, 0.0], 0.01, False, QUBIT, ball_tol=1e-3
    )
    np.testing.assert_allclose(p, [1.0, 0.0, -0.005], atol=1e-15)


def test_step_angle():
    assert tj.step_angle(0.0, 1.0, 0.1, 0.0, ANGLE) == pytest.approx(0.2)
    # wraps into [-pi, pi)
    assert tj.step_angle(3.1, 1.0, 0.1, 0.0, ANGLE) == pytest.approx(3.3 - 2 * np.pi)


def test_sample_jump_rejects_coarse_dt():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        tj.sample_jump([0.0, 0.0, 1.0], 1.5, rng, QUBIT)


def test_sample_jump_frequency():
    rng = np.random.default_rng(42)
    p = np.tile([0.0, 0.0, -0.998], (200_000, 1))  # intensity 1e-3
    dt = 1.0
    draws = tj.sample_jump(p, dt, rng, QUBIT)
    prob = 0.5 * (1.0 - 0.998)
    freq = draws.mean()
    band = 3.0 * np.sqrt(prob * (1.0 - prob) / draws.size)
    assert abs(freq - prob) <= band


# ---------------------------------------------------------------------------
# whole trajectories


def test_simulate_is_deterministic():
    a = tj.simulate(tj.DIFFUSIVE, tj.zero_policy(tj.DIFFUSIVE), [1.0, 0.0, 0.0], MIXED, 0.01, seed=5)
    b = tj.simulate(tj.DIFFUSIVE, tj.zero_policy(tj.DIFFUSIVE), [1.0, 0.0, 0.0], MIXED, 0.01, seed=5)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.increments, b.increments)
    assert a.total_cost == b.total_cost


def test_ground_state_is_absorbing():
    for model in (tj.DIFFUSIVE, tj.COUNTING):
        traj = tj.simulate(model, tj.zero_policy(model), GROUND_STATE, QUBIT, 0.01, seed=1)
        assert np.all(traj.states == GROUND_STATE)
        assert traj.total_cost == pytest.approx(2.0)
        assert traj.terminal_cost == pytest.approx(2.0)


def test_angle_noise_free_origin_has_zero_cost():
    params = ModelParams(alpha=0.0, horizon_T=1.0)
    traj = tj.simulate(tj.ANGLE, tj.zero_policy(tj.ANGLE), 0.0, params, 0.01, seed=2)
    assert traj.total_cost == 0.0
    assert np.all(traj.states == 0.0)


def test_running_cost_left_endpoint_rule():
    # a constant control accrues exactly |u|^2 * T regardless of the path
    policy = tj.constant_policy(tj.DIFFUSIVE, (0.3, -0.4))
    traj = tj.simulate(tj.DIFFUSIVE, policy, [0.0, 0.0, 1.0], MIXED, 0.02, seed=3)
    assert traj.running_cost[-1] == pytest.approx(0.25 * 1.0)
    assert traj.total_cost == pytest.approx(0.25 + traj.terminal_cost)
    # and the first increment lands after one step
    assert traj.running_cost[1] == pytest.approx(0.25 * 0.02)


def test_dt_must_divide_horizon():
    with pytest.raises(ValueError):
        tj.simulate(tj.ANGLE, tj.zero_policy(tj.ANGLE), 0.0, ANGLE, 0.3, seed=0)
    with pytest.raises(ValueError):
        tj.run_batch(tj.ANGLE, tj.zero_policy(tj.ANGLE), 0.0, ANGLE, 0.3, 10, seed=0)


def test_counting_jumps_land_on_ground_state():
    # seed chosen so the path contains a jump (a single path misses one
    # with probability ~1/e at these parameters)
    traj = tj.simulate(
        tj.COUNTING, tj.zero_policy(tj.COUNTING), [0.0, 0.0, 1.0], QUBIT, 1e-2, seed=0
    )
    jumps = traj.increments == 1.0
    assert jumps.any(), "excited start at unit coupling should produce a jump"
    np.testing.assert_array_equal(
        traj.states[1:][jumps], np.tile(GROUND_STATE, (jumps.sum(), 1))
    )
    # observation column for the counting model is the jump indicator
    np.testing.assert_array_equal(traj.observations, traj.increments)


def test_diffusive_observation_increment():
    traj = tj.simulate(
        tj.DIFFUSIVE, tj.zero_policy(tj.DIFFUSIVE), [1.0, 0.0, 0.0], MIXED, 0.01, seed=7
    )
    kappa_s = np.sqrt(0.5)
    expected = kappa_s * traj.states[:-1, 0] * 0.01 + traj.increments
    np.testing.assert_allclose(traj.observations, expected, atol=1e-15)


# ---------------------------------------------------------------------------
# batches


def test_simulate_equals_batch_path_zero():
    stats, costs = tj.run_batch(
        tj.ANGLE, tj.lq_policy(ANGLE), 1.0, ANGLE, 1e-2, 8, seed=9, return_costs=True
    )
    traj = tj.simulate(tj.ANGLE, tj.lq_policy(ANGLE), 1.0, ANGLE, 1e-2, seed=9)
    assert traj.total_cost == costs[0]
    assert stats.n == 8


def test_batch_is_chunk_and_thread_invariant():
    kw = dict(seed=13, return_costs=True)
    _, a = tj.run_batch(tj.DIFFUSIVE, tj.zero_policy(tj.DIFFUSIVE), [1, 0, 0], MIXED, 0.02, 30, chunk_size=7, **kw)
    _, b = tj.run_batch(tj.DIFFUSIVE, tj.zero_policy(tj.DIFFUSIVE), [1, 0, 0], MIXED, 0.02, 30, chunk_size=1000, **kw)
    _, c = tj.run_batch(tj.DIFFUSIVE, tj.zero_policy(tj.DIFFUSIVE), [1, 0, 0], MIXED, 0.02, 30, chunk_size=7, threads=3, **kw)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, c)


def test_common_random_numbers_share_noise():
    # same seed, different policies: angle paths see identical dW streams,
    # so a policy with no actuation reproduces the noise-only endpoint
    _, costs_zero = tj.run_batch(
        tj.ANGLE, tj.zero_policy(tj.ANGLE), 0.0, ANGLE, 0.01, 16, seed=21, return_costs=True
    )
    _, costs_zero2 = tj.run_batch(
        tj.ANGLE, tj.zero_policy(tj.ANGLE), 0.0, ANGLE, 0.01, 16, seed=21, return_costs=True
    )
    np.testing.assert_array_equal(costs_zero, costs_zero2)


def test_lq_policy_monte_carlo_sanity():
    stats = tj.run_batch(tj.ANGLE, tj.lq_policy(ANGLE), 1.0, ANGLE, 1e-2, 4000, seed=17)
    target = lq.value(0.0, 1.0, 1.0, 0.5)
    # generous 5 sigma: the tight 3 sigma version lives in the acceptance suite
    assert abs(stats.mean - target) <= 5.0 * stats.stderr + 0.01


def test_cost_statistics_from_costs_and_merge():
    costs = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    direct = tj.CostStatistics.from_costs(costs)
    assert direct.mean == pytest.approx(3.5)
    assert direct.std == pytest.approx(np.std(costs, ddof=1))
    assert direct.stderr == pytest.approx(direct.std / np.sqrt(6))
    assert (direct.minimum, direct.maximum) == (1.0, 6.0)
    merged = tj.CostStatistics.from_costs(costs[:2]).merge(
        tj.CostStatistics.from_costs(costs[2:])
    )
    assert merged.n == direct.n
    assert merged.mean == pytest.approx(direct.mean, abs=1e-12)
    assert merged.std == pytest.approx(direct.std, abs=1e-12)
    # order independence
    swapped = tj.CostStatistics.from_costs(costs[2:]).merge(
        tj.CostStatistics.from_costs(costs[:2])
    )
    assert swapped.mean == pytest.approx(merged.mean, abs=1e-12)
    assert swapped.std == pytest.approx(merged.std, abs=1e-12)


def test_cost_statistics_single_path_convention():
    stats = tj.CostStatistics.from_costs([2.5])
    assert stats.std == 0.0 and stats.stderr == 0.0


# ---------------------------------------------------------------------------
# CSV export


def test_qubit_csv_round_trip():
    traj = tj.simulate(
        tj.DIFFUSIVE, tj.constant_policy(tj.DIFFUSIVE, (0.1, 0.2)), [1, 0, 0], MIXED, 0.05, seed=23
    )
    buf = io.StringIO()
    traj.to_csv(buf)
    lines = buf.getvalue().strip().split("\n")
    assert lines[0] == tj.QUBIT_CSV_HEADER
    assert len(lines) == 1 + len(traj.times)
    data = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]])
    np.testing.assert_array_equal(data[:, 0], traj.times)
    np.testing.assert_array_equal(data[:, 1:4], traj.states)
    np.testing.assert_array_equal(data[:-1, 4:6], traj.controls)
    np.testing.assert_array_equal(data[:-1, 6], traj.increments)
    np.testing.assert_array_equal(data[:-1, 7], traj.observations)
    np.testing.assert_array_equal(data[:, 8], traj.running_cost)
    np.testing.assert_array_equal(data[-1, 4:8], 0.0)


def test_angle_csv_round_trip(tmp_path):
    traj = tj.simulate(tj.ANGLE, tj.lq_policy(ANGLE), 1.0, ANGLE, 0.25, seed=29)
    out = tmp_path / "angle.csv"
    traj.to_csv(out)
    lines = out.read_text().strip().split("\n")
    assert lines[0] == tj.ANGLE_CSV_HEADER
    data = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]])
    assert data.shape == (5, 5)
    np.testing.assert_array_equal(data[:, 1], traj.states)
    np.testing.assert_array_equal(data[:-1, 2], traj.controls)


# ---------------------------------------------------------------------------
# ensemble state means


def test_ensemble_means_fixed_point_exact():
    means, errs = tj.ensemble_means(
        tj.DIFFUSIVE, tj.zero_policy(tj.DIFFUSIVE), GROUND_STATE, QUBIT,
        0.1, 50, times=[0.0, 0.5, 1.0], seed=3,
    )
    np.testing.assert_array_equal(means, np.tile(GROUND_STATE, (3, 1)))
    np.testing.assert_array_equal(errs, 0.0)


def test_ensemble_means_matches_noise_off_euler():
    # zero control makes the diffusive drift affine, so the Euler ensemble
    # mean follows the noise-off Euler recursion exactly (up to MC error)
    dt, n = 0.01, 2000
    checkpoints = [0.25, 0.5, 1.0]
    means, errs = tj.ensemble_means(
        tj.DIFFUSIVE, tj.zero_policy(tj.DIFFUSIVE), [1.0, 0.0, 0.0], MIXED,
        dt, n, times=checkpoints, seed=17,
    )
    p = np.array([1.0, 0.0, 0.0])
    dead = []
    for k in range(round(1.0 / dt)):
        p = tj.step_diffusive(p, [0.0, 0.0], dt, 0.0, MIXED)
        if (k + 1) * dt in checkpoints:
            dead.append(p.copy())
    np.testing.assert_array_less(np.abs(means - dead), 3.0 * errs + 1e-12)


def test_ensemble_means_chunk_and_thread_invariant():
    kw = dict(times=[0.0, 0.4, 1.0], seed=9)
    a = tj.ensemble_means(
        tj.COUNTING, tj.zero_policy(tj.COUNTING), [1, 0, 0], QUBIT, 0.02, 300, **kw
    )
    b = tj.ensemble_means(
        tj.COUNTING, tj.zero_policy(tj.COUNTING), [1, 0, 0], QUBIT, 0.02, 300,
        chunk_size=7, threads=3, **kw
    )
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_ensemble_means_checkpoint_order_is_input_order():
    fwd, _ = tj.ensemble_means(
        tj.ANGLE, tj.zero_policy(tj.ANGLE), 1.0, ANGLE, 0.1, 40,
        times=[0.0, 1.0], seed=5,
    )
    rev, _ = tj.ensemble_means(
        tj.ANGLE, tj.zero_policy(tj.ANGLE), 1.0, ANGLE, 0.1, 40,
        times=[1.0, 0.0], seed=5,
    )
    np.testing.assert_array_equal(fwd, rev[::-1])
    assert fwd[0] == 1.0  # theta0 snapshot


def test_ensemble_means_rejects_off_grid_and_duplicates():
    with pytest.raises(ValueError):
        tj.ensemble_means(
            tj.ANGLE, tj.zero_policy(tj.ANGLE), 1.0, ANGLE, 0.1, 4, times=[0.05]
        )
    with pytest.raises(ValueError):
        tj.ensemble_means(
            tj.ANGLE, tj.zero_policy(tj.ANGLE), 1.0, ANGLE, 0.1, 4, times=[1.1]
        )
    with pytest.raises(ValueError):
        tj.ensemble_means(
            tj.ANGLE, tj.zero_policy(tj.ANGLE), 1.0, ANGLE, 0.1, 4,
            times=[0.5, 0.5],
        )
