"""Quintic connections, the ego grid, feasibility, most-likely slices."""

import numpy as np
import pytest

from rulerob.errors import InputError
from rulerob.sampler import (
    MotionLimits,
    SamplerConfig,
    check_feasibility,
    most_likely_trajectories,
    quintic_connect,
    sample_ego_batch,
    sample_ego_trajectories,
)
from scenariolib import constant_signal, vehicle

PERMISSIVE = MotionLimits(a_max=1e9, v_min=-1e9, v_max=1e9, d_rate_max=1e9)


def _hermite_oracle(start, end, T):
    """Independent solver: the full 6x6 two-point boundary system."""
    def rows(t):
        return [
            [1, t, t**2, t**3, t**4, t**5],
            [0, 1, 2 * t, 3 * t**2, 4 * t**3, 5 * t**4],
            [0, 0, 2, 6 * t, 12 * t**2, 20 * t**3],
        ]

    A = np.array(rows(0.0) + rows(T))
    b = np.array([*start, *end], dtype=float)
    return np.linalg.solve(A, b)


def _poly_eval(coeffs, t, deriv=0):
    c = np.asarray(coeffs, dtype=float)
    for _ in range(deriv):
        c = c[1:] * np.arange(1, len(c))
    return sum(ci * t**i for i, ci in enumerate(c))


# ---------------------------------------------------------------------------
# quintic_connect


def test_quintic_stationary_start_equals_end():
    coeffs = quintic_connect((1.0, 0.0, 0.0), (1.0, 0.0, 0.0), 2.5)
    np.testing.assert_allclose(coeffs, [1, 0, 0, 0, 0, 0], atol=1e-12)


def test_quintic_boundary_residuals_random():
    rng = np.random.default_rng(20)
    for _ in range(500):
        start = rng.normal(size=3)
        end = rng.normal(size=3)
        T = float(rng.uniform(0.2, 6.0))
        coeffs = quintic_connect(start, end, T)
        assert abs(_poly_eval(coeffs, 0.0) - start[0]) < 1e-9
        assert abs(_poly_eval(coeffs, 0.0, 1) - start[1]) < 1e-9
        assert abs(_poly_eval(coeffs, 0.0, 2) - start[2]) < 1e-9
        assert abs(_poly_eval(coeffs, T) - end[0]) < 1e-9
        assert abs(_poly_eval(coeffs, T, 1) - end[1]) < 1e-9
        assert abs(_poly_eval(coeffs, T, 2) - end[2]) < 1e-9


def test_quintic_symmetric_midpoint():
    coeffs = quintic_connect((0.0, 0.0, 0.0), (1.0, 0.0, 0.0), 1.0)
    oracle = _hermite_oracle((0.0, 0.0, 0.0), (1.0, 0.0, 0.0), 1.0)
    np.testing.assert_allclose(coeffs, oracle, atol=1e-10)
    assert _poly_eval(coeffs, 0.5) == pytest.approx(0.5)


def test_quintic_matches_full_hermite_system():
    rng = np.random.default_rng(21)
    for _ in range(100):
        start = rng.normal(size=3)
        end = rng.normal(size=3)
        T = float(rng.uniform(0.3, 5.0))
        np.testing.assert_allclose(
            quintic_connect(start, end, T), _hermite_oracle(start, end, T),
            rtol=1e-8, atol=1e-8,
        )


def test_quintic_rejects_nonpositive_duration():
    with pytest.raises(InputError):
        quintic_connect((0, 0, 0), (1, 0, 0), 0.0)


def test_quintic_derivatives_match_finite_differences():
    rng = np.random.default_rng(22)
    for _ in range(100):
        coeffs = quintic_connect(rng.normal(size=3), rng.normal(size=3), 2.0)
        t = float(rng.uniform(0.1, 1.9))
        h = 1e-5
        fd_v = (_poly_eval(coeffs, t + h) - _poly_eval(coeffs, t - h)) / (2 * h)
        fd_a = (_poly_eval(coeffs, t + h, 1) - _poly_eval(coeffs, t - h, 1)) / (2 * h)
        scale_v = max(abs(fd_v), 1.0)
        scale_a = max(abs(fd_a), 1.0)
        assert abs(_poly_eval(coeffs, t, 1) - fd_v) / scale_v < 1e-5
        assert abs(_poly_eval(coeffs, t, 2) - fd_a) / scale_a < 1e-5


# ---------------------------------------------------------------------------
# Ego sampling


def test_single_cell_grid_continues_current_state(net):
    signal = constant_signal({"ego": vehicle(s=100, d=0, v=20)})
    cfg = SamplerConfig(horizon=10, dt=0.1, n_v=1, n_d=1, n_s=1,
                        dv_range=(0.0, 0.0), ds_range=(0.0, 0.0), d_range=(0.0, 0.0))
    samples = sample_ego_trajectories(signal.states[0], net, cfg)
    assert len(samples) == 1
    speeds = [st.v for st in samples[0].states]
    np.testing.assert_allclose(speeds, 20.0, atol=1e-9)


def test_default_grid_all_feasible_under_permissive_limits(net):
    signal = constant_signal({"ego": vehicle(s=500, d=0, v=20)})
    cfg = SamplerConfig(limits=PERMISSIVE, d_range=(-1.5, 1.5))
    batch = sample_ego_batch(signal.states[0], net, cfg)
    assert len(batch) == 729


def test_negative_speed_targets_rejected(net):
    signal = constant_signal({"ego": vehicle(s=500, d=0, v=1.0)})
    cfg = SamplerConfig(n_v=3, n_d=1, n_s=1, dv_range=(-10.0, 0.0),
                        ds_range=(0.0, 0.0), d_range=(0.0, 0.0))
    batch = sample_ego_batch(signal.states[0], net, cfg)
    # targets -9 and -4 m/s force negative speeds; only the hold-speed cell stays
    assert len(batch) == 1
    assert batch.sample(0).provenance == (2, 0, 0)


def test_samples_start_exactly_at_query_state(net):
    rng = np.random.default_rng(23)
    for _ in range(20):
        ego = vehicle(s=float(rng.uniform(50, 800)), d=float(rng.uniform(-1, 1)),
                      v=float(rng.uniform(5, 30)), a=float(rng.uniform(-2, 2)),
                      d_rate=float(rng.uniform(-0.5, 0.5)))
        signal = constant_signal({"ego": ego})
        cfg = SamplerConfig(horizon=12, dt=0.1, n_v=3, n_d=3, n_s=3)
        for sample in sample_ego_trajectories(signal.states[0], net, cfg):
            first = sample.states[0]
            assert first.s == ego.s and first.d == ego.d
            assert first.v == ego.v and first.a == ego.a
            assert first.d_rate == ego.d_rate


def test_sampling_is_deterministic(net):
    signal = constant_signal({"ego": vehicle(s=100, d=0.3, v=22)})
    cfg = SamplerConfig(horizon=15, dt=0.08)
    a = sample_ego_batch(signal.states[0], net, cfg)
    b = sample_ego_batch(signal.states[0], net, cfg)
    assert len(a) == len(b)
    for key in a.arrays:
        assert a.arrays[key].tobytes() == b.arrays[key].tobytes()


def test_loosening_limits_never_drops_samples(net):
    signal = constant_signal({"ego": vehicle(s=100, d=0, v=20)})
    tight = SamplerConfig(limits=MotionLimits(a_max=4.0, v_min=0, v_max=25, d_rate_max=1.0))
    loose = SamplerConfig(limits=MotionLimits(a_max=8.0, v_min=-5, v_max=40, d_rate_max=3.0))
    kept_tight = {tuple(p) for p in sample_ego_batch(signal.states[0], net, tight).provenance}
    kept_loose = {tuple(p) for p in sample_ego_batch(signal.states[0], net, loose).provenance}
    assert kept_tight <= kept_loose


def test_check_feasibility_flags(net):
    signal = constant_signal({"ego": vehicle(s=100, d=0, v=20)})
    cfg = SamplerConfig(horizon=10, dt=0.1, n_v=1, n_d=1, n_s=1,
                        dv_range=(0.0, 0.0), ds_range=(0.0, 0.0), d_range=(0.0, 0.0))
    [sample] = sample_ego_trajectories(signal.states[0], net, cfg)
    assert check_feasibility(sample, MotionLimits(), net)
    assert not check_feasibility(sample, MotionLimits(v_max=19.0), net)


def test_lateral_excursion_beyond_road_infeasible(net):
    # target far into the left boundary: the footprint leaves the road
    signal = constant_signal({"ego": vehicle(s=100, d=0, v=20)})
    cfg = SamplerConfig(horizon=10, dt=0.1, n_v=1, n_d=1, n_s=1, limits=PERMISSIVE,
                        dv_range=(0.0, 0.0), ds_range=(0.0, 0.0), d_range=(5.8, 5.8))
    batch = sample_ego_batch(signal.states[0], net, cfg)
    assert len(batch) == 0


# ---------------------------------------------------------------------------
# Most-likely trajectories


def test_most_likely_slices_recorded_states():
    signal = constant_signal({
        "ego": vehicle(s=0, d=0, v=10),
        "b1": vehicle(s=30, d=0, v=12),
    }, n_steps=100)
    out = most_likely_trajectories(signal, k=10, horizon=37)
    assert set(out) == {"b1"}
    assert len(out["b1"]) == 38
    assert out["b1"].states[0] == signal.states[10].others["b1"]
    assert out["b1"].states[-1] == signal.states[47].others["b1"]


def test_most_likely_errors_when_recording_short():
    signal = constant_signal({
        "ego": vehicle(s=0, d=0, v=10),
        "b1": vehicle(s=30, d=0, v=12),
    }, n_steps=20)
    with pytest.raises(InputError) as err:
        most_likely_trajectories(signal, k=10, horizon=10)
    assert "b1" in str(err.value)


def test_most_likely_empty_when_no_other_vehicles():
    signal = constant_signal({"ego": vehicle(s=0, d=0, v=10)}, n_steps=5)
    assert most_likely_trajectories(signal, k=0, horizon=100) == {}
