"""Prediction ensemble: gridded ego trajectories and recorded others.

Ego motion is decoupled: one quintic polynomial drives arc length
``s(t)`` to a gridded terminal (position offset, speed, zero
acceleration) and an independent quintic drives the lateral deviation
``d(t)`` to a gridded terminal offset at rest. "Sampling" is
deterministic gridding over the terminal states; kinematically
infeasible grid cells are dropped. Other vehicles contribute their
recorded future verbatim as most-likely trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from rulerob import _core
from rulerob.errors import InputError
from rulerob.scenario import JointState, LaneNetwork, Signal, VehicleState


@dataclass(frozen=True)
class MotionLimits:
    """Kinematic feasibility bounds for sampled ego trajectories."""

    a_max: float = 8.0
    v_min: float = 0.0
    v_max: float = 60.0
    d_rate_max: float = 4.0


@dataclass(frozen=True)
class SamplerConfig:
    """Grid and horizon of the ego trajectory sampler.

    The default grid is 9x9x9 = 729 terminal states over (speed change,
    lateral position, longitudinal offset), over a 38-step horizon at
    40 ms per step (1.52 s).
    """

    horizon: int = 38
    dt: float = 0.04
    n_v: int = 9
    n_d: int = 9
    n_s: int = 9
    dv_range: tuple[float, float] = (-4.0, 4.0)
    ds_range: tuple[float, float] = (-5.0, 5.0)
    d_range: tuple[float, float] | None = None  # None: derive from reachable lanes
    limits: MotionLimits = field(default_factory=MotionLimits)

    def __post_init__(self):
        if self.horizon < 1 or self.dt <= 0:
            raise InputError(f"horizon must be >= 1 and dt > 0, got {self.horizon}, {self.dt}")
        if min(self.n_v, self.n_d, self.n_s) < 1:
            raise InputError("grid sizes must be >= 1")

    @property
    def grid_size(self) -> int:
        return self.n_v * self.n_d * self.n_s


@dataclass(frozen=True)
class TrajectorySample:
    """One candidate ego trajectory over steps k..k+h."""

    states: tuple[VehicleState, ...]
    provenance: tuple[int, int, int] | None = None  # grid indices (iv, id, is)

    def __len__(self):
        return len(self.states)


class EgoSampleBatch:
    """Feasible ego samples as arrays (samples x steps), in grid order."""

    FIELDS = ("s", "d", "v", "a", "d_rate")

    def __init__(self, arrays: dict[str, np.ndarray], length: float, width: float,
                 provenance: np.ndarray, coeffs_lon: np.ndarray, coeffs_lat: np.ndarray,
                 dt: float):
        self.arrays = arrays
        self.length = length
        self.width = width
        self.provenance = provenance
        self.coeffs_lon = coeffs_lon
        self.coeffs_lat = coeffs_lat
        self.dt = dt

    def __len__(self) -> int:
        return self.arrays["s"].shape[0]

    @property
    def n_steps(self) -> int:
        return self.arrays["s"].shape[1]

    def sample(self, i: int) -> TrajectorySample:
        a = self.arrays
        states = tuple(
            VehicleState(
                s=float(a["s"][i, t]), d=float(a["d"][i, t]), v=float(a["v"][i, t]),
                a=float(a["a"][i, t]), length=self.length, width=self.width,
                d_rate=float(a["d_rate"][i, t]),
            )
            for t in range(self.n_steps)
        )
        return TrajectorySample(states, provenance=tuple(int(x) for x in self.provenance[i]))

    def to_samples(self) -> list[TrajectorySample]:
        return [self.sample(i) for i in range(len(self))]


@dataclass(frozen=True)
class TrajectorySet:
    """Ego candidates plus the most-likely trajectories of the others."""

    ego: EgoSampleBatch
    others: Mapping[str, TrajectorySample]
    k: int
    dt: float


# ---------------------------------------------------------------------------
# Quintic connection


def quintic_connect(start: Sequence[float], end: Sequence[float], duration: float) -> np.ndarray:
    """Coefficients ``c0..c5`` of the quintic matching position, velocity,
    and acceleration at both ends.

    The first three coefficients follow directly from the start
    condition; the remaining three solve the 3x3 end-condition system
    (equivalent to the full 6x6 two-point Hermite system).
    """
    coeffs = _quintic_connect_batch(
        np.asarray(start, dtype=float)[None, :], np.asarray(end, dtype=float)[None, :], duration
    )
    return coeffs[0]


def _quintic_connect_batch(start: np.ndarray, end: np.ndarray, duration: float) -> np.ndarray:
    if duration <= 0:
        raise InputError(f"connection duration must be > 0, got {duration}")
    T = float(duration)
    p0, v0, a0 = start[:, 0], start[:, 1], start[:, 2]
    p1, v1, a1 = end[:, 0], end[:, 1], end[:, 2]
    c0, c1, c2 = p0, v0, 0.5 * a0
    b0 = p1 - (c0 + c1 * T + c2 * T**2)
    b1 = v1 - (c1 + 2.0 * c2 * T)
    b2 = a1 - 2.0 * c2
    mat = np.array([
        [T**3, T**4, T**5],
        [3 * T**2, 4 * T**3, 5 * T**4],
        [6 * T, 12 * T**2, 20 * T**3],
    ])
    tail = np.linalg.solve(mat, np.stack([b0, b1, b2]))
    return np.column_stack([c0, c1, c2, tail[0], tail[1], tail[2]])


def quintic_states(coeffs_lon: np.ndarray, coeffs_lat: np.ndarray, ts: np.ndarray) -> dict[str, np.ndarray]:
    """Evaluate longitudinal/lateral quintics into state arrays (n, len(ts))."""
    return {
        "s": _core.quintic_eval(coeffs_lon, ts, 0),
        "v": _core.quintic_eval(coeffs_lon, ts, 1),
        "a": _core.quintic_eval(coeffs_lon, ts, 2),
        "d": _core.quintic_eval(coeffs_lat, ts, 0),
        "d_rate": _core.quintic_eval(coeffs_lat, ts, 1),
    }


# ---------------------------------------------------------------------------
# Ego sampling


def _lateral_targets(ego: VehicleState, net: LaneNetwork, cfg: SamplerConfig) -> np.ndarray:
    if cfg.d_range is not None:
        lo, hi = cfg.d_range
    else:
        # reachable band: current center lane plus direct neighbors, minus body width
        center_ids = [
            lane_id for lane_id in net.lane_order
            if net.lane_band(lane_id, ego.s)[0] <= ego.d <= net.lane_band(lane_id, ego.s)[1]
        ]
        anchor = center_ids[0] if center_ids else min(
            net.lane_order, key=lambda lid: abs(float(net.lane_center(lid, ego.s)) - ego.d)
        )
        bands = [net.lane_band(lid, ego.s) for lid in net.adjacent_lane_ids(anchor)]
        lo = min(float(b[0]) for b in bands) + 0.5 * ego.width
        hi = max(float(b[1]) for b in bands) - 0.5 * ego.width
        if lo > hi:
            lo = hi = ego.d
    return np.linspace(lo, hi, cfg.n_d) if cfg.n_d > 1 else np.array([0.5 * (lo + hi)])


def _grid_1d(rng: tuple[float, float], n: int) -> np.ndarray:
    return np.linspace(rng[0], rng[1], n) if n > 1 else np.array([0.5 * (rng[0] + rng[1])])


def sample_ego_batch(joint: JointState, net: LaneNetwork, cfg: SamplerConfig) -> EgoSampleBatch:
    """Generate the feasible ego ensemble for the current joint state.

    Deterministic: the grid is fixed by the config, infeasible cells are
    removed, and the survivors keep grid order. The first state of every
    sample equals the query state exactly (all six boundary values).
    """
    ego = joint.ego
    T = cfg.horizon * cfg.dt
    ts = np.arange(cfg.horizon + 1) * cfg.dt
    dv = _grid_1d(cfg.dv_range, cfg.n_v)
    ds = _grid_1d(cfg.ds_range, cfg.n_s)
    d_t = _lateral_targets(ego, net, cfg)

    iv, idx_d, ixs = np.meshgrid(np.arange(cfg.n_v), np.arange(cfg.n_d), np.arange(cfg.n_s), indexing="ij")
    iv, idx_d, ixs = iv.ravel(), idx_d.ravel(), ixs.ravel()
    v_end = ego.v + dv[iv]
    # nominal travel at the mean of start/end speed, plus the gridded offset
    s_end = ego.s + 0.5 * (ego.v + v_end) * T + ds[ixs]
    d_end = d_t[idx_d]

    n = len(iv)
    start_lon = np.broadcast_to(np.array([ego.s, ego.v, ego.a]), (n, 3))
    end_lon = np.column_stack([s_end, v_end, np.zeros(n)])
    start_lat = np.broadcast_to(np.array([ego.d, ego.d_rate, 0.0]), (n, 3))
    end_lat = np.column_stack([d_end, np.zeros(n), np.zeros(n)])
    coeffs_lon = _quintic_connect_batch(start_lon, end_lon, T)
    coeffs_lat = _quintic_connect_batch(start_lat, end_lat, T)
    arrays = quintic_states(coeffs_lon, coeffs_lat, ts)
    # t = 0 evaluates to the leading coefficients; pin them bit-exactly anyway
    arrays["s"][:, 0] = ego.s
    arrays["v"][:, 0] = ego.v
    arrays["a"][:, 0] = ego.a
    arrays["d"][:, 0] = ego.d
    arrays["d_rate"][:, 0] = ego.d_rate

    keep = _feasible_mask(arrays, ego.width, cfg.limits, net)
    provenance = np.column_stack([iv, idx_d, ixs])[keep]
    arrays = {k: v[keep] for k, v in arrays.items()}
    return EgoSampleBatch(arrays, ego.length, ego.width, provenance,
                          coeffs_lon[keep], coeffs_lat[keep], cfg.dt)


def sample_ego_trajectories(joint: JointState, net: LaneNetwork, cfg: SamplerConfig) -> list[TrajectorySample]:
    """Feasible ego samples as explicit state sequences, in grid order."""
    return sample_ego_batch(joint, net, cfg).to_samples()


def _feasible_mask(arrays: dict[str, np.ndarray], width: float, limits: MotionLimits,
                   net: LaneNetwork | None) -> np.ndarray:
    ok = (
        (arrays["v"] >= limits.v_min) & (arrays["v"] <= limits.v_max)
        & (np.abs(arrays["a"]) <= limits.a_max)
        & (np.abs(arrays["d_rate"]) <= limits.d_rate_max)
    )
    if net is not None:
        bound_r, bound_l = net.road_band(arrays["s"])
        half = 0.5 * width
        ok &= (arrays["d"] - half >= bound_r) & (arrays["d"] + half <= bound_l)
    return ok.all(axis=1)


def check_feasibility(sample: TrajectorySample, limits: MotionLimits,
                      net: LaneNetwork | None = None) -> bool:
    """True iff every step satisfies the kinematic limits and, when a
    network is given, the footprint stays within the road boundaries."""
    from rulerob.predicates import StateBatch  # local import to avoid a cycle

    batch = StateBatch.from_states(sample.states)
    arrays = {f: getattr(batch, f) for f in ("s", "d", "v", "a", "d_rate")}
    width = float(np.max(batch.width))
    return bool(_feasible_mask({k: v[None, :] for k, v in arrays.items()}, width, limits, net)[0])


# ---------------------------------------------------------------------------
# Most-likely trajectories of other vehicles


def most_likely_trajectories(signal: Signal, k: int, horizon: int) -> dict[str, TrajectorySample]:
    """Recorded futures [k, k+h] of all other vehicles, used verbatim.

    No extrapolation: recordings that end before ``k + horizon`` raise
    an error naming every vehicle that falls short.
    """
    if k < 0 or k >= len(signal):
        raise InputError(f"step {k} outside signal of length {len(signal)}")
    if not signal.vehicle_ids:
        return {}
    if k + horizon >= len(signal):
        raise InputError(
            f"recording ends at step {len(signal) - 1}, before step {k + horizon}; "
            f"cannot predict vehicles {list(signal.vehicle_ids)}"
        )
    out = {}
    for vid in signal.vehicle_ids:
        states = tuple(signal.states[t].others[vid] for t in range(k, k + horizon + 1))
        out[vid] = TrajectorySample(states)
    return out
