"""Shared scenario builders for the test suite."""

from __future__ import annotations

import numpy as np

from rulerob.predicates import RuleParams, make_registry
from rulerob.scenario import JointState, Lane, LaneNetwork, Signal, VehicleState

LANE_WIDTH = 4.0


def straight_net(length: float = 3000.0, lane_width: float = LANE_WIDTH) -> LaneNetwork:
    """Three parallel straight lanes; reference path is the middle lane."""
    def line(y):
        return [[0.0, y], [length, y]]

    lanes = [
        Lane(1, line(0.0), lane_width, left=2, right=3),
        Lane(2, line(lane_width), lane_width, right=1),
        Lane(3, line(-lane_width), lane_width, left=1),
    ]
    return LaneNetwork(lanes, line(1.5 * lane_width), line(-1.5 * lane_width))


def vehicle(s, d, v, a=0.0, length=4.5, width=1.8, d_rate=0.0) -> VehicleState:
    return VehicleState(s=s, d=d, v=v, a=a, length=length, width=width, d_rate=d_rate)


def constant_signal(
    vehicles: dict[str, VehicleState], n_steps: int = 60, dt: float = 0.04
) -> Signal:
    """Signal where every vehicle rolls forward at constant speed and lateral rate."""
    states = []
    for k in range(n_steps):
        t = k * dt

        def roll(st: VehicleState) -> VehicleState:
            return VehicleState(
                s=st.s + st.v * t + 0.5 * st.a * t * t, d=st.d + st.d_rate * t,
                v=st.v + st.a * t, a=st.a, length=st.length, width=st.width,
                d_rate=st.d_rate,
            )

        states.append(JointState(
            ego=roll(vehicles["ego"]),
            others={vid: roll(st) for vid, st in vehicles.items() if vid != "ego"},
        ))
    return Signal(tuple(states), dt)


def default_registry(v_max: float = 33.33):
    return make_registry(RuleParams(v_max=v_max))


def random_joint_state(rng: np.random.Generator, net: LaneNetwork) -> JointState:
    """A randomized two-vehicle joint state on the straight test road."""
    def rand_vehicle(s_lo, s_hi):
        return VehicleState(
            s=float(rng.uniform(s_lo, s_hi)),
            d=float(rng.uniform(-5.0, 5.0)),
            v=float(rng.uniform(0.0, 40.0)),
            a=float(rng.uniform(-4.0, 3.0)),
            length=float(rng.uniform(3.5, 5.5)),
            width=float(rng.uniform(1.6, 2.2)),
            d_rate=float(rng.uniform(-1.0, 1.0)),
        )

    ego = rand_vehicle(100.0, 200.0)
    b1 = rand_vehicle(ego.s - 60.0, ego.s + 60.0)
    return JointState(ego=ego, others={"b1": b1})


def random_follow_signal(
    rng: np.random.Generator,
    n_steps: int = 60,
    dt: float = 0.04,
    allow_violation: bool = True,
) -> Signal:
    """Randomized two-vehicle following scenario (constant rates)."""
    ego_v = float(rng.uniform(8.0, 36.0))
    gap = float(rng.uniform(2.0, 60.0)) if allow_violation else float(rng.uniform(40.0, 80.0))
    lead_v = float(rng.uniform(max(ego_v - 12.0, 1.0), ego_v + 6.0))
    ego = vehicle(s=100.0, d=float(rng.uniform(-1.5, 1.5)), v=ego_v,
                  a=float(rng.uniform(-3.0, 1.0)))
    b1 = vehicle(s=100.0 + gap, d=float(rng.uniform(-2.5, 2.5)), v=lead_v)
    return constant_signal({"ego": ego, "b1": b1}, n_steps=n_steps, dt=dt)
