"""Traffic-rule predicates: Boolean and quantitative evaluation, features.

Every predicate is defined by one vectorized evaluation function; its
Boolean value is the sign test ``alpha >= 0`` (boundary counts as
satisfied). The registry binds the rule constants once at construction;
evaluations are pure and safe to run concurrently.

Registered predicates
---------------------
``in_same_lane(ego, b)``
    Footprints of ego and ``b`` overlap at least one common lane.
``safe_distance(ego, b)``
    When ``b`` drives ahead of ego in a shared lane, the
    bumper-to-bumper gap is at least the reaction-plus-braking distance;
    vacuously satisfied otherwise.
``no_unnecessary_braking(ego)``
    Ego does not brake harder than the comfort threshold unless some
    leading vehicle is closer than the safety margin.
``speed_limit(ego)``
    Ego's longitudinal speed does not exceed the configured limit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Mapping, Sequence

import numpy as np

from rulerob import stl
from rulerob.errors import InputError
from rulerob.scenario import (
    JointState,
    LaneNetwork,
    Signal,
    VehicleState,
    lane_penetration,
    occupied_lanes,
)


@dataclass(frozen=True)
class RuleParams:
    """Constants of the interstate rules; overridable via config ``rules.*``."""

    a_min: float = 10.0        # assumed braking capability of both vehicles, m/s^2 (magnitude)
    t_react: float = 0.4       # reaction time, s
    v_max: float | None = None  # speed limit, m/s; must be declared to use speed_limit
    a_brake: float = -2.0      # braking threshold below which deceleration needs a reason
    mu: float = 1.2            # margin factor on the safe distance when judging braking
    sensor_range: float = 100.0  # only vehicles within this distance are rule-relevant


@dataclass(frozen=True)
class StateBatch:
    """Struct-of-arrays view of vehicle states; fields broadcast together."""

    s: np.ndarray
    d: np.ndarray
    v: np.ndarray
    a: np.ndarray
    d_rate: np.ndarray
    length: np.ndarray
    width: np.ndarray

    @classmethod
    def from_state(cls, st: VehicleState) -> "StateBatch":
        return cls(*(np.float64(x) for x in (st.s, st.d, st.v, st.a, st.d_rate, st.length, st.width)))

    @classmethod
    def from_states(cls, states: Sequence[VehicleState]) -> "StateBatch":
        cols = [(st.s, st.d, st.v, st.a, st.d_rate, st.length, st.width) for st in states]
        arr = np.asarray(cols, dtype=float).T
        return cls(*arr)


AlphaBatchFn = Callable[[StateBatch, Mapping[str, StateBatch], LaneNetwork, str | None], np.ndarray]


@dataclass(frozen=True)
class PredicateDef:
    """A registered predicate: name, arity, evaluation, feature schema."""

    name: str
    arity: int  # 1 = ego-only, 2 = ego + one other vehicle
    alpha_batch: AlphaBatchFn
    feature_names: tuple[str, ...]

    def _check_args(self, joint: JointState, b: str | None):
        if self.arity == 2 and b is None:
            raise InputError(f"predicate {self.name!r} needs an other-vehicle argument")
        if b is not None and b not in joint.others:
            raise InputError(f"unknown vehicle id {b!r}")

    def alpha(self, joint: JointState, net: LaneNetwork, b: str | None = None) -> float:
        """Quantitative evaluation at one joint state."""
        self._check_args(joint, b)
        others = {vid: StateBatch.from_state(st) for vid, st in joint.others.items()}
        return float(self.alpha_batch(StateBatch.from_state(joint.ego), others, net, b))

    def boolean(self, joint: JointState, net: LaneNetwork, b: str | None = None) -> bool:
        """Boolean evaluation; satisfied iff the evaluation function is >= 0."""
        return self.alpha(joint, net, b) >= 0.0

    def boolean_batch(self, ego: StateBatch, others, net, b=None) -> np.ndarray:
        return self.alpha_batch(ego, others, net, b) >= 0.0


# ---------------------------------------------------------------------------
# Predicate evaluation functions


def _lateral_interval(x: StateBatch):
    half = 0.5 * x.width
    return x.d - half, x.d + half


def _shared_lane_depth(ego: StateBatch, other: StateBatch, net: LaneNetwork) -> np.ndarray:
    """max over lanes of min(ego penetration, other penetration); >= 0 iff a lane is shared."""
    e_lo, e_hi = _lateral_interval(ego)
    b_lo, b_hi = _lateral_interval(other)
    depth = None
    for lane_id in net.lane_order:
        pen_e = lane_penetration(net, lane_id, ego.s, e_lo, e_hi)
        pen_b = lane_penetration(net, lane_id, other.s, b_lo, b_hi)
        cand = np.minimum(pen_e, pen_b)
        depth = cand if depth is None else np.maximum(depth, cand)
    return depth


def _bumper_gap(ego: StateBatch, other: StateBatch) -> np.ndarray:
    return (other.s - 0.5 * other.length) - (ego.s + 0.5 * ego.length)


def _safe_distance_required(v_ego, v_other, params: RuleParams):
    braking = 1.0 / (2.0 * abs(params.a_min))
    return np.maximum(0.0, v_ego * params.t_react + v_ego**2 * braking - v_other**2 * braking)


def in_same_lane(joint: JointState, net: LaneNetwork, b: str) -> bool:
    """Spec-level set form: ego and ``b`` occupy at least one common lane."""
    if b not in joint.others:
        raise InputError(f"unknown vehicle id {b!r}")
    lanes_ego, _ = occupied_lanes(net, joint.ego)
    lanes_b, _ = occupied_lanes(net, joint.others[b])
    return len(lanes_ego & lanes_b) > 0


def make_registry(params: RuleParams) -> "PredicateRegistry":
    """Build the predicate registry with the rule constants bound."""

    def alpha_in_same_lane(ego, others, net, b):
        return _shared_lane_depth(ego, others[b], net)

    def alpha_safe_distance(ego, others, net, b):
        other = others[b]
        same_lane = _shared_lane_depth(ego, other, net) >= 0.0
        in_front = other.s > ego.s
        margin = _bumper_gap(ego, other) - _safe_distance_required(ego.v, other.v, params)
        return np.where(same_lane & in_front, margin, 1.0)

    def alpha_no_unnecessary_braking(ego, others, net, b):
        base = ego.a - params.a_brake
        justified = np.zeros(np.shape(base), dtype=bool)
        for other in others.values():
            same_lane = _shared_lane_depth(ego, other, net) >= 0.0
            in_front = other.s > ego.s
            close = _bumper_gap(ego, other) < params.mu * _safe_distance_required(ego.v, other.v, params)
            justified |= same_lane & in_front & close
        return np.where(justified, np.maximum(base, 0.0), base)

    def alpha_speed_limit(ego, others, net, b):
        if params.v_max is None:
            raise InputError("speed_limit requires rules.v_max to be declared")
        return params.v_max - ego.v

    defs = [
        PredicateDef("in_same_lane", 2, alpha_in_same_lane, PAIR_FEATURES),
        PredicateDef("safe_distance", 2, alpha_safe_distance, PAIR_FEATURES),
        PredicateDef("no_unnecessary_braking", 1, alpha_no_unnecessary_braking, EGO_FEATURES),
        PredicateDef("speed_limit", 1, alpha_speed_limit, EGO_FEATURES),
    ]
    return PredicateRegistry(defs, params)


class PredicateRegistry:
    """Name-addressable predicate definitions plus the bound constants."""

    def __init__(self, defs: Sequence[PredicateDef], params: RuleParams):
        self._defs = MappingProxyType({d.name: d for d in defs})
        self.params = params

    def __getitem__(self, name: str) -> PredicateDef:
        try:
            return self._defs[name]
        except KeyError:
            raise InputError(f"unknown predicate {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._defs

    def __iter__(self):
        return iter(self._defs.values())

    @property
    def arities(self) -> dict[str, int]:
        """Mapping accepted by :func:`rulerob.stl.parse_formula`."""
        return {name: d.arity for name, d in self._defs.items()}


# ---------------------------------------------------------------------------
# Feature extraction (inputs of the robustness surrogate)

EGO_FEATURES: tuple[str, ...] = (
    "characteristic",
    "ego_length", "ego_width",
    "ego_s", "ego_d", "ego_v", "ego_a",
    "ego_input_a", "ego_input_d_rate",
    "ego_lane_left", "ego_lane_right",
    "ego_road_left", "ego_road_right",
)

PAIR_FEATURES: tuple[str, ...] = EGO_FEATURES + (
    "other_length", "other_width",
    "other_s", "other_d", "other_v", "other_a",
    "other_lane_left", "other_lane_right",
    "other_road_left", "other_road_right",
    "rel_s", "rel_d", "rel_v",
)


def _center_lane_distances(net: LaneNetwork, st: VehicleState) -> tuple[float, float]:
    """Signed distances from the vehicle center to its lane's left/right bound.

    The lane is the one containing the center point; if the center sits
    on a shared bound the first lane in file order wins, and if it is
    outside every lane the nearest band is used (distances then carry a
    negative sign on the far side).
    """
    best = None
    for lane_id in net.lane_order:
        lo, hi = net.lane_band(lane_id, st.s)
        if lo <= st.d <= hi:
            return float(hi - st.d), float(st.d - lo)
        gap = min(abs(st.d - lo), abs(st.d - hi))
        if best is None or gap < best[0]:
            best = (gap, float(hi - st.d), float(st.d - lo))
    return best[1], best[2]


def _vehicle_feature_block(net: LaneNetwork, st: VehicleState, with_input: bool) -> list[float]:
    lane_left, lane_right = _center_lane_distances(net, st)
    bound_right, bound_left = net.road_band(st.s)
    block = [st.length, st.width, st.s, st.d, st.v, st.a]
    if with_input:
        block += [st.a, st.d_rate]
    block += [lane_left, lane_right, float(bound_left - st.d), float(st.d - bound_right)]
    return block


def extract_features(
    pred: PredicateDef, joint: JointState, net: LaneNetwork, b: str | None = None
) -> np.ndarray:
    """Deterministic feature vector in the order of ``pred.feature_names``."""
    pred._check_args(joint, b)
    c = 1.0 if pred.boolean(joint, net, b) else -1.0
    feats = [c] + _vehicle_feature_block(net, joint.ego, with_input=True)
    if pred.arity == 2:
        other = joint.others[b]
        feats += _vehicle_feature_block(net, other, with_input=False)
        feats += [other.s - joint.ego.s, other.d - joint.ego.d, other.v - joint.ego.v]
    out = np.asarray(feats, dtype=float)
    assert out.shape == (len(pred.feature_names),)
    return out


# ---------------------------------------------------------------------------
# Rule formulas and the STL leaf adapter


def relevant_vehicles(joint: JointState, params: RuleParams) -> tuple[str, ...]:
    """Other vehicles within sensor range of the ego vehicle."""
    out = []
    for vid in sorted(joint.others):
        st = joint.others[vid]
        if np.hypot(st.s - joint.ego.s, st.d - joint.ego.d) <= params.sensor_range:
            out.append(vid)
    return tuple(out)


def rule_formulas(other_ids: Sequence[str]) -> dict[str, stl.Formula]:
    """Named interstate-rule formulas over the whole evaluation window.

    The safe-distance rule quantifies over the given vehicles by
    conjunction and is omitted when there are none. These are simplified
    analogs of the published interstate rules, not verbatim
    formalizations.
    """
    rules: dict[str, stl.Formula] = {}
    unbounded = stl.StepInterval(0, None)
    if other_ids:
        body: stl.Formula = stl.Predicate("safe_distance", ("ego", other_ids[0]))
        for vid in other_ids[1:]:
            body = stl.And(body, stl.Predicate("safe_distance", ("ego", vid)))
        rules["R_G1"] = stl.Globally(unbounded, body)
    rules["R_G2"] = stl.Globally(unbounded, stl.Predicate("no_unnecessary_braking", ("ego",)))
    rules["R_G3"] = stl.Globally(unbounded, stl.Predicate("speed_limit", ("ego",)))
    return rules


def rule_bodies(other_ids: Sequence[str]) -> dict[str, stl.Formula]:
    """The per-step bodies of :func:`rule_formulas` (for robustness profiles)."""
    return {name: phi.child for name, phi in rule_formulas(other_ids).items()}


class SignalLeafEvaluator:
    """Adapter feeding registry predicates into the STL recursion."""

    def __init__(self, registry: PredicateRegistry, net: LaneNetwork, signal: Signal):
        self.registry = registry
        self.net = net
        self.signal = signal

    def _resolve(self, name: str, args: tuple[str, ...]):
        pred = self.registry[name]
        if len(args) != pred.arity or (args and args[0] != "ego"):
            raise InputError(
                f"predicate {name!r} expects (ego{', b' if pred.arity == 2 else ''}), got {args}"
            )
        return pred, (args[1] if pred.arity == 2 else None)

    def boolean(self, name, args, k):
        pred, b = self._resolve(name, args)
        return pred.boolean(self.signal.states[k], self.net, b)

    def alpha(self, name, args, k):
        pred, b = self._resolve(name, args)
        return pred.alpha(self.signal.states[k], self.net, b)

    def __len__(self):
        return len(self.signal)
