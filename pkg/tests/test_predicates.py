"""Traffic-rule predicates: evaluation functions, features, rule formulas."""

import numpy as np
import pytest

from rulerob import stl
from rulerob.errors import InputError
from rulerob.predicates import (
    RuleParams,
    SignalLeafEvaluator,
    StateBatch,
    extract_features,
    in_same_lane,
    make_registry,
    relevant_vehicles,
    rule_formulas,
)
from rulerob.scenario import JointState, occupied_lanes
from scenariolib import constant_signal, random_joint_state, straight_net, vehicle

REGISTRY = make_registry(RuleParams(v_max=33.33))


def joint(ego, **others):
    return JointState(ego=ego, others=others)


# ---------------------------------------------------------------------------
# in_same_lane


def test_in_same_lane_overlapping_sets(net):
    # ego straddles lanes 1 and 2, the other drives centered in lane 2
    js = joint(vehicle(s=50, d=2.0, v=20), b1=vehicle(s=60, d=4.0, v=20))
    assert in_same_lane(js, net, "b1")
    assert REGISTRY["in_same_lane"].boolean(js, net, "b1")


def test_in_same_lane_disjoint(net):
    js = joint(vehicle(s=50, d=0.0, v=20), b1=vehicle(s=60, d=4.0, v=20))
    assert not in_same_lane(js, net, "b1")
    assert REGISTRY["in_same_lane"].alpha(js, net, "b1") < 0


def test_in_same_lane_both_straddling_shared_bound(net):
    js = joint(vehicle(s=50, d=2.0, v=20), b1=vehicle(s=60, d=2.0, v=20))
    lanes_ego, _ = occupied_lanes(net, js.ego)
    lanes_b, _ = occupied_lanes(net, js.others["b1"])
    assert lanes_ego & lanes_b == {1, 2}
    assert in_same_lane(js, net, "b1")


def test_in_same_lane_unknown_vehicle(net):
    js = joint(vehicle(s=50, d=0, v=20), b1=vehicle(s=60, d=0, v=20))
    with pytest.raises(InputError):
        REGISTRY["in_same_lane"].boolean(js, net, "b2")


def test_in_same_lane_symmetric(net):
    rng = np.random.default_rng(10)
    pred = REGISTRY["in_same_lane"]
    for _ in range(300):
        js = random_joint_state(rng, net)
        swapped = joint(js.others["b1"], b1=js.ego)
        assert pred.boolean(js, net, "b1") == pred.boolean(swapped, net, "b1")
        assert pred.alpha(js, net, "b1") == pytest.approx(pred.alpha(swapped, net, "b1"))


def test_in_same_lane_set_form_matches_sign_form(net):
    rng = np.random.default_rng(11)
    pred = REGISTRY["in_same_lane"]
    for _ in range(300):
        js = random_joint_state(rng, net)
        try:
            set_result = in_same_lane(js, net, "b1")
        except Exception:
            continue  # off-road states have no occupied-lane set
        assert set_result == pred.boolean(js, net, "b1")


# ---------------------------------------------------------------------------
# safe_distance


def test_safe_distance_worked_example(net):
    # equal speeds 20 m/s: required distance = 20 * 0.4 = 8 m
    # bodies 4.5 and 4.0 m; centers 14.25 m apart give a 10 m gap
    js = joint(vehicle(s=50, d=0, v=20, length=4.5),
               b1=vehicle(s=64.25, d=0, v=20, length=4.0))
    pred = REGISTRY["safe_distance"]
    assert pred.alpha(js, net, "b1") == pytest.approx(2.0)
    assert pred.boolean(js, net, "b1")


def test_safe_distance_boundary_is_satisfied(net):
    js = joint(vehicle(s=50, d=0, v=20, length=4.5),
               b1=vehicle(s=62.25, d=0, v=20, length=4.0))  # gap exactly 8 m
    pred = REGISTRY["safe_distance"]
    assert pred.alpha(js, net, "b1") == pytest.approx(0.0)
    assert pred.boolean(js, net, "b1")


def test_safe_distance_vacuous_when_behind(net):
    js = joint(vehicle(s=50, d=0, v=20), b1=vehicle(s=30, d=0, v=20))
    pred = REGISTRY["safe_distance"]
    assert pred.boolean(js, net, "b1")
    assert pred.alpha(js, net, "b1") > 0


def test_safe_distance_vacuous_in_other_lane(net):
    js = joint(vehicle(s=50, d=0, v=30), b1=vehicle(s=55, d=4.0, v=10))
    assert REGISTRY["safe_distance"].boolean(js, net, "b1")


def test_safe_distance_monotone_in_gap(net):
    rng = np.random.default_rng(12)
    pred = REGISTRY["safe_distance"]
    for _ in range(200):
        v_ego = float(rng.uniform(5, 35))
        v_b = float(rng.uniform(5, 35))
        gaps = np.sort(rng.uniform(0.5, 80.0, size=5))
        previous = None
        for gap in gaps:
            js = joint(vehicle(s=100, d=0, v=v_ego, length=4.0),
                       b1=vehicle(s=100 + gap + 4.0, d=0, v=v_b, length=4.0))
            value = pred.boolean(js, net, "b1")
            if previous is not None:
                assert value >= previous  # growing gap never flips sat -> unsat
            previous = value


# ---------------------------------------------------------------------------
# no_unnecessary_braking


def test_braking_without_reason_violates(net):
    js = joint(vehicle(s=50, d=0, v=20, a=-3.0))
    pred = REGISTRY["no_unnecessary_braking"]
    assert not pred.boolean(js, net)
    assert pred.alpha(js, net) == pytest.approx(-1.0)


def test_no_braking_is_fine(net):
    js = joint(vehicle(s=50, d=0, v=20, a=0.0))
    assert REGISTRY["no_unnecessary_braking"].boolean(js, net)


def test_braking_justified_by_close_leader(net):
    # leader closer than the safety margin: hard braking is justified
    js = joint(vehicle(s=50, d=0, v=20, a=-3.0, length=4.0),
               b1=vehicle(s=57, d=0, v=10, length=4.0))
    pred = REGISTRY["no_unnecessary_braking"]
    assert pred.boolean(js, net)
    assert pred.alpha(js, net) == pytest.approx(0.0)


# ---------------------------------------------------------------------------
# speed_limit


def test_speed_limit_cases(net):
    pred = REGISTRY["speed_limit"]
    assert pred.alpha(joint(vehicle(s=0, d=0, v=30)), net) == pytest.approx(3.33)
    assert pred.boolean(joint(vehicle(s=0, d=0, v=33.33)), net)
    js = joint(vehicle(s=0, d=0, v=40))
    assert pred.alpha(js, net) == pytest.approx(-6.67)
    assert not pred.boolean(js, net)


def test_speed_limit_requires_configured_limit(net):
    registry = make_registry(RuleParams(v_max=None))
    with pytest.raises(InputError):
        registry["speed_limit"].boolean(joint(vehicle(s=0, d=0, v=10)), net)


# ---------------------------------------------------------------------------
# Sign consistency and batch/scalar agreement


def test_sign_consistency_all_predicates(net):
    rng = np.random.default_rng(13)
    for _ in range(1000):
        js = random_joint_state(rng, net)
        for pred in REGISTRY:
            b = "b1" if pred.arity == 2 else None
            alpha = pred.alpha(js, net, b)
            if alpha != 0.0:
                assert (alpha > 0) == pred.boolean(js, net, b), pred.name


def test_batch_matches_scalar(net):
    rng = np.random.default_rng(14)
    joints = [random_joint_state(rng, net) for _ in range(64)]
    ego_batch = StateBatch.from_states([js.ego for js in joints])
    other_batch = {"b1": StateBatch.from_states([js.others["b1"] for js in joints])}
    for pred in REGISTRY:
        b = "b1" if pred.arity == 2 else None
        batch = pred.alpha_batch(ego_batch, other_batch, net, b)
        scalar = np.array([pred.alpha(js, net, b) for js in joints])
        np.testing.assert_array_equal(batch, scalar)


# ---------------------------------------------------------------------------
# Feature extraction


def test_features_centered_in_lane(net):
    # 4 m lane, centered: 2 m to each lane bound regardless of body width
    js = joint(vehicle(s=50, d=0, v=20, width=2.0))
    z = extract_features(REGISTRY["speed_limit"], js, net)
    names = REGISTRY["speed_limit"].feature_names
    by_name = dict(zip(names, z))
    assert by_name["ego_lane_left"] == pytest.approx(2.0)
    assert by_name["ego_lane_right"] == pytest.approx(2.0)
    assert by_name["ego_road_left"] == pytest.approx(6.0)
    assert by_name["ego_road_right"] == pytest.approx(6.0)


def test_features_identical_vehicles_zero_relatives(net):
    ego = vehicle(s=50, d=0.5, v=20)
    js = joint(ego, b1=vehicle(s=50, d=0.5, v=20))
    z = extract_features(REGISTRY["in_same_lane"], js, net, "b1")
    by_name = dict(zip(REGISTRY["in_same_lane"].feature_names, z))
    assert by_name["rel_s"] == 0.0
    assert by_name["rel_d"] == 0.0
    assert by_name["rel_v"] == 0.0


def test_characteristic_feature_matches_boolean(net):
    rng = np.random.default_rng(15)
    pred = REGISTRY["in_same_lane"]
    for _ in range(100):
        js = random_joint_state(rng, net)
        z = extract_features(pred, js, net, "b1")
        expected = 1.0 if pred.boolean(js, net, "b1") else -1.0
        assert z[0] == expected


def test_features_are_pure(net):
    rng = np.random.default_rng(16)
    js = random_joint_state(rng, net)
    pred = REGISTRY["safe_distance"]
    z1 = extract_features(pred, js, net, "b1")
    z2 = extract_features(pred, js, net, "b1")
    assert z1.tobytes() == z2.tobytes()


def test_features_require_other_for_pair_predicates(net):
    js = joint(vehicle(s=50, d=0, v=20))
    with pytest.raises(InputError):
        extract_features(REGISTRY["safe_distance"], js, net, None)


# ---------------------------------------------------------------------------
# Rule formulas


def test_rules_compliant_scenario_all_satisfied(net):
    signal = constant_signal({
        "ego": vehicle(s=100, d=0, v=20),
        "b1": vehicle(s=160, d=0, v=20),
    })
    leaves = SignalLeafEvaluator(REGISTRY, net, signal)
    for name, phi in rule_formulas(("b1",)).items():
        assert stl.eval_characteristic(phi, leaves, 0) == 1, name


def test_rules_gap_shrinking_below_safe_distance(net):
    # closing in on a slower leader: the gap drops below the required
    # distance partway through, so the safe-distance rule flips at the
    # violating steps while remaining satisfied before them
    # required distance at (30, 10) m/s is 12 + 40 = 52 m; start 60 m back
    signal = constant_signal({
        "ego": vehicle(s=100, d=0, v=30, length=4.0),
        "b1": vehicle(s=164, d=0, v=10, length=4.0),
    }, n_steps=50, dt=0.04)
    body = stl.Predicate("safe_distance", ("ego", "b1"))
    leaves = SignalLeafEvaluator(REGISTRY, net, signal)
    values = [stl.eval_characteristic(body, leaves, k) for k in range(50)]
    rule = rule_formulas(("b1",))["R_G1"]
    assert stl.eval_characteristic(rule, leaves, 0) == -1
    assert values[0] == 1 and values[-1] == -1
    flip = values.index(-1)
    assert all(v == 1 for v in values[:flip])
    assert all(v == -1 for v in values[flip:])


def test_rules_overspeed_violates_speed_limit(net):
    signal = constant_signal({"ego": vehicle(s=100, d=0, v=40)})
    leaves = SignalLeafEvaluator(REGISTRY, net, signal)
    rules = rule_formulas(())
    assert stl.eval_characteristic(rules["R_G3"], leaves, 0) == -1
    assert "R_G1" not in rules  # no other vehicles to keep distance to


def test_relevant_vehicles_sensor_range(net):
    js = joint(vehicle(s=100, d=0, v=20),
               b1=vehicle(s=150, d=0, v=20), b2=vehicle(s=900, d=0, v=20))
    assert relevant_vehicles(js, REGISTRY.params) == ("b1",)
