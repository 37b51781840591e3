"""Rule-aware sampling-based trajectory planner.

Candidates come from the same state-space grid as the prediction
sampler, evaluated at the planning step size. Each collision-free
candidate is scored by a performance cost (integrated squared jerk,
terminal-speed deviation, integrated lateral offset, time) minus a
weighted rule-robustness reward, and the cheapest candidate wins. The
robustness term evaluates the interstate-rule formulas over the planned
trajectory with predicate leaves scored either by the trained surrogate
(fast, the default) or by the exact pipeline (validation runs).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np

from rulerob import stl
from rulerob.errors import InputError, NoCollisionFreeSampleError
from rulerob.gpr import GPModel, predict_robustness
from rulerob.mpr import NormalizationConstants, compute_mpr
from rulerob.predicates import PredicateRegistry, relevant_vehicles, rule_bodies, rule_formulas
from rulerob.sampler import (
    EgoSampleBatch,
    MotionLimits,
    SamplerConfig,
    TrajectorySample,
    sample_ego_batch,
)
from rulerob.scenario import JointState, LaneNetwork, Signal, VehicleState


@dataclass(frozen=True)
class CostWeights:
    jerk: float = 1.0
    terminal_speed: float = 1.0
    lateral: float = 0.1
    time: float = 0.0


@dataclass(frozen=True)
class PlannerConfig:
    """Candidate grid, horizon, and cost weights of the planner."""

    dt: float = 0.2
    horizon: int = 30
    n_v: int = 10
    n_d: int = 9
    n_s: int = 5  # 10 * 9 * 5 = 450 candidates
    dv_range: tuple[float, float] = (-6.0, 6.0)
    ds_range: tuple[float, float] = (-10.0, 10.0)
    d_range: tuple[float, float] | None = None
    lambda_r: float = 1.0
    weights: CostWeights = field(default_factory=CostWeights)
    target_speed: float | None = None  # None: hold the current speed
    target_d: float | None = None      # None: center of the current lane
    limits: MotionLimits = field(default_factory=MotionLimits)

    def __post_init__(self):
        if self.dt <= 0 or self.horizon < 1:
            raise InputError(f"planner needs dt > 0 and horizon >= 1, got {self.dt}, {self.horizon}")
        if self.lambda_r < 0:
            raise InputError(f"robustness weight must be >= 0, got {self.lambda_r}")

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(
            horizon=self.horizon, dt=self.dt, n_v=self.n_v, n_d=self.n_d, n_s=self.n_s,
            dv_range=self.dv_range, ds_range=self.ds_range, d_range=self.d_range,
            limits=self.limits,
        )


# ---------------------------------------------------------------------------
# Performance cost


def _poly_sq_integral(coeffs: np.ndarray, duration: float) -> np.ndarray:
    """Closed-form integral of squared polynomials over [0, duration].

    For rows ``c`` of coefficients, returns ``c^T H c`` with
    ``H[i, j] = T^(i+j+1) / (i+j+1)``.
    """
    m = coeffs.shape[1]
    i = np.arange(m)
    powers = i[:, None] + i[None, :] + 1
    H = duration**powers / powers
    return np.einsum("ni,ij,nj->n", coeffs, H, coeffs)


def _jerk_coeffs(coeffs: np.ndarray) -> np.ndarray:
    return np.column_stack([6.0 * coeffs[:, 3], 24.0 * coeffs[:, 4], 60.0 * coeffs[:, 5]])


def performance_cost_batch(batch: EgoSampleBatch, cfg: PlannerConfig,
                           target_speed: float, target_d: float) -> np.ndarray:
    """Performance cost of every candidate (vectorized)."""
    T = cfg.horizon * cfg.dt
    w = cfg.weights
    jerk = (_poly_sq_integral(_jerk_coeffs(batch.coeffs_lon), T)
            + _poly_sq_integral(_jerk_coeffs(batch.coeffs_lat), T))
    v_end = batch.arrays["v"][:, -1]
    lat = batch.coeffs_lat.copy()
    lat[:, 0] -= target_d
    return (w.jerk * jerk
            + w.terminal_speed * (v_end - target_speed) ** 2
            + w.lateral * _poly_sq_integral(lat, T)
            + w.time * T)


def performance_cost(sample: TrajectorySample, cfg: PlannerConfig, *,
                     coeffs_lon: np.ndarray, coeffs_lat: np.ndarray,
                     target_speed: float, target_d: float) -> float:
    """Performance cost of a single candidate (see :func:`performance_cost_batch`)."""
    batch_like = EgoSampleBatch(
        arrays={"v": np.array([[st.v for st in sample.states]])},
        length=sample.states[0].length, width=sample.states[0].width,
        provenance=np.zeros((1, 3), dtype=int),
        coeffs_lon=coeffs_lon[None, :], coeffs_lat=coeffs_lat[None, :], dt=cfg.dt,
    )
    return float(performance_cost_batch(batch_like, cfg, target_speed, target_d)[0])


# ---------------------------------------------------------------------------
# Collision checking (separating axes on oriented rectangles)


def _rect_corners(frame, s: np.ndarray, d: np.ndarray, length: float, width: float) -> np.ndarray:
    """Corners (..., 4, 2) of footprints centered at (s, d), heading along the path."""
    centers = frame.to_cartesian_many(s, d)
    tangents = frame.tangents_many(s)
    normals = np.stack([-tangents[..., 1], tangents[..., 0]], axis=-1)
    lon = 0.5 * length * tangents
    lat = 0.5 * width * normals
    return np.stack([
        centers + lon + lat, centers + lon - lat,
        centers - lon - lat, centers - lon + lat,
    ], axis=-2)


def _rects_disjoint(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorized separating-axis test for corner arrays (..., 4, 2)."""
    axes = np.concatenate([
        a[..., 1, :] - a[..., 0, :], a[..., 2, :] - a[..., 1, :],
        b[..., 1, :] - b[..., 0, :], b[..., 2, :] - b[..., 1, :],
    ], axis=-1).reshape(*a.shape[:-2], 4, 2)
    proj_a = np.einsum("...ce,...ae->...ac", a, axes)
    proj_b = np.einsum("...ce,...ae->...ac", b, axes)
    separated = (proj_a.max(-1) < proj_b.min(-1)) | (proj_b.max(-1) < proj_a.min(-1))
    return separated.any(axis=-1)


def collision_free_mask(batch: EgoSampleBatch, others: Mapping[str, Sequence[VehicleState]],
                        net: LaneNetwork) -> np.ndarray:
    """Per-candidate flag: footprint disjoint from every other vehicle at every step."""
    n, steps = batch.arrays["s"].shape
    ok = np.ones(n, dtype=bool)
    other_corners = {
        vid: _rect_corners(net.frame,
                           np.array([st.s for st in states]), np.array([st.d for st in states]),
                           states[0].length, states[0].width)
        for vid, states in others.items()
    }
    for i in range(n):
        ego_c = _rect_corners(net.frame, batch.arrays["s"][i], batch.arrays["d"][i],
                              batch.length, batch.width)
        for corners in other_corners.values():
            if not _rects_disjoint(ego_c, corners).all():
                ok[i] = False
                break
    return ok


def collision_free(sample: TrajectorySample, others: Mapping[str, Sequence[VehicleState]],
                   net: LaneNetwork) -> bool:
    """True iff the candidate's footprint never intersects another vehicle."""
    for vid, states in others.items():
        if len(states) != len(sample.states):
            raise InputError(f"vehicle {vid!r} trajectory length differs from the sample")
        ego_c = _rect_corners(net.frame,
                              np.array([st.s for st in sample.states]),
                              np.array([st.d for st in sample.states]),
                              sample.states[0].length, sample.states[0].width)
        corners = _rect_corners(net.frame,
                                np.array([st.s for st in states]),
                                np.array([st.d for st in states]),
                                states[0].length, states[0].width)
        if not _rects_disjoint(ego_c, corners).all():
            return False
    return True


# ---------------------------------------------------------------------------
# Robustness scoring of rule formulas over a planned trajectory


class RobustnessScorer(Protocol):
    """Scores a predicate leaf on a planned signal at one step."""

    #: extra steps of other-vehicle data needed beyond the planning window
    extension_steps: int

    def leaf(self, name: str, args: tuple[str, ...], signal: Signal, k: int) -> tuple[float, float]:
        """Return (robustness, deviation) of the named predicate."""
        ...


class GPScorer:
    """Leaf scoring through trained surrogate models (fast path)."""

    extension_steps = 0

    def __init__(self, models: Mapping[str, GPModel], registry: PredicateRegistry,
                 net: LaneNetwork):
        self.models = dict(models)
        self.registry = registry
        self.net = net

    def leaf(self, name, args, signal, k):
        if name not in self.models:
            raise InputError(f"no trained model for predicate {name!r}")
        b = args[1] if len(args) > 1 else None
        return predict_robustness(self.models[name], self.registry, self.net, signal, k, b)


class ExactScorer:
    """Leaf scoring through the exact pipeline (validation path)."""

    def __init__(self, norms: Mapping[str, NormalizationConstants],
                 registry: PredicateRegistry, net: LaneNetwork, mpr_cfg: SamplerConfig):
        self.norms = dict(norms)
        self.registry = registry
        self.net = net
        self.mpr_cfg = mpr_cfg
        self.extension_steps = mpr_cfg.horizon

    def leaf(self, name, args, signal, k):
        if name not in self.norms:
            raise InputError(f"no calibration constants for predicate {name!r}")
        b = args[1] if len(args) > 1 else None
        result = compute_mpr(self.registry[name], self.net, signal, k,
                             self.mpr_cfg, self.norms[name], b)
        return result.rho, 0.0


class _ScorerLeaves:
    """stl.LeafEvaluator view of a scorer over a planned signal window."""

    def __init__(self, scorer: RobustnessScorer, registry: PredicateRegistry,
                 net: LaneNetwork, signal: Signal, window: int):
        self.scorer = scorer
        self.registry = registry
        self.net = net
        self.signal = signal
        self.window = window
        self.cache: dict[tuple, tuple[float, float]] = {}

    def alpha(self, name, args, k):
        key = (name, args, k)
        if key not in self.cache:
            self.cache[key] = self.scorer.leaf(name, args, self.signal, k)
        return self.cache[key][0]

    def boolean(self, name, args, k):
        b = args[1] if len(args) > 1 else None
        return self.registry[name].boolean(self.signal.states[k], self.net, b)

    def __len__(self):
        return self.window

    def sigma_at(self, k: int) -> float:
        """Deviation of the lowest-scoring cached leaf at step ``k``."""
        entries = [v for (n, a, kk), v in self.cache.items() if kk == k]
        if not entries:
            return 0.0
        return min(entries, key=lambda rv: rv[0])[1]


def rule_robustness_cost(
    planned: Signal,
    window: int,
    rules: Mapping[str, stl.Formula],
    scorer: RobustnessScorer,
    registry: PredicateRegistry,
    net: LaneNetwork,
) -> tuple[float, dict[str, float]]:
    """Sum (and per-rule breakdown) of rule robustness over the window.

    Predicate leaves are scored by the scorer; operators combine through
    the model-free max/min recursion.
    """
    per_rule = {}
    for name, phi in rules.items():
        leaves = _ScorerLeaves(scorer, registry, net, planned, window)
        per_rule[name] = stl.eval_robustness(phi, leaves, 0)
    return sum(per_rule.values()), per_rule


def rule_profiles(
    planned: Signal,
    window: int,
    bodies: Mapping[str, stl.Formula],
    scorer: RobustnessScorer,
    registry: PredicateRegistry,
    net: LaneNetwork,
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-step robustness (and deviation) of each rule body."""
    out = {}
    for name, body in bodies.items():
        leaves = _ScorerLeaves(scorer, registry, net, planned, window)
        rho = np.array([stl.eval_robustness(body, leaves, k) for k in range(window)])
        sigma = np.array([leaves.sigma_at(k) for k in range(window)])
        out[name] = (rho, sigma)
    return out


# ---------------------------------------------------------------------------
# Planning


@dataclass
class PlanResult:
    sample: TrajectorySample
    index: int
    planned_signal: Signal
    j_p: np.ndarray
    j_r: np.ndarray
    collision_free: np.ndarray
    total_cost: float
    rule_values: dict[str, float]
    profiles: dict[str, tuple[np.ndarray, np.ndarray]]
    lambda_r: float


def select_best(j_p: np.ndarray, j_r: np.ndarray, mask: np.ndarray, lambda_r: float) -> int:
    """Index minimizing ``j_p - lambda_r * j_r`` among unmasked candidates.

    Ties break to the earliest grid index (np.argmin semantics).
    """
    if not mask.any():
        raise NoCollisionFreeSampleError("no collision-free candidate to select from")
    cost = np.where(mask, j_p - lambda_r * j_r, np.inf)
    return int(np.argmin(cost))


def _resample_others(signal: Signal, k: int, stride: int, n_steps: int) -> dict[str, list[VehicleState]]:
    last = k + (n_steps - 1) * stride
    if last >= len(signal):
        raise InputError(
            f"recording ends at step {len(signal) - 1}, planner needs step {last}"
        )
    return {
        vid: [signal.states[k + t * stride].others[vid] for t in range(n_steps)]
        for vid in signal.vehicle_ids
    }


def _extend_ego(states: list[VehicleState], extra: int, dt: float) -> list[VehicleState]:
    out = list(states)
    for _ in range(extra):
        last = out[-1]
        out.append(VehicleState(
            s=last.s + last.v * dt, d=last.d, v=last.v, a=0.0,
            length=last.length, width=last.width, d_rate=0.0,
        ))
    return out


def build_planned_signal(
    ego_states: Sequence[VehicleState],
    signal: Signal,
    k: int,
    stride: int,
    dt_plan: float,
    extension: int,
) -> Signal:
    """Planned ego states merged with resampled recorded others.

    The signal is extended by ``extension`` steps beyond the planning
    window for downstream prediction horizons: other vehicles keep their
    recorded states, the ego continues at constant speed (the exact
    scorer only reads the ego state inside the window).
    """
    n_total = len(ego_states) + extension
    others = _resample_others(signal, k, stride, n_total)
    ego_all = _extend_ego(list(ego_states), extension, dt_plan)
    joints = [
        JointState(ego=ego_all[t], others={vid: states[t] for vid, states in others.items()})
        for t in range(n_total)
    ]
    return Signal(tuple(joints), dt_plan)


def plan_trajectory(
    net: LaneNetwork,
    signal: Signal,
    k: int,
    cfg: PlannerConfig,
    scorer: RobustnessScorer,
    registry: PredicateRegistry,
) -> PlanResult:
    """Pick the cheapest collision-free candidate under the combined cost.

    Deterministic: the candidate grid, the costs, and the tie-break are
    all fixed by the inputs. Raises
    :class:`NoCollisionFreeSampleError` (with diagnostics of the best
    infeasible candidate) when every candidate collides.
    """
    if not 0 <= k < len(signal):
        raise InputError(f"step {k} outside signal of length {len(signal)}")
    stride_f = cfg.dt / signal.dt
    stride = round(stride_f)
    if stride < 1 or abs(stride * signal.dt - cfg.dt) > 1e-9:
        raise InputError(
            f"planner step {cfg.dt}s is not an integer multiple of the signal step {signal.dt}s"
        )
    joint = signal.states[k]
    batch = sample_ego_batch(joint, net, cfg.sampler_config())
    if len(batch) == 0:
        raise NoCollisionFreeSampleError("no kinematically feasible candidate", {"n_candidates": 0})

    window = cfg.horizon + 1
    others_window = _resample_others(signal, k, stride, window)
    mask = collision_free_mask(batch, others_window, net)

    target_speed = cfg.target_speed if cfg.target_speed is not None else joint.ego.v
    if cfg.target_d is not None:
        target_d = cfg.target_d
    else:
        center_ids = [lid for lid in net.lane_order
                      if net.lane_band(lid, joint.ego.s)[0] <= joint.ego.d <= net.lane_band(lid, joint.ego.s)[1]]
        anchor = center_ids[0] if center_ids else min(
            net.lane_order, key=lambda lid: abs(float(net.lane_center(lid, joint.ego.s)) - joint.ego.d))
        target_d = float(net.lane_center(anchor, joint.ego.s))

    j_p = performance_cost_batch(batch, cfg, target_speed, target_d)
    if not mask.any():
        best_infeasible = int(np.argmin(j_p))
        raise NoCollisionFreeSampleError(
            "every candidate collides with another vehicle",
            {"n_candidates": len(batch), "best_infeasible_index": best_infeasible,
             "best_infeasible_cost": float(j_p[best_infeasible])},
        )

    vehicle_ids = relevant_vehicles(joint, registry.params)
    rules = rule_formulas(vehicle_ids)
    j_r = np.zeros(len(batch))
    rule_values_all: dict[int, dict[str, float]] = {}
    for i in np.flatnonzero(mask):
        planned = build_planned_signal(batch.sample(i).states, signal, k, stride,
                                       cfg.dt, scorer.extension_steps)
        j_r[i], rule_values_all[i] = rule_robustness_cost(
            planned, window, rules, scorer, registry, net)

    idx = select_best(j_p, j_r, mask, cfg.lambda_r)
    chosen = batch.sample(idx)
    planned = build_planned_signal(chosen.states, signal, k, stride, cfg.dt,
                                   scorer.extension_steps)
    profiles = rule_profiles(planned, window, rule_bodies(vehicle_ids), scorer, registry, net)
    return PlanResult(
        sample=chosen, index=idx,
        planned_signal=Signal(planned.states[:window], cfg.dt),
        j_p=j_p, j_r=j_r, collision_free=mask,
        total_cost=float(j_p[idx] - cfg.lambda_r * j_r[idx]),
        rule_values=rule_values_all[idx],
        profiles=profiles, lambda_r=cfg.lambda_r,
    )


def recorded_rule_robustness(
    net: LaneNetwork,
    signal: Signal,
    k: int,
    cfg: PlannerConfig,
    scorer: RobustnessScorer,
    registry: PredicateRegistry,
) -> tuple[dict[str, float], dict[str, tuple[np.ndarray, np.ndarray]]]:
    """Rule robustness of the recorded ego trace over the same window.

    Used to compare planned against recorded behavior on equal footing.
    """
    stride = round(cfg.dt / signal.dt)
    if stride < 1 or abs(stride * signal.dt - cfg.dt) > 1e-9:
        raise InputError(
            f"planner step {cfg.dt}s is not an integer multiple of the signal step {signal.dt}s"
        )
    window = cfg.horizon + 1
    last = k + (window - 1) * stride
    if last >= len(signal):
        raise InputError(f"recording ends at step {len(signal) - 1}, window needs {last}")
    ego_states = [signal.states[k + t * stride].ego for t in range(window)]
    planned = build_planned_signal(ego_states, signal, k, stride, cfg.dt, scorer.extension_steps)
    vehicle_ids = relevant_vehicles(signal.states[k], registry.params)
    _, per_rule = rule_robustness_cost(planned, window, rule_formulas(vehicle_ids),
                                       scorer, registry, net)
    profiles = rule_profiles(planned, window, rule_bodies(vehicle_ids), scorer, registry, net)
    return per_rule, profiles
