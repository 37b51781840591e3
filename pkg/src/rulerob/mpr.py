"""Dynamics-aware robustness of predicates from sampled predictions.

For a predicate and a step ``k``, the pipeline grids feasible ego
trajectories over the horizon, pairs each with the recorded (most
likely) trajectories of all other vehicles, and counts per step the
fraction of predicted joint states whose Boolean value still matches
the value at ``k``. The horizon-mean of those fractions is mapped onto
[-1, 1] with per-predicate calibration constants; the sign of the
result equals the current Boolean value by construction.

The estimator is a complete enumeration of the ego grid: there is no
sampling noise beyond the grid itself, so small instances can be checked
exactly against brute-force recounts.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from rulerob.errors import CalibrationError, EmptyFeasibleSetError, InputError
from rulerob.predicates import PredicateDef, StateBatch
from rulerob.sampler import (
    EgoSampleBatch,
    SamplerConfig,
    TrajectorySample,
    most_likely_trajectories,
    sample_ego_batch,
)
from rulerob.scenario import JointState, LaneNetwork, Signal


class CalibrationRangeWarning(UserWarning):
    """Mean probability fell outside the calibrated range and was clipped."""


@dataclass(frozen=True)
class NormalizationConstants:
    """Calibration extremes of the mean probability, per sign class."""

    p_plus_min: float
    p_plus_max: float
    p_minus_min: float
    p_minus_max: float

    def __post_init__(self):
        if not self.p_plus_min < self.p_plus_max:
            raise InputError("satisfied-class calibration range is empty")
        if not self.p_minus_min < self.p_minus_max:
            raise InputError("violated-class calibration range is empty")

    def to_dict(self) -> dict:
        return {
            "p_plus_min": self.p_plus_min, "p_plus_max": self.p_plus_max,
            "p_minus_min": self.p_minus_min, "p_minus_max": self.p_minus_max,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "NormalizationConstants":
        return cls(**{k: float(data[k]) for k in
                      ("p_plus_min", "p_plus_max", "p_minus_min", "p_minus_max")})


class PredictedSignalSet:
    """The predicted joint states: ego ensemble x deterministic others.

    Realized implicitly: the Cartesian product never materializes since
    every non-ego vehicle contributes exactly one trajectory, so the set
    at every step offset has exactly one member per ego sample.
    """

    def __init__(self, ego: EgoSampleBatch, others: Mapping[str, TrajectorySample]):
        if len(ego) == 0:
            raise EmptyFeasibleSetError("no feasible ego samples to build predictions from")
        for vid, traj in others.items():
            if len(traj) != ego.n_steps:
                raise InputError(
                    f"vehicle {vid!r} trajectory has {len(traj)} steps, ego samples have {ego.n_steps}"
                )
        self.ego = ego
        self.others = dict(others)

    @property
    def size(self) -> int:
        return len(self.ego)

    @property
    def n_steps(self) -> int:
        return self.ego.n_steps

    def other_batches(self) -> dict[str, StateBatch]:
        return {vid: StateBatch.from_states(traj.states) for vid, traj in self.others.items()}

    def ego_batch(self) -> StateBatch:
        a = self.ego.arrays
        return StateBatch(
            s=a["s"], d=a["d"], v=a["v"], a=a["a"], d_rate=a["d_rate"],
            length=np.float64(self.ego.length), width=np.float64(self.ego.width),
        )

    def joint_states(self, offset: int) -> list[JointState]:
        """Materialized member states at one step offset (for small instances)."""
        out = []
        for i in range(self.size):
            ego_state = self.ego.sample(i).states[offset]
            others = {vid: traj.states[offset] for vid, traj in self.others.items()}
            out.append(JointState(ego=ego_state, others=others))
        return out


def build_predicted_signals(
    ego: EgoSampleBatch, others: Mapping[str, TrajectorySample]
) -> PredictedSignalSet:
    """Pair every ego sample with the single most-likely trajectory of
    each other vehicle."""
    return PredictedSignalSet(ego, others)


def _match_matrix(pred: PredicateDef, signals: PredictedSignalSet, c_ref: int,
                  net: LaneNetwork, b: str | None) -> np.ndarray:
    """(samples x steps) Boolean matrix of agreement with ``c_ref``."""
    values = pred.boolean_batch(signals.ego_batch(), signals.other_batches(), net, b)
    return values == (c_ref > 0)


def estimate_step_probability(
    pred: PredicateDef,
    signals: PredictedSignalSet,
    offset: int,
    c_ref: int,
    net: LaneNetwork,
    b: str | None = None,
) -> float:
    """Fraction of predicted members at one step whose value matches ``c_ref``."""
    if not 0 <= offset < signals.n_steps:
        raise InputError(f"step offset {offset} outside horizon of {signals.n_steps} steps")
    match = _match_matrix(pred, signals, c_ref, net, b)[:, offset]
    return int(np.count_nonzero(match)) / signals.size


def mean_probability(
    pred: PredicateDef,
    signals: PredictedSignalSet,
    c_ref: int,
    net: LaneNetwork,
    b: str | None = None,
) -> float:
    """Arithmetic mean of the per-step match fractions over the horizon."""
    match = _match_matrix(pred, signals, c_ref, net, b)
    probs = [int(c) / signals.size for c in np.count_nonzero(match, axis=0)]
    return sum(probs) / len(probs)


def normalized_robustness(p_bar: float, c_ref: int, norm: NormalizationConstants) -> float:
    """Map a mean probability onto [-1, 1] by the sign-dependent calibration.

    Satisfied states map increasingly onto [0, 1], violated states
    decreasingly onto [-1, 0]; values outside the calibrated range are
    clipped into the matching half so the sign always equals ``c_ref``.
    """
    if c_ref == 1:
        raw = (p_bar - norm.p_plus_min) / (norm.p_plus_max - norm.p_plus_min)
        clipped = min(max(raw, 0.0), 1.0)
    elif c_ref == -1:
        raw = -(p_bar - norm.p_minus_min) / (norm.p_minus_max - norm.p_minus_min)
        clipped = min(max(raw, -1.0), 0.0)
    else:
        raise InputError(f"characteristic value must be +1 or -1, got {c_ref}")
    if clipped != raw:
        warnings.warn("mean probability outside calibrated range; robustness clipped",
                      CalibrationRangeWarning, stacklevel=2)
    return clipped


@dataclass(frozen=True)
class MPRResult:
    characteristic: int
    p_bar: float
    rho: float
    n_samples: int
    step_probabilities: tuple[float, ...]


def _instance_mean_probability(
    pred: PredicateDef,
    net: LaneNetwork,
    signal: Signal,
    k: int,
    cfg: SamplerConfig,
    b: str | None,
) -> tuple[int, float, int, tuple[float, ...]]:
    if abs(cfg.dt - signal.dt) > 1e-12:
        raise InputError(
            f"sampler step size {cfg.dt}s does not match the signal step size {signal.dt}s"
        )
    joint = signal.states[k]
    if pred.arity == 2:
        if b is None:
            raise InputError(f"predicate {pred.name!r} needs an other-vehicle argument")
        if b not in joint.others:
            raise InputError(f"unknown vehicle id {b!r}")
    c_ref = 1 if pred.boolean(joint, net, b) else -1
    ego = sample_ego_batch(joint, net, cfg)
    if len(ego) == 0:
        raise EmptyFeasibleSetError(
            f"no feasible ego sample at step {k}; cannot estimate probabilities"
        )
    others = most_likely_trajectories(signal, k, cfg.horizon)
    signals = build_predicted_signals(ego, others)
    match = _match_matrix(pred, signals, c_ref, net, b)
    probs = tuple(int(c) / signals.size for c in np.count_nonzero(match, axis=0))
    return c_ref, sum(probs) / len(probs), signals.size, probs


def compute_mpr(
    pred: PredicateDef,
    net: LaneNetwork,
    signal: Signal,
    k: int,
    cfg: SamplerConfig,
    norm: NormalizationConstants,
    b: str | None = None,
) -> MPRResult:
    """Full pipeline: sample, predict, count, average, normalize.

    Requires calibrated constants for the predicate; raises
    :class:`EmptyFeasibleSetError` when no ego sample survives the
    feasibility checks.
    """
    if norm is None:
        raise CalibrationError(f"predicate {pred.name!r} has no calibrated normalization constants")
    c_ref, p_bar, n, probs = _instance_mean_probability(pred, net, signal, k, cfg, b)
    rho = normalized_robustness(p_bar, c_ref, norm)
    return MPRResult(c_ref, p_bar, rho, n, probs)


def calibrate_normalization(
    instances: Sequence[tuple],
    pred: PredicateDef,
    net: LaneNetwork,
    cfg: SamplerConfig,
    margin: float = 1e-3,
) -> NormalizationConstants:
    """Per-sign extremes of the mean probability over a calibration set.

    ``instances`` are ``(signal, k)`` or ``(signal, k, other_id)``
    tuples; the extremes are widened by ``margin`` on both sides. The
    set must contain at least one satisfied and one violated instance.
    """
    plus, minus = [], []
    for inst in instances:
        signal, k = inst[0], inst[1]
        b = inst[2] if len(inst) > 2 else None
        c_ref, p_bar, _, _ = _instance_mean_probability(pred, net, signal, k, cfg, b)
        (plus if c_ref == 1 else minus).append(p_bar)
    if not plus:
        raise CalibrationError(
            f"calibration set for {pred.name!r} has no satisfied (characteristic +1) instances"
        )
    if not minus:
        raise CalibrationError(
            f"calibration set for {pred.name!r} has no violated (characteristic -1) instances"
        )
    return NormalizationConstants(
        p_plus_min=min(plus) - margin,
        p_plus_max=max(plus) + margin,
        p_minus_min=min(minus) - margin,
        p_minus_max=max(minus) + margin,
    )


def identity_normalization(margin: float = 1e-3) -> NormalizationConstants:
    """Uncalibrated fallback mapping the full probability range [0, 1].

    Sound and monotone like any constants, just without the sharpening a
    calibration set provides.
    """
    return NormalizationConstants(
        p_plus_min=-margin, p_plus_max=1.0 + margin,
        p_minus_min=-margin, p_minus_max=1.0 + margin,
    )


def nearest_other(joint: JointState) -> str | None:
    """Default other-vehicle choice for pair predicates: smallest planar
    distance to the ego vehicle, ties broken by id."""
    best = None
    for vid in sorted(joint.others):
        st = joint.others[vid]
        dist = float(np.hypot(st.s - joint.ego.s, st.d - joint.ego.d))
        if best is None or dist < best[0]:
            best = (dist, vid)
    return best[1] if best else None
