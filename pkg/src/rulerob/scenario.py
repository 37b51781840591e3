"""World model: lane network, curvilinear frames, vehicle states, and I/O.

All vehicle kinematics live in the curvilinear coordinates of a single
reference path: ``s`` is arc length along the path and ``d`` the signed
orthogonal deviation (positive to the left). Lanes are corridors around
their own centerlines; at load time every centerline and road boundary
is projected into the reference frame once, giving each lane a lateral
band ``offset(s) +- width/2`` that downstream geometry queries
interpolate. Everything is immutable after construction and safe to
share across threads.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Iterable, Mapping

import numpy as np

from rulerob.errors import InputError, OffRoadError, ProjectionError, SchemaError

#: segments shorter than this are rejected as degenerate
MIN_SEGMENT_LENGTH = 1e-9


# ---------------------------------------------------------------------------
# Vehicle states and signals


@dataclass(frozen=True)
class VehicleState:
    """Kinematic state in curvilinear coordinates plus body dimensions.

    ``d_rate`` (lateral velocity) is not part of the minimal state; it
    backs the input-feature block and defaults to 0 when a data source
    does not provide it.
    """

    s: float
    d: float
    v: float
    a: float
    length: float
    width: float
    d_rate: float = 0.0

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise InputError(
                f"vehicle dimensions must be positive, got length={self.length} width={self.width}"
            )


@dataclass(frozen=True)
class JointState:
    """States of the ego vehicle and all rule-relevant others at one step."""

    ego: VehicleState
    others: Mapping[str, VehicleState]

    def __post_init__(self):
        if "ego" in self.others:
            raise InputError("vehicle id 'ego' must not appear among the other vehicles")
        object.__setattr__(self, "others", MappingProxyType(dict(self.others)))

    def vehicle(self, vehicle_id: str) -> VehicleState:
        if vehicle_id == "ego":
            return self.ego
        try:
            return self.others[vehicle_id]
        except KeyError:
            raise InputError(f"unknown vehicle id {vehicle_id!r}") from None


@dataclass(frozen=True)
class Signal:
    """Time-indexed sequence of joint states with a fixed step size."""

    states: tuple[JointState, ...]
    dt: float

    def __post_init__(self):
        if not self.states:
            raise InputError("signal must contain at least one step")
        if self.dt <= 0:
            raise InputError(f"signal dt must be > 0, got {self.dt}")
        ids = set(self.states[0].others)
        for k, st in enumerate(self.states):
            if set(st.others) != ids:
                raise InputError(f"step {k} references a different vehicle-id set")
        object.__setattr__(self, "states", tuple(self.states))

    def __len__(self) -> int:
        return len(self.states)

    @property
    def vehicle_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.states[0].others))


# ---------------------------------------------------------------------------
# Curvilinear frame


def _as_polyline(points) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 2:
        raise InputError("polyline must be an (n>=2, 2) array of points")
    return arr


class CurvilinearFrame:
    """Arc-length frame of a reference polyline.

    The lateral direction is a continuous normal field: segment normals
    averaged at the vertices and linearly interpolated in between. That
    keeps :meth:`project` and :meth:`to_cartesian` exact inverses of
    each other on the valid band (|d| below the local turn radius),
    which a piecewise-constant normal cannot achieve near joints.
    """

    def __init__(self, points):
        pts = _as_polyline(points)
        seg = np.diff(pts, axis=0)
        lengths = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(lengths <= MIN_SEGMENT_LENGTH):
            raise InputError("reference path contains a degenerate segment")
        self.points = pts
        self.seg_lengths = lengths
        self.cum_lengths = np.concatenate([[0.0], np.cumsum(lengths)])
        self.tangents = seg / lengths[:, None]
        # left normal of (tx, ty) is (-ty, tx)
        self.normals = np.column_stack([-self.tangents[:, 1], self.tangents[:, 0]])
        vertex_normals = np.empty_like(pts)
        vertex_normals[0] = self.normals[0]
        vertex_normals[-1] = self.normals[-1]
        if len(self.normals) > 1:
            mids = self.normals[:-1] + self.normals[1:]
            norms = np.hypot(mids[:, 0], mids[:, 1])
            if np.any(norms < 1e-9):
                raise InputError("reference path folds back on itself")
            vertex_normals[1:-1] = mids / norms[:, None]
        self.vertex_normals = vertex_normals

    @property
    def total_length(self) -> float:
        return float(self.cum_lengths[-1])

    def _segment_of(self, s: float) -> int:
        idx = int(np.searchsorted(self.cum_lengths, s, side="right") - 1)
        return min(max(idx, 0), len(self.seg_lengths) - 1)

    def _candidates(self, p: np.ndarray):
        """Per-segment roots of 'p lies on the lateral ray at t'.

        With the interpolated normal field N(t), the condition
        cross(p - base(t), N(t)) = 0 is quadratic in t per segment.
        """
        out = []
        for i in range(len(self.seg_lengths)):
            a = self.points[i]
            g = self.tangents[i] * self.seg_lengths[i]
            m0 = self.vertex_normals[i]
            dm = self.vertex_normals[i + 1] - m0
            q = p - a
            cross = lambda x, y: x[0] * y[1] - x[1] * y[0]
            A = -cross(g, dm)
            B = cross(q, dm) - cross(g, m0)
            C = cross(q, m0)
            if abs(A) < 1e-14:
                roots = [-C / B] if abs(B) > 1e-14 else []
            else:
                disc = B * B - 4.0 * A * C
                if disc < 0.0:
                    continue
                sq = math.sqrt(disc)
                roots = [(-B - sq) / (2.0 * A), (-B + sq) / (2.0 * A)]
            for t in roots:
                if not -1e-9 <= t <= 1.0 + 1e-9:
                    continue
                t = min(max(t, 0.0), 1.0)
                base = a + t * g
                normal = m0 + t * dm
                normal /= math.hypot(normal[0], normal[1])
                d = float((p - base) @ normal)
                s = float(self.cum_lengths[i] + t * self.seg_lengths[i])
                out.append((abs(d), s, d, i))
        return out

    def project(self, point, ambiguity_tol: float = 1e-6) -> tuple[float, float]:
        """Project a Cartesian point to ``(s, d)``.

        Raises :class:`ProjectionError` if the point falls beyond either
        path end, outside the valid band, or if two non-adjacent
        segments yield equidistant feet within ``ambiguity_tol``.
        """
        p = np.asarray(point, dtype=float)
        candidates = self._candidates(p)
        if not candidates:
            along_start = float((p - self.points[0]) @ self.tangents[0])
            along_end = float((p - self.points[-1]) @ self.tangents[-1])
            if along_start < 0.0:
                raise ProjectionError(f"point {tuple(p)} lies before the start of the path")
            if along_end > 0.0:
                raise ProjectionError(f"point {tuple(p)} lies beyond the end of the path")
            raise ProjectionError(f"point {tuple(p)} lies outside the valid projection band")
        candidates.sort(key=lambda c: c[0])
        dist, s, d, seg = candidates[0]
        for other in candidates[1:]:
            if other[0] > dist + ambiguity_tol:
                break
            if abs(other[3] - seg) > 1:
                raise ProjectionError(
                    f"point {tuple(p)} is equidistant to non-adjacent path segments"
                )
        return s, d

    def to_cartesian(self, s: float, d: float) -> tuple[float, float]:
        """Inverse of :meth:`project` on the valid band; errors if ``s`` is out of range."""
        if not 0.0 <= s <= self.total_length:
            raise InputError(f"s={s} outside path range [0, {self.total_length}]")
        i = self._segment_of(s)
        t = (s - self.cum_lengths[i]) / self.seg_lengths[i]
        base = self.points[i] + (s - self.cum_lengths[i]) * self.tangents[i]
        normal = self.vertex_normals[i] + t * (self.vertex_normals[i + 1] - self.vertex_normals[i])
        normal = normal / math.hypot(normal[0], normal[1])
        pt = base + d * normal
        return float(pt[0]), float(pt[1])

    def tangent_at(self, s: float) -> tuple[float, float]:
        i = self._segment_of(s)
        return float(self.tangents[i, 0]), float(self.tangents[i, 1])

    def _segments_of(self, s: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.cum_lengths, s, side="right") - 1
        return np.clip(idx, 0, len(self.seg_lengths) - 1)

    def to_cartesian_many(self, s: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Vectorized :meth:`to_cartesian`; returns points of shape (..., 2)."""
        s = np.asarray(s, dtype=float)
        d = np.asarray(d, dtype=float)
        if np.any(s < 0.0) or np.any(s > self.total_length):
            raise InputError("s values outside path range")
        idx = self._segments_of(s)
        along = (s - self.cum_lengths[idx])[..., None]
        base = self.points[idx] + along * self.tangents[idx]
        t = along / self.seg_lengths[idx][..., None]
        normal = self.vertex_normals[idx] + t * (self.vertex_normals[idx + 1] - self.vertex_normals[idx])
        normal = normal / np.hypot(normal[..., 0], normal[..., 1])[..., None]
        return base + d[..., None] * normal

    def tangents_many(self, s: np.ndarray) -> np.ndarray:
        """Vectorized :meth:`tangent_at`; returns unit tangents of shape (..., 2)."""
        return self.tangents[self._segments_of(np.asarray(s, dtype=float))]

    def heading_at(self, s: float) -> float:
        tx, ty = self.tangent_at(s)
        return math.atan2(ty, tx)


def project_to_curvilinear(frame: CurvilinearFrame, point) -> tuple[float, float]:
    """Functional alias for :meth:`CurvilinearFrame.project`."""
    return frame.project(point)


def curvilinear_to_cartesian(frame: CurvilinearFrame, s: float, d: float) -> tuple[float, float]:
    """Functional alias for :meth:`CurvilinearFrame.to_cartesian`."""
    return frame.to_cartesian(s, d)


# ---------------------------------------------------------------------------
# Lane network


@dataclass(frozen=True)
class Lane:
    lane_id: int
    centerline: np.ndarray
    width: float
    left: int | None = None
    right: int | None = None

    def __post_init__(self):
        if self.width <= 0:
            raise InputError(f"lane {self.lane_id}: width must be > 0")
        object.__setattr__(self, "centerline", _as_polyline(self.centerline))
        arc = np.cumsum(np.hypot(*np.diff(self.centerline, axis=0).T))
        if np.any(np.diff(np.concatenate([[0.0], arc])) <= 0):
            raise InputError(f"lane {self.lane_id}: centerline arc length must strictly increase")


class _LateralProfile:
    """Piecewise-linear lateral offset of a projected polyline over s."""

    def __init__(self, frame: CurvilinearFrame, polyline: np.ndarray, what: str):
        svals, dvals = [], []
        for pt in polyline:
            try:
                s, d = frame.project(pt)
            except ProjectionError:
                continue  # vertices sticking out past the reference ends are fine
            svals.append(s)
            dvals.append(d)
        if len(svals) < 2:
            raise InputError(f"{what}: fewer than two vertices project onto the reference path")
        order = np.argsort(svals)
        self.s = np.asarray(svals)[order]
        self.d = np.asarray(dvals)[order]

    def at(self, s) -> np.ndarray:
        return np.interp(s, self.s, self.d)


class LaneNetwork:
    """Lanes plus road boundaries, anchored to one reference frame.

    The reference path is the centerline of the first lane given; all
    bands are lateral offsets in that frame. Geometry assumes corridor
    style roads (no merges/splits), per the native scenario format.
    """

    def __init__(self, lanes: Iterable[Lane], left_boundary, right_boundary):
        lane_list = list(lanes)
        if not lane_list:
            raise InputError("lane network needs at least one lane")
        ids = [lane.lane_id for lane in lane_list]
        if len(set(ids)) != len(ids):
            raise InputError("duplicate lane ids")
        self.lanes: Mapping[int, Lane] = MappingProxyType({l.lane_id: l for l in lane_list})
        self.lane_order = tuple(ids)
        self.frame = CurvilinearFrame(lane_list[0].centerline)
        self._offsets = {
            l.lane_id: _LateralProfile(self.frame, l.centerline, f"lane {l.lane_id}")
            for l in lane_list
        }
        self._left_bound = _LateralProfile(self.frame, _as_polyline(left_boundary), "left boundary")
        self._right_bound = _LateralProfile(self.frame, _as_polyline(right_boundary), "right boundary")

    def lane_band(self, lane_id: int, s) -> tuple[np.ndarray, np.ndarray]:
        """Lateral interval (low, high) of a lane at arc length ``s``."""
        lane = self.lanes[lane_id]
        off = self._offsets[lane_id].at(s)
        half = 0.5 * lane.width
        return off - half, off + half

    def road_band(self, s) -> tuple[np.ndarray, np.ndarray]:
        """Lateral interval (right boundary, left boundary) at arc length ``s``."""
        return self._right_bound.at(s), self._left_bound.at(s)

    def lane_center(self, lane_id: int, s) -> np.ndarray:
        return self._offsets[lane_id].at(s)

    def adjacent_lane_ids(self, lane_id: int) -> tuple[int, ...]:
        lane = self.lanes[lane_id]
        out = [lane_id]
        if lane.left is not None:
            out.append(lane.left)
        if lane.right is not None:
            out.append(lane.right)
        return tuple(out)


def lane_penetration(net: LaneNetwork, lane_id: int, s, d_low, d_high):
    """Signed lateral overlap depth of the interval [d_low, d_high] with a lane.

    Positive values are overlap depth, negative values the gap to the
    band; zero means exact touching. Vectorizes over ``s``/``d`` arrays.
    """
    band_lo, band_hi = net.lane_band(lane_id, s)
    return np.minimum(d_high, band_hi) - np.maximum(d_low, band_lo)


def occupied_lanes(net: LaneNetwork, state: VehicleState) -> tuple[set[int], set[int]]:
    """Lane ids overlapped by the vehicle footprint and by its center point.

    Returns ``(all_overlapped, containing_center)``; the second set is
    always a subset of the first. Raises :class:`OffRoadError` when the
    footprint touches no lane at all.
    """
    d_low = state.d - 0.5 * state.width
    d_high = state.d + 0.5 * state.width
    overlapped: set[int] = set()
    center: set[int] = set()
    for lane_id in net.lane_order:
        if lane_penetration(net, lane_id, state.s, d_low, d_high) >= 0.0:
            overlapped.add(lane_id)
        band_lo, band_hi = net.lane_band(lane_id, state.s)
        if band_lo <= state.d <= band_hi:
            center.add(lane_id)
    if not overlapped:
        raise OffRoadError(f"vehicle footprint at s={state.s}, d={state.d} is fully off-road")
    return overlapped, center


def footprint_corners(frame: CurvilinearFrame, state: VehicleState) -> np.ndarray:
    """Cartesian corners of the vehicle's oriented rectangle.

    The heading is the reference-path tangent at ``s`` (aligned driving:
    the decoupled model carries no explicit heading state).
    """
    cx, cy = frame.to_cartesian(state.s, state.d)
    tx, ty = frame.tangent_at(state.s)
    half_l = 0.5 * state.length
    half_w = 0.5 * state.width
    lon = np.array([tx, ty]) * half_l
    lat = np.array([-ty, tx]) * half_w
    c = np.array([cx, cy])
    return np.array([c + lon + lat, c + lon - lat, c - lon - lat, c - lon + lat])


# ---------------------------------------------------------------------------
# Scenario I/O

_SCENARIO_KEYS = {"dt", "lanes", "boundaries", "vehicles"}
_LANE_KEYS = {"id", "centerline", "width", "left", "right"}
_VEHICLE_KEYS = {"id", "l", "w", "trace"}
CSV_COLUMNS = ("frame", "id", "s", "d", "v", "a", "l", "w")


def _reject_unknown(obj: dict, allowed: set[str], path: str):
    for key in obj:
        if key not in allowed:
            raise SchemaError(f"unknown field {key!r}", path)


def _require(obj: dict, key: str, path: str):
    if key not in obj:
        raise SchemaError(f"missing field {key!r}", path)
    return obj[key]


def _finite_diff(values: np.ndarray, dt: float) -> np.ndarray:
    if len(values) == 1:
        return np.zeros(1)
    return np.gradient(values, dt)


def load_scenario(path) -> tuple[LaneNetwork, Signal]:
    """Load a scenario JSON file into a lane network and a recorded signal.

    The parse is strict: unknown fields, duplicate ids, and non-monotone
    timestamps are rejected with the offending field path.
    """
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON: {exc}", str(path)) from exc
    if not isinstance(raw, dict):
        raise SchemaError("scenario root must be an object", "$")
    _reject_unknown(raw, _SCENARIO_KEYS, "$")

    dt = float(_require(raw, "dt", "$"))
    if dt <= 0:
        raise SchemaError("dt must be > 0", "$.dt")

    lanes = []
    for i, entry in enumerate(_require(raw, "lanes", "$")):
        path_i = f"$.lanes[{i}]"
        _reject_unknown(entry, _LANE_KEYS, path_i)
        lanes.append(
            Lane(
                lane_id=int(_require(entry, "id", path_i)),
                centerline=_require(entry, "centerline", path_i),
                width=float(_require(entry, "width", path_i)),
                left=entry.get("left"),
                right=entry.get("right"),
            )
        )
    if len({l.lane_id for l in lanes}) != len(lanes):
        raise SchemaError("duplicate lane id", "$.lanes")

    bounds = _require(raw, "boundaries", "$")
    _reject_unknown(bounds, {"left", "right"}, "$.boundaries")
    net = LaneNetwork(lanes, _require(bounds, "left", "$.boundaries"), _require(bounds, "right", "$.boundaries"))

    traces: dict[str, dict] = {}
    for i, entry in enumerate(_require(raw, "vehicles", "$")):
        path_i = f"$.vehicles[{i}]"
        _reject_unknown(entry, _VEHICLE_KEYS, path_i)
        vid = str(_require(entry, "id", path_i))
        if vid in traces:
            raise SchemaError(f"duplicate vehicle id {vid!r}", path_i)
        trace = np.asarray(_require(entry, "trace", path_i), dtype=float)
        if trace.ndim != 2 or trace.shape[1] != 5:
            raise SchemaError("trace rows must be [t, s, d, v, a]", f"{path_i}.trace")
        if np.any(np.diff(trace[:, 0]) <= 0):
            raise SchemaError("timestamps must strictly increase", f"{path_i}.trace")
        traces[vid] = {
            "l": float(_require(entry, "l", path_i)),
            "w": float(_require(entry, "w", path_i)),
            "trace": trace,
        }

    if "ego" not in traces:
        raise SchemaError("scenario must contain a vehicle with id 'ego'", "$.vehicles")
    n_steps = {vid: len(t["trace"]) for vid, t in traces.items()}
    if len(set(n_steps.values())) != 1:
        raise SchemaError(f"vehicle traces differ in length: {n_steps}", "$.vehicles")

    states = []
    d_rates = {
        vid: _finite_diff(t["trace"][:, 2], dt) for vid, t in traces.items()
    }
    for k in range(next(iter(n_steps.values()))):
        def state_of(vid: str) -> VehicleState:
            t = traces[vid]
            row = t["trace"][k]
            return VehicleState(
                s=row[1], d=row[2], v=row[3], a=row[4],
                length=t["l"], width=t["w"], d_rate=float(d_rates[vid][k]),
            )

        states.append(
            JointState(
                ego=state_of("ego"),
                others={vid: state_of(vid) for vid in traces if vid != "ego"},
            )
        )
    return net, Signal(tuple(states), dt)


def save_signal_csv(signal: Signal, path) -> None:
    """Write a signal as trajectory CSV (columns frame,id,s,d,v,a,l,w)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for k, joint in enumerate(signal.states):
            for vid in ("ego", *sorted(joint.others)):
                st = joint.vehicle(vid)
                writer.writerow([k, vid, repr(st.s), repr(st.d), repr(st.v),
                                 repr(st.a), repr(st.length), repr(st.width)])


def load_signal_csv(path, dt: float) -> Signal:
    """Read a trajectory CSV back into a signal (``dt`` is not stored in the file)."""
    per_step: dict[int, dict[str, VehicleState]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_COLUMNS:
            raise SchemaError(f"expected header {','.join(CSV_COLUMNS)}", str(path))
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_COLUMNS):
                raise SchemaError(f"line {lineno}: expected {len(CSV_COLUMNS)} columns", str(path))
            k = int(row[0])
            vid = row[1]
            step = per_step.setdefault(k, {})
            if vid in step:
                raise SchemaError(f"line {lineno}: duplicate vehicle {vid!r} at frame {k}", str(path))
            step[vid] = VehicleState(
                s=float(row[2]), d=float(row[3]), v=float(row[4]), a=float(row[5]),
                length=float(row[6]), width=float(row[7]),
            )
    if not per_step:
        raise SchemaError("empty trajectory file", str(path))
    if sorted(per_step) != list(range(len(per_step))):
        raise SchemaError("frame indices must be contiguous from 0", str(path))
    states = []
    for k in range(len(per_step)):
        step = per_step[k]
        if "ego" not in step:
            raise SchemaError(f"frame {k} is missing the ego vehicle", str(path))
        states.append(JointState(ego=step["ego"], others={v: st for v, st in step.items() if v != "ego"}))
    # lateral rates are not stored; rebuild them by finite differences
    sig = Signal(tuple(states), dt)
    return _with_d_rates(sig)


def _with_d_rates(signal: Signal) -> Signal:
    ids = ("ego", *signal.vehicle_ids)
    d = {vid: np.array([st.vehicle(vid).d for st in signal.states]) for vid in ids}
    rates = {vid: _finite_diff(vals, signal.dt) for vid, vals in d.items()}
    states = []
    for k, joint in enumerate(signal.states):
        def upd(vid):
            return replace(joint.vehicle(vid), d_rate=float(rates[vid][k]))
        states.append(JointState(ego=upd("ego"), others={v: upd(v) for v in joint.others}))
    return Signal(tuple(states), signal.dt)


def save_scenario(net_dict: dict, path) -> None:
    """Write a scenario dict (same schema as :func:`load_scenario`) to JSON."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(net_dict, fh)
