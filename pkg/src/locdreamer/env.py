"""The localization world: maps, anchors, ranging noise, trajectories, data.

Distances follow the two-way ranging model: measured range = true Euclidean
distance plus noise, where the noise has a line-of-sight Gaussian component
and, when walls block the direct path, a positive non-line-of-sight bias.
All randomness flows through explicit numpy Generators, so every function
here is pure given its rng.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

__all__ = [
    "AnchorLayout",
    "MapRegion",
    "NoiseModel",
    "TrajectoryRecord",
    "ObservationSet",
    "SequenceBatch",
    "DatasetFormatError",
    "true_distance",
    "wall_crossings",
    "simulate_measurement",
    "generate_trajectory",
    "simulate_dataset",
    "ingest_dataset",
    "export_dataset",
    "write_anchor_layout",
    "read_anchor_layout",
    "mask_observations",
    "make_batches",
    "trilaterate",
]


class DatasetFormatError(ValueError):
    """Malformed trajectory or layout file; message names the offending line."""


@dataclass(frozen=True)
class MapRegion:
    """Axis-aligned bounding box with optional interior wall segments."""

    width: float
    height: float
    walls: tuple[tuple[float, float, float, float], ...] = ()  # (x1, y1, x2, y2)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("map width and height must be positive")
        for x1, y1, x2, y2 in self.walls:
            if x1 == x2 and y1 == y2:
                raise ValueError("wall segments must have nonzero length")

    def contains(self, p) -> bool:
        x, y = p
        return 0.0 <= x <= self.width and 0.0 <= y <= self.height


@dataclass(frozen=True)
class AnchorLayout:
    """Ordered (id, position) list of ranging anchors at fixed known spots."""

    ids: tuple[int, ...]
    positions: np.ndarray  # (A, 2) meters

    def __post_init__(self):
        object.__setattr__(self, "positions",
                           np.asarray(self.positions, dtype=np.float64).reshape(-1, 2))
        if len(self.ids) != len(set(self.ids)):
            raise ValueError("anchor ids must be unique")
        if len(self.ids) != self.positions.shape[0]:
            raise ValueError("ids and positions length mismatch")
        if len(self.ids) < 3:
            raise ValueError("a layout needs at least 3 anchors")

    @property
    def size(self) -> int:
        return len(self.ids)

    def subset(self, ids) -> "AnchorLayout":
        idx = [self.ids.index(i) for i in ids]
        return AnchorLayout(tuple(self.ids[i] for i in idx), self.positions[idx])

    def position_of(self, anchor_id: int) -> np.ndarray:
        return self.positions[self.ids.index(anchor_id)]


@dataclass(frozen=True)
class NoiseModel:
    """Ranging noise: LoS Gaussian plus per-wall-probability NLoS bias."""

    los_stddev: float = 0.15
    nlos_probability_per_wall: float = 0.6
    nlos_bias_mean: float = 0.8
    nlos_bias_stddev: float = 0.4

    def __post_init__(self):
        if self.los_stddev < 0 or self.nlos_bias_stddev < 0:
            raise ValueError("stddevs must be >= 0")
        if not 0.0 <= self.nlos_probability_per_wall <= 1.0:
            raise ValueError("nlos probability must be in [0, 1]")
        if self.nlos_bias_mean < 0:
            raise ValueError("nlos bias mean must be >= 0")


@dataclass
class TrajectoryRecord:
    """Ground-truth path with per-step per-anchor distance measurements.

    Time indices are implicit and contiguous from 1. Velocities, when
    present, are forward differences of positions over dt (the last step
    repeats the previous velocity).
    """

    traj_id: str
    positions: np.ndarray | None  # (T, 2) or None when truth is unknown
    measurements: list[dict[int, float]]  # per step: anchor id -> meters
    dt: float
    velocities: np.ndarray | None = None

    def __post_init__(self):
        if self.positions is not None:
            self.positions = np.asarray(self.positions, dtype=np.float64)
            if self.positions.shape != (len(self.measurements), 2):
                raise ValueError("positions must be (T, 2) matching measurements")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        for step in self.measurements:
            for d in step.values():
                if d < 0:
                    raise ValueError("distances must be >= 0")

    @property
    def steps(self) -> int:
        return len(self.measurements)


@dataclass(frozen=True)
class ObservationSet:
    """Unordered (distance, anchor position) pairs fed to encoder and filter."""

    distances: np.ndarray  # (S,)
    anchor_positions: np.ndarray  # (S, 2)

    def __post_init__(self):
        object.__setattr__(self, "distances", np.asarray(self.distances, dtype=np.float64))
        object.__setattr__(self, "anchor_positions",
                           np.asarray(self.anchor_positions, dtype=np.float64).reshape(-1, 2))
        if self.distances.shape[0] != self.anchor_positions.shape[0]:
            raise ValueError("distances and positions disagree on set size")

    @property
    def size(self) -> int:
        return int(self.distances.shape[0])


@dataclass
class SequenceBatch:
    """B measurement windows of length T over a shared anchor layout.

    distances[b, t, k] is NaN when anchor k has no reading at that step;
    `present` is the matching boolean mask. truth is (B, T, 2) or None.
    """

    anchor_ids: tuple[int, ...]
    anchor_positions: np.ndarray  # (K, 2)
    distances: np.ndarray  # (B, T, K)
    present: np.ndarray  # (B, T, K) bool
    truth: np.ndarray | None  # (B, T, 2)
    dt: float

    @property
    def batch_size(self) -> int:
        return self.distances.shape[0]

    @property
    def length(self) -> int:
        return self.distances.shape[1]


# -- geometry ----------------------------------------------------------------


def true_distance(p, anchor) -> float:
    """Euclidean range between a target position and an anchor."""
    p = np.asarray(p, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    return float(np.hypot(p[0] - anchor[0], p[1] - anchor[1]))


def _segment_intersection(p, q, a, b):
    """Intersection point of open segments p-q and a-b, or None."""
    p, q, a, b = (np.asarray(v, dtype=np.float64) for v in (p, q, a, b))
    r = q - p
    s = b - a
    denom = r[0] * s[1] - r[1] * s[0]
    qp = a - p
    if abs(denom) < 1e-15:
        return None  # parallel (collinear overlap treated as no crossing)
    t = (qp[0] * s[1] - qp[1] * s[0]) / denom
    u = (qp[0] * r[1] - qp[1] * r[0]) / denom
    if 1e-12 < t < 1.0 - 1e-12 and -1e-12 <= u <= 1.0 + 1e-12:
        return p + t * r
    return None


def wall_crossings(p, anchor, walls) -> int:
    """Number of wall segments the open sight line p->anchor passes through.

    A crossing point shared by several walls (a common endpoint) counts once.
    """
    points = []
    for x1, y1, x2, y2 in walls:
        hit = _segment_intersection(p, anchor, (x1, y1), (x2, y2))
        if hit is not None:
            points.append(hit)
    unique: list[np.ndarray] = []
    for pt in points:
        if all(np.hypot(*(pt - u)) > 1e-9 for u in unique):
            unique.append(pt)
    return len(unique)


def simulate_measurement(p, anchor, noise: NoiseModel, walls,
                         rng: np.random.Generator) -> float:
    """One ranging draw: true distance + LoS noise + probabilistic NLoS bias.

    Each wall on the sight line independently corrupts the path with
    probability `nlos_probability_per_wall`; a corrupted path adds a
    positive half-Gaussian bias. Results clamp at zero.
    """
    d = true_distance(p, anchor)
    d += rng.normal(0.0, noise.los_stddev) if noise.los_stddev > 0 else 0.0
    crossings = wall_crossings(p, anchor, walls)
    if crossings:
        p_nlos = 1.0 - (1.0 - noise.nlos_probability_per_wall) ** crossings
        if rng.random() < p_nlos:
            d += abs(rng.normal(noise.nlos_bias_mean, noise.nlos_bias_stddev))
    return max(d, 0.0)


# -- synthetic motion ----------------------------------------------------------


def generate_trajectory(map_region: MapRegion, speed_range: tuple[float, float],
                        turn_rate_stddev: float, T: int, dt: float,
                        rng: np.random.Generator, traj_id: str = "sim") -> TrajectoryRecord:
    """Constant-speed random-turn path that reflects off the map boundary.

    The heading performs a Gaussian random walk with per-step stddev
    turn_rate_stddev * dt. Velocities are exact forward differences:
    positions[t+1] = positions[t] + velocities[t] * dt.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if dt <= 0:
        raise ValueError("dt must be positive")
    speed = float(rng.uniform(*speed_range))
    if speed * dt >= min(map_region.width, map_region.height) / 2:
        raise ValueError("step length too large for the map")
    heading = float(rng.uniform(0.0, 2.0 * math.pi))
    margin = 1e-9
    pos = np.empty((T, 2))
    pos[0] = (map_region.width / 2.0, map_region.height / 2.0)
    vel = np.zeros((T, 2))
    for t in range(T - 1):
        heading += rng.normal(0.0, turn_rate_stddev * dt)
        v = speed * np.array([math.cos(heading), math.sin(heading)])
        nxt = pos[t] + v * dt
        for _ in range(4):
            if margin <= nxt[0] <= map_region.width - margin and \
               margin <= nxt[1] <= map_region.height - margin:
                break
            if nxt[0] < margin or nxt[0] > map_region.width - margin:
                v[0] = -v[0]
            if nxt[1] < margin or nxt[1] > map_region.height - margin:
                v[1] = -v[1]
            nxt = pos[t] + v * dt
        heading = math.atan2(v[1], v[0])
        pos[t + 1] = nxt
        vel[t] = v
    if T > 1:
        vel[T - 1] = vel[T - 2]
    else:
        vel[0] = speed * np.array([math.cos(heading), math.sin(heading)])
    return TrajectoryRecord(traj_id=traj_id, positions=pos,
                            measurements=[{} for _ in range(T)], dt=dt,
                            velocities=vel)


def simulate_dataset(map_region: MapRegion, layout: AnchorLayout, noise: NoiseModel,
                     n_trajectories: int, T: int, dt: float,
                     speed_range: tuple[float, float], turn_rate_stddev: float,
                     rng: np.random.Generator) -> list[TrajectoryRecord]:
    """Trajectories with a ranging measurement from every anchor at every step."""
    records = []
    for i in range(n_trajectories):
        rec = generate_trajectory(map_region, speed_range, turn_rate_stddev, T, dt,
                                  rng, traj_id=f"traj{i:03d}")
        for t in range(T):
            rec.measurements[t] = {
                aid: simulate_measurement(rec.positions[t], layout.positions[k],
                                          noise, map_region.walls, rng)
                for k, aid in enumerate(layout.ids)
            }
        records.append(rec)
    return records


# -- dataset files --------------------------------------------------------------


_HEADER = "traj_id,t,x,y,anchor_id,distance"


def export_dataset(records: list[TrajectoryRecord], path) -> None:
    """Canonical CSV form: sorted rows, repr floats, one row per reading."""
    lines = [_HEADER]
    for rec in records:
        for t in range(rec.steps):
            if rec.positions is not None:
                xs, ys = repr(float(rec.positions[t, 0])), repr(float(rec.positions[t, 1]))
            else:
                xs, ys = "", ""
            for aid in sorted(rec.measurements[t]):
                d = repr(float(rec.measurements[t][aid]))
                lines.append(f"{rec.traj_id},{t + 1},{xs},{ys},{aid},{d}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def ingest_dataset(path, dt: float = 0.1) -> list[TrajectoryRecord]:
    """Parse the trajectory CSV into records, one per trajectory id.

    Rows must be grouped by trajectory with non-decreasing time indices that
    form a contiguous range starting at 1. Missing anchor readings at a step
    are simply absent. Errors carry the 1-based line number.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _HEADER:
        raise DatasetFormatError(f"{path}: line 1: expected header '{_HEADER}'")

    per_traj: dict[str, dict[int, tuple[np.ndarray | None, dict[int, float]]]] = {}
    order: list[str] = []
    last_t: dict[str, int] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise DatasetFormatError(f"{path}: line {lineno}: expected 6 fields, got {len(parts)}")
        traj_id, t_s, x_s, y_s, aid_s, d_s = parts
        try:
            t = int(t_s)
            aid = int(aid_s)
            d = float(d_s)
            xy = None if (x_s == "" and y_s == "") else np.array([float(x_s), float(y_s)])
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from None
        if d < 0:
            raise DatasetFormatError(f"{path}: line {lineno}: negative distance {d}")
        if t < 1:
            raise DatasetFormatError(f"{path}: line {lineno}: time index must be >= 1")
        if traj_id in last_t and t < last_t[traj_id]:
            raise DatasetFormatError(
                f"{path}: line {lineno}: non-monotone time index {t} in trajectory {traj_id}")
        last_t[traj_id] = t
        if traj_id not in per_traj:
            per_traj[traj_id] = {}
            order.append(traj_id)
        steps = per_traj[traj_id]
        if t not in steps:
            steps[t] = (xy, {})
        prev_xy, meas = steps[t]
        if xy is not None and prev_xy is not None and not np.array_equal(xy, prev_xy):
            raise DatasetFormatError(
                f"{path}: line {lineno}: conflicting truth for trajectory {traj_id} step {t}")
        if xy is not None and prev_xy is None:
            steps[t] = (xy, meas)
        if aid in meas:
            raise DatasetFormatError(
                f"{path}: line {lineno}: duplicate reading for anchor {aid} at step {t}")
        meas[aid] = d

    records = []
    for traj_id in order:
        steps = per_traj[traj_id]
        T = max(steps)
        if sorted(steps) != list(range(1, T + 1)):
            raise DatasetFormatError(
                f"{path}: trajectory {traj_id}: time indices are not contiguous from 1")
        have_truth = all(steps[t][0] is not None for t in range(1, T + 1))
        positions = np.stack([steps[t][0] for t in range(1, T + 1)]) if have_truth else None
        measurements = [steps[t][1] for t in range(1, T + 1)]
        records.append(TrajectoryRecord(traj_id=traj_id, positions=positions,
                                        measurements=measurements, dt=dt))
    return records


def write_anchor_layout(layout: AnchorLayout, path) -> None:
    lines = ["anchor_id,x,y"]
    for aid, pos in zip(layout.ids, layout.positions):
        lines.append(f"{aid},{repr(float(pos[0]))},{repr(float(pos[1]))}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_anchor_layout(path) -> AnchorLayout:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "anchor_id,x,y":
        raise DatasetFormatError(f"{path}: line 1: expected header 'anchor_id,x,y'")
    ids, pos = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise DatasetFormatError(f"{path}: line {lineno}: expected 3 fields")
        try:
            ids.append(int(parts[0]))
            pos.append([float(parts[1]), float(parts[2])])
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from None
    return AnchorLayout(tuple(ids), np.array(pos))


# -- observation selection and batching -----------------------------------------


def mask_observations(step_measurements: dict[int, float], layout: AnchorLayout,
                      action) -> tuple[ObservationSet, int]:
    """Select the (distance, anchor position) pairs the action activates.

    Returns the observation set plus a count of activated anchors that had
    no measurement available (those pairs are omitted).
    """
    alpha = np.asarray(getattr(action, "alpha", action))
    if alpha.shape[0] != layout.size:
        raise ValueError("action length must equal layout size")
    dists, poss, missing = [], [], 0
    for k, aid in enumerate(layout.ids):
        if not alpha[k]:
            continue
        if aid in step_measurements:
            dists.append(step_measurements[aid])
            poss.append(layout.positions[k])
        else:
            missing += 1
    return ObservationSet(np.array(dists, dtype=np.float64),
                          np.array(poss, dtype=np.float64).reshape(-1, 2)), missing


def records_to_batch(records: list[TrajectoryRecord], layout: AnchorLayout,
                     windows: list[tuple[int, int]], T: int) -> SequenceBatch:
    """Assemble (record_index, start) windows into a dense batch over `layout`."""
    B = len(windows)
    K = layout.size
    dist = np.full((B, T, K), np.nan)
    present = np.zeros((B, T, K), dtype=bool)
    have_truth = all(records[ri].positions is not None for ri, _ in windows)
    truth = np.zeros((B, T, 2)) if have_truth else None
    for b, (ri, start) in enumerate(windows):
        rec = records[ri]
        for t in range(T):
            meas = rec.measurements[start + t]
            for k, aid in enumerate(layout.ids):
                if aid in meas:
                    dist[b, t, k] = meas[aid]
                    present[b, t, k] = True
        if truth is not None:
            truth[b] = rec.positions[start:start + T]
    return SequenceBatch(anchor_ids=layout.ids, anchor_positions=layout.positions,
                         distances=dist, present=present, truth=truth,
                         dt=records[windows[0][0]].dt)


def make_batches(records: list[TrajectoryRecord], layout: AnchorLayout, B: int, T: int,
                 rng: np.random.Generator, n_batches: int) -> Iterator[SequenceBatch]:
    """Uniformly sampled length-T windows, B per batch, with replacement.

    Records shorter than T are skipped; use count_short_records to surface
    how many were dropped.
    """
    eligible = [i for i, r in enumerate(records) if r.steps >= T]
    if not eligible:
        raise ValueError(f"no record has at least T={T} steps")
    for _ in range(n_batches):
        windows = []
        for _ in range(B):
            ri = eligible[int(rng.integers(len(eligible)))]
            start = int(rng.integers(records[ri].steps - T + 1))
            windows.append((ri, start))
        yield records_to_batch(records, layout, windows, T)


def count_short_records(records: list[TrajectoryRecord], T: int) -> int:
    """Records that make_batches will skip for being shorter than T."""
    return sum(1 for r in records if r.steps < T)


def trilaterate(distances: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Least-squares position fix from >= 3 ranges (difference of squares).

    Raises ValueError on fewer than 3 anchors or a collinear geometry.
    """
    distances = np.asarray(distances, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    n = distances.shape[0]
    if n < 3:
        raise ValueError("trilateration needs at least 3 anchors")
    a0 = positions[0]
    d0 = distances[0]
    A = 2.0 * (positions[1:] - a0)
    b = (d0 ** 2 - distances[1:] ** 2
         + np.sum(positions[1:] ** 2, axis=1) - np.sum(a0 ** 2))
    if np.linalg.matrix_rank(A, tol=1e-9) < 2:
        raise ValueError("anchor geometry is collinear; position is unobservable")
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    return sol
