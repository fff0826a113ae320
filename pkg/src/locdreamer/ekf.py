"""Extended Kalman filter baseline for range-only tracking.

Constant-velocity process model over state [x, y, vx, vy] with piecewise
white-acceleration process noise; per-anchor range measurements are stacked
into one update with a Joseph-form covariance step for numerical robustness.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .env import ObservationSet, TrajectoryRecord, AnchorLayout, mask_observations, trilaterate

__all__ = ["EkfState", "EkfConfig", "ekf_predict", "ekf_update", "ekf_init", "ekf_run",
           "cv_transition", "process_noise"]


@dataclass
class EkfState:
    mean: np.ndarray  # (4,) [x, y, vx, vy]
    cov: np.ndarray  # (4, 4) symmetric positive definite

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(4)
        self.cov = np.asarray(self.cov, dtype=np.float64).reshape(4, 4)

    @property
    def position(self) -> np.ndarray:
        return self.mean[:2]


@dataclass(frozen=True)
class EkfConfig:
    sigma_acc: float = 0.2  # m/s^2 acceleration noise
    sigma_n: float = 1.0  # m range noise
    dt: float = 0.1

    def __post_init__(self):
        if self.sigma_acc <= 0 or self.sigma_n <= 0 or self.dt <= 0:
            raise ValueError("EKF config values must be positive")


def cv_transition(dt: float) -> np.ndarray:
    F = np.eye(4)
    F[0, 2] = dt
    F[1, 3] = dt
    return F


def process_noise(sigma_acc: float, dt: float) -> np.ndarray:
    """Discrete white-acceleration Q per axis, interleaved for [x, y, vx, vy]."""
    q11 = dt ** 4 / 4.0
    q12 = dt ** 3 / 2.0
    q22 = dt ** 2
    Q = np.zeros((4, 4))
    for axis in range(2):
        Q[axis, axis] = q11
        Q[axis, axis + 2] = q12
        Q[axis + 2, axis] = q12
        Q[axis + 2, axis + 2] = q22
    return sigma_acc ** 2 * Q


def ekf_predict(state: EkfState, cfg: EkfConfig) -> EkfState:
    F = cv_transition(cfg.dt)
    mean = F @ state.mean
    cov = F @ state.cov @ F.T + process_noise(cfg.sigma_acc, cfg.dt)
    cov = 0.5 * (cov + cov.T)
    return EkfState(mean, cov)


def ekf_update(state: EkfState, obs: ObservationSet, cfg: EkfConfig,
               min_range: float = 1e-6) -> tuple[EkfState, int]:
    """Stacked range update. Returns the new state and the rows actually used.

    Anchors closer than `min_range` to the predicted position have a
    singular Jacobian row and are skipped; if every row is skipped the
    state is returned unchanged (used == 0 flags it).
    """
    if obs.size == 0:
        raise ValueError("observation set must be nonempty")
    pos = state.mean[:2]
    deltas = pos[None, :] - obs.anchor_positions
    ranges = np.hypot(deltas[:, 0], deltas[:, 1])
    keep = ranges >= min_range
    if not keep.any():
        return state, 0
    deltas = deltas[keep]
    ranges = ranges[keep]
    z = obs.distances[keep]
    m = int(keep.sum())

    H = np.zeros((m, 4))
    H[:, 0] = deltas[:, 0] / ranges
    H[:, 1] = deltas[:, 1] / ranges
    R = cfg.sigma_n ** 2 * np.eye(m)
    P = state.cov
    S = H @ P @ H.T + R
    K = P @ H.T @ np.linalg.inv(S)
    mean = state.mean + K @ (z - ranges)
    I_KH = np.eye(4) - K @ H
    cov = I_KH @ P @ I_KH.T + K @ R @ K.T
    cov = 0.5 * (cov + cov.T)
    return EkfState(mean, cov), m


def ekf_init(obs: ObservationSet) -> EkfState:
    """Trilateration fix for position, zero velocity, unit covariance."""
    pos = trilaterate(obs.distances, obs.anchor_positions)
    return EkfState(np.array([pos[0], pos[1], 0.0, 0.0]), np.eye(4))


def ekf_run(record: TrajectoryRecord, layout: AnchorLayout,
            action_source: Callable[[int], np.ndarray],
            cfg: EkfConfig) -> np.ndarray:
    """Filter a trajectory; returns (T, 2) posterior position estimates.

    `action_source(t)` supplies the binary scheduling vector for 1-based
    step t. The filter initializes from the first step's selected
    observations and runs predict/update for the remaining steps.
    """
    T = record.steps
    estimates = np.zeros((T, 2))
    obs, _ = mask_observations(record.measurements[0], layout, action_source(1))
    state = ekf_init(obs)
    state, _ = ekf_update(state, obs, cfg)
    estimates[0] = state.position
    for t in range(1, T):
        state = ekf_predict(state, cfg)
        obs, _ = mask_observations(record.measurements[t], layout, action_source(t + 1))
        if obs.size:
            state, _ = ekf_update(state, obs, cfg)
        estimates[t] = state.position
    return estimates
