"""Benchmark harness: tracking metrics, method matrix, GDOP, plot exports.

The method matrix compares six trackers on identical held-out trajectories:
an EKF with random or full scheduling, a world model trained directly on
real deployment data, and the imagination-trained model evaluated with
random, full, or learned greedy scheduling.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .dssm import DssmParams, filter_batch_scheduled, policy_state_features
from .ekf import EkfConfig, ekf_run
from .env import AnchorLayout, MapRegion, TrajectoryRecord, records_to_batch
from .numkit import Tensor, no_grad
from .scheduler import AcParams, greedy_subset, policy_logits, uniform_random_subset
from .trainer import TrainState

__all__ = [
    "MetricReport",
    "HeatmapGrid",
    "BENCHMARK_METHODS",
    "REFERENCE_ERRORS",
    "compute_metrics",
    "run_benchmark",
    "window_records",
    "gdop",
    "mean_random_subset_gdop",
    "scheduling_heatmap",
    "heatmap_gdop_comparison",
    "ratio_report",
    "export_metrics",
    "export_trajectories",
    "export_heatmap",
]

BENCHMARK_METHODS = (
    "ekf_random",
    "ekf_all",
    "dssm_real",
    "locdreamer_random",
    "locdreamer_all",
    "locdreamer_scheduling",
)

# Published reference tracking errors (meters) for the six methods on the
# real dataset, shipped for display next to locally computed numbers.
REFERENCE_ERRORS = {
    "ekf_random": {"mae": 1.05, "rmse": 1.67, "p50": 0.71, "p90": 1.83},
    "ekf_all": {"mae": 0.92, "rmse": 1.50, "p50": 0.63, "p90": 1.41},
    "dssm_real": {"mae": 0.57, "rmse": 0.64, "p50": 0.54, "p90": 0.96},
    "locdreamer_random": {"mae": 1.07, "rmse": 1.43, "p50": 0.82, "p90": 2.05},
    "locdreamer_all": {"mae": 0.85, "rmse": 1.07, "p50": 0.68, "p90": 1.60},
    "locdreamer_scheduling": {"mae": 0.66, "rmse": 0.77, "p50": 0.60, "p90": 1.18},
}


@dataclass(frozen=True)
class MetricReport:
    method: str
    mae: float
    rmse: float
    p50: float
    p90: float
    n_traj: int
    n_steps: int

    def __post_init__(self):
        if not (0 <= self.mae <= self.rmse + 1e-12):
            raise ValueError("MAE must be nonnegative and <= RMSE")
        if not (0 <= self.p50 <= self.p90 + 1e-12):
            raise ValueError("median error must be <= 90th percentile")


@dataclass
class HeatmapGrid:
    cells_x: int
    cells_y: int
    centers: np.ndarray  # (cells_x * cells_y, 2)
    subsets: list[tuple[int, ...]]  # chosen anchor ids per cell


def compute_metrics(estimates: np.ndarray, truth: np.ndarray, method: str = "",
                    n_traj: int = 1) -> MetricReport:
    """Position-error metrics with linearly interpolated percentiles."""
    estimates = np.asarray(estimates, dtype=np.float64).reshape(-1, 2)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1, 2)
    if estimates.shape != truth.shape or estimates.shape[0] < 1:
        raise ValueError("estimates and truth must align with length >= 1")
    err = np.linalg.norm(estimates - truth, axis=1)
    return MetricReport(
        method=method,
        mae=float(err.mean()),
        rmse=float(np.sqrt((err ** 2).mean())),
        p50=float(np.percentile(err, 50, method="linear")),
        p90=float(np.percentile(err, 90, method="linear")),
        n_traj=n_traj,
        n_steps=int(err.size),
    )


def _ekf_estimates(records: list[TrajectoryRecord], layout: AnchorLayout,
                   mode: str, K: int, cfg: EkfConfig, rng: np.random.Generator,
                   T: int) -> np.ndarray:
    A = layout.size
    out = []
    for rec in records:
        if mode == "all":
            source = lambda t: np.ones(A)
        else:
            source = lambda t: uniform_random_subset(A, K, rng).alpha
        out.append(ekf_run(rec, layout, source, cfg)[:T])
    return np.stack(out)


def window_records(records: list[TrajectoryRecord], window: int,
                   ) -> list[TrajectoryRecord]:
    """Split records into non-overlapping `window`-step segments.

    Tracking quality is measured per segment, with every method
    re-initializing at each segment start, which keeps long trajectories
    comparable to the sequence length the models train at. A trailing
    remainder shorter than `window` is dropped.
    """
    out = []
    for rec in records:
        for w, start in enumerate(range(0, rec.steps - window + 1, window)):
            out.append(TrajectoryRecord(
                traj_id=f"{rec.traj_id}:w{w}",
                positions=None if rec.positions is None
                else rec.positions[start:start + window],
                measurements=rec.measurements[start:start + window],
                dt=rec.dt,
            ))
    return out or list(records)


def run_benchmark(records: list[TrajectoryRecord], layout: AnchorLayout,
                  K: int, seed: int, locdreamer: TrainState | None = None,
                  dssm_real: TrainState | None = None,
                  ekf_cfg: EkfConfig | None = None,
                  methods: tuple[str, ...] = BENCHMARK_METHODS,
                  eval_window: int | None = None,
                  locdreamer_random_variant: TrainState | None = None,
                  locdreamer_all_variant: TrainState | None = None,
                  ) -> tuple[list[MetricReport], dict[str, np.ndarray], list[str]]:
    """Evaluate the method matrix on one shared set of trajectories.

    Every method sees the same records, windowed into `eval_window`-step
    segments (None keeps whole trajectories); per-method rngs spawn from
    the same seed, so reruns are identical. Methods whose checkpoint is
    missing are skipped with a notice. Returns (reports, per-method
    estimate arrays, notices).
    """
    if not records:
        raise ValueError("no evaluation records")
    if eval_window:
        records = window_records(records, eval_window)
    T = min(r.steps for r in records)  # ragged records evaluate on a shared prefix
    truth = np.stack([r.positions[:T] for r in records])
    ekf_cfg = ekf_cfg or EkfConfig(dt=records[0].dt)
    batch = records_to_batch(records, layout, [(i, 0) for i in range(len(records))], T)
    reports: list[MetricReport] = []
    estimates: dict[str, np.ndarray] = {}
    notices: list[str] = []

    def add(method: str, est: np.ndarray) -> None:
        estimates[method] = est
        reports.append(compute_metrics(est, truth, method, n_traj=len(records)))

    for method in methods:
        # zlib.crc32 is stable across processes, unlike builtin hash().
        rng = np.random.default_rng([seed, zlib.crc32(method.encode())])
        if method == "ekf_random":
            add(method, _ekf_estimates(records, layout, "random", K, ekf_cfg, rng, T))
        elif method == "ekf_all":
            add(method, _ekf_estimates(records, layout, "all", K, ekf_cfg, rng, T))
        elif method == "dssm_real":
            if dssm_real is None:
                notices.append("dssm_real skipped: checkpoint not provided")
                continue
            with no_grad():
                res = filter_batch_scheduled(batch, dssm_real.dssm, rng, "all", K)
            add(method, res.estimates)
        elif method in ("locdreamer_random", "locdreamer_all", "locdreamer_scheduling"):
            # The random/all rows prefer their own imagination-trained
            # variants (trained under that scheduling rule); without one
            # they fall back to re-scheduling the policy-trained model.
            mode = {"locdreamer_random": "random", "locdreamer_all": "all",
                    "locdreamer_scheduling": "greedy"}[method]
            variant = {"locdreamer_random": locdreamer_random_variant,
                       "locdreamer_all": locdreamer_all_variant,
                       "locdreamer_scheduling": locdreamer}[method] or locdreamer
            if variant is None or (mode == "greedy" and variant.ac is None):
                notices.append(f"{method} skipped: checkpoint not provided")
                continue
            with no_grad():
                res = filter_batch_scheduled(batch, variant.dssm, rng, mode, K,
                                             variant.ac)
            add(method, res.estimates)
        else:
            raise ValueError(f"unknown benchmark method {method!r}")
    return reports, estimates, notices


def gdop(p, anchor_positions: np.ndarray, min_range: float = 1e-9) -> float:
    """Geometric dilution of precision for 2-d position from ranging.

    Rows of H are unit bearings from the target to each anchor;
    GDOP = sqrt(trace((H^T H)^-1)). Anchors coincident with the target are
    skipped; fewer than 2 usable rows or a singular geometry returns +inf.
    """
    p = np.asarray(p, dtype=np.float64)
    anchors = np.asarray(anchor_positions, dtype=np.float64).reshape(-1, 2)
    delta = p[None, :] - anchors
    r = np.hypot(delta[:, 0], delta[:, 1])
    keep = r > min_range
    if keep.sum() < 2:
        return float("inf")
    H = delta[keep] / r[keep, None]
    gram = H.T @ H
    det = gram[0, 0] * gram[1, 1] - gram[0, 1] * gram[1, 0]
    if det < 1e-12:
        return float("inf")
    inv_trace = (gram[0, 0] + gram[1, 1]) / det
    return float(np.sqrt(inv_trace))


def mean_random_subset_gdop(p, layout_positions: np.ndarray, K: int,
                            rng: np.random.Generator, draws: int = 1000) -> float:
    """Monte-Carlo mean GDOP of uniform K-subsets at a probe point."""
    A = layout_positions.shape[0]
    total = 0.0
    for _ in range(draws):
        idx = rng.choice(A, size=K, replace=False)
        total += gdop(p, layout_positions[idx])
    return total / draws


def scheduling_heatmap(state: TrainState, layout: AnchorLayout,
                       map_region: MapRegion, cells_x: int, cells_y: int,
                       prior_stddev: float = 1.0) -> HeatmapGrid:
    """Greedy policy subsets over a spatial probe grid.

    Each cell probes the policy with prior mean at the cell center, zero
    velocity, the configured prior stddev, and a zero hidden state, so the
    map depends only on the checkpoint.
    """
    if state.ac is None:
        raise ValueError("heatmap requires a trained scheduler")
    cfg = state.cfg.dssm_config()
    K = state.cfg.scheduled_anchors
    xs = (np.arange(cells_x) + 0.5) * (map_region.width / cells_x)
    ys = (np.arange(cells_y) + 0.5) * (map_region.height / cells_y)
    centers = []
    subsets = []
    h_zero = np.zeros(cfg.h_dim)
    with no_grad():
        for y in ys:
            for x in xs:
                s = policy_state_features(np.array([x, y, 0.0, 0.0]),
                                          np.full(4, prior_stddev), h_zero, cfg)
                logits = policy_logits(Tensor(s), state.ac)
                action = greedy_subset(logits, K)
                ids = tuple(sorted(layout.ids[i] for i in action.selected()))
                centers.append([x, y])
                subsets.append(ids)
    return HeatmapGrid(cells_x=cells_x, cells_y=cells_y,
                       centers=np.array(centers), subsets=subsets)


def heatmap_gdop_comparison(grid: HeatmapGrid, layout: AnchorLayout, K: int,
                            seed: int, draws: int = 1000) -> tuple[float, float]:
    """(policy mean GDOP, random-subset mean GDOP) over the probe grid."""
    rng = np.random.default_rng([seed, 31337])
    policy_total = 0.0
    random_total = 0.0
    for center, ids in zip(grid.centers, grid.subsets):
        pos = np.stack([layout.position_of(i) for i in ids])
        policy_total += gdop(center, pos)
        random_total += mean_random_subset_gdop(center, layout.positions, K, rng,
                                                draws)
    n = len(grid.subsets)
    return policy_total / n, random_total / n


def ratio_report(reports: list[MetricReport]) -> dict[str, float]:
    """Headline ratios comparing the learned scheduler to the baselines.

    improvement_over_ekf_random: 1 - sched MAE / EKF-random MAE.
    fraction_of_real_accuracy: real-data model MAE / sched MAE (how close
    imagination training comes to training on real measurements).
    """
    by_name = {r.method: r for r in reports}
    out: dict[str, float] = {}
    sched = by_name.get("locdreamer_scheduling")
    if sched and "ekf_random" in by_name:
        out["improvement_over_ekf_random"] = 1.0 - sched.mae / by_name["ekf_random"].mae
    if sched and "dssm_real" in by_name:
        out["fraction_of_real_accuracy"] = by_name["dssm_real"].mae / sched.mae
    return out


# -- plot-data exports ---------------------------------------------------------


def export_metrics(reports: list[MetricReport], path) -> None:
    lines = ["method,mae,rmse,p50,p90,n_traj,n_steps"]
    for r in reports:
        lines.append(f"{r.method},{repr(r.mae)},{repr(r.rmse)},{repr(r.p50)},"
                     f"{repr(r.p90)},{r.n_traj},{r.n_steps}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def export_trajectories(records: list[TrajectoryRecord],
                        estimates: dict[str, np.ndarray], path) -> None:
    """One row per (method, trajectory, step) with truth and estimate."""
    lines = ["method,traj_id,t,x_true,y_true,x_est,y_est"]
    for method in sorted(estimates):
        est = estimates[method]
        for i, rec in enumerate(records):
            for t in range(min(rec.steps, est.shape[1])):
                xt, yt = rec.positions[t]
                xe, ye = est[i, t]
                lines.append(f"{method},{rec.traj_id},{t + 1},{repr(float(xt))},"
                             f"{repr(float(yt))},{repr(float(xe))},{repr(float(ye))}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def export_heatmap(grid: HeatmapGrid, path) -> None:
    lines = ["cell_x,cell_y,anchor_set"]
    for center, ids in zip(grid.centers, grid.subsets):
        joined = "|".join(str(i) for i in ids)
        lines.append(f"{repr(float(center[0]))},{repr(float(center[1]))},{joined}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
