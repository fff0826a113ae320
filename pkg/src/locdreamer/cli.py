"""Command-line entry point for reproducible experiment runs.

Subcommands: simulate, pretrain, imagine-train, evaluate, heatmap and
convert-dataset. Configuration is a flat `key = value` text file with
typed parsing and unknown-key rejection; every command echoes the fully
resolved configuration into the output directory before it runs, and the
exit code is 0 exactly when every requested output file was written.

Seed precedence: --seed flag, then the config's seed key, then the
LOCDREAMER_SEED environment variable. With none of the three present the
command refuses to run rather than pick a hidden default.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .env import (
    AnchorLayout,
    DatasetFormatError,
    MapRegion,
    NoiseModel,
    TrajectoryRecord,
    export_dataset,
    ingest_dataset,
    read_anchor_layout,
    simulate_dataset,
)
from .evaluation import (
    BENCHMARK_METHODS,
    REFERENCE_ERRORS,
    export_heatmap,
    export_metrics,
    export_trajectories,
    ratio_report,
    run_benchmark,
    scheduling_heatmap,
    window_records,
)
from .trainer import (
    CheckpointError,
    TrainConfig,
    checkpoint_load,
    checkpoint_save,
    export_training_log,
    imagine_train,
    make_state,
    pretrain_dssm,
)

__all__ = ["ExperimentConfig", "ConfigError", "load_config", "write_config", "main"]

SEED_ENV_VAR = "LOCDREAMER_SEED"


class ConfigError(ValueError):
    """Invalid configuration; the message lists every violated key."""


@dataclass
class ExperimentConfig:
    """Flat experiment configuration; every key has a typed default."""

    # Environment geometry and noise
    map_width: float = 9.18
    map_height: float = 12.06
    walls: str = ""  # "x1 y1 x2 y2; x1 y1 x2 y2; ..."
    anchor_layout: str = ""
    dataset: str = ""
    bootstrap_anchors: str = "6,7,8"
    deployment_anchors: str = "1,2,3,4,5"
    los_stddev: float = 0.15
    nlos_probability_per_wall: float = 0.6
    nlos_bias_mean: float = 0.8
    nlos_bias_stddev: float = 0.4

    # Synthetic motion
    dt: float = 0.1
    speed_min: float = 0.5
    speed_max: float = 1.5
    turn_rate_stddev: float = 1.5
    n_trajectories: int = 12
    trajectory_steps: int = 96

    # Training
    dssm_epochs: int = 50
    imagine_epochs: int = 300
    batch_size: int = 32
    seq_len: int = 32
    hidden_size: int = 50
    rnn_layers: int = 2
    learning_rate: float = 1e-3
    ac_learning_rate: float = 1e-3
    weight_decay: float = 1e-3
    discount: float = 0.99
    scheduled_anchors: int = 3
    batches_per_epoch: int = 8
    val_fraction: float = 0.1
    entropy_coef: float = 1e-2
    reward_anchors: str = "union"
    kl_gradient: str = "both"

    # Evaluation
    eval_trajectories: int = 5
    heatmap_cells_x: int = 6
    heatmap_cells_y: int = 8
    eval_methods: str = ",".join(BENCHMARK_METHODS)
    checkpoint_dssm_real: str = ""

    # Dataset conversion (wide CSV -> trajectory schema)
    convert_input: str = ""
    convert_x_column: str = "x"
    convert_y_column: str = "y"
    convert_distance_prefix: str = "d_"
    convert_traj_column: str = ""

    seed: int | None = None

    def anchor_ids(self, key: str) -> tuple[int, ...]:
        raw = getattr(self, key)
        try:
            return tuple(int(x) for x in raw.split(",") if x.strip() != "")
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated integers, got {raw!r}")

    def wall_segments(self) -> tuple[tuple[float, float, float, float], ...]:
        if not self.walls.strip():
            return ()
        out = []
        for part in self.walls.split(";"):
            nums = part.split()
            if len(nums) != 4:
                raise ConfigError(f"walls: each segment needs 4 numbers, got {part!r}")
            out.append(tuple(float(x) for x in nums))
        return tuple(out)

    def map_region(self) -> MapRegion:
        return MapRegion(self.map_width, self.map_height, self.wall_segments())

    def noise_model(self) -> NoiseModel:
        return NoiseModel(self.los_stddev, self.nlos_probability_per_wall,
                          self.nlos_bias_mean, self.nlos_bias_stddev)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            dssm_epochs=self.dssm_epochs, imagine_epochs=self.imagine_epochs,
            batch_size=self.batch_size, seq_len=self.seq_len,
            hidden=self.hidden_size, rnn_layers=self.rnn_layers,
            lr=self.learning_rate, ac_lr=self.ac_learning_rate,
            weight_decay=self.weight_decay, gamma=self.discount,
            scheduled_anchors=self.scheduled_anchors, dt=self.dt, seed=seed,
            bootstrap_ids=self.anchor_ids("bootstrap_anchors"),
            deployment_ids=self.anchor_ids("deployment_anchors"),
            batches_per_epoch=self.batches_per_epoch,
            val_fraction=self.val_fraction, entropy_coef=self.entropy_coef,
            reward_anchors=self.reward_anchors, kl_gradient=self.kl_gradient,
            map_width=self.map_width, map_height=self.map_height)


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, raw: str):
    ftype = _FIELD_TYPES[key]
    if ftype in ("int | None",):
        if raw.lower() in ("none", ""):
            return None
        return int(raw)
    if ftype == "int":
        return int(raw)
    if ftype == "float":
        return float(raw)
    return raw


def load_config(path) -> ExperimentConfig:
    """Parse a `key = value` file; unknown keys and bad values all reported."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}")
    values: dict[str, object] = {}
    problems: list[str] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            problems.append(f"line {lineno}: expected 'key = value'")
            continue
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _FIELD_TYPES:
            problems.append(f"line {lineno}: unknown key '{key}'")
            continue
        if key in values:
            problems.append(f"line {lineno}: duplicate key '{key}'")
            continue
        try:
            values[key] = _coerce(key, raw)
        except ValueError:
            problems.append(f"line {lineno}: key '{key}' has invalid value {raw!r}")
    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))
    return ExperimentConfig(**values)


def write_config(cfg: ExperimentConfig, path) -> None:
    """Lossless round-trip form: parsing the output reproduces `cfg`."""
    lines = []
    for f in fields(ExperimentConfig):
        v = getattr(cfg, f.name)
        if v is None:
            rendered = "none"
        elif isinstance(v, float):
            rendered = repr(v)
        else:
            rendered = str(v)
        lines.append(f"{f.name} = {rendered}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _resolve_seed(args, cfg: ExperimentConfig) -> int:
    if args.seed is not None:
        return args.seed
    if cfg.seed is not None:
        return cfg.seed
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env!r}")
    raise ConfigError("no seed given: pass --seed, set seed in the config, "
                      f"or export {SEED_ENV_VAR}")


def _validate(cfg: ExperimentConfig, out_dir: Path, require_files: tuple[str, ...],
              ) -> None:
    problems = []
    for key in require_files:
        value = getattr(cfg, key)
        if not value:
            problems.append(f"{key}: required for this command")
        elif not Path(value).exists():
            problems.append(f"{key}: file not found: {value}")
    for key in ("map_width", "map_height", "dt", "speed_min", "speed_max"):
        if getattr(cfg, key) <= 0:
            problems.append(f"{key}: must be positive")
    if cfg.speed_min > cfg.speed_max:
        problems.append("speed_min: must not exceed speed_max")
    if not 3 <= cfg.scheduled_anchors <= len(cfg.anchor_ids("deployment_anchors")):
        problems.append("scheduled_anchors: must satisfy 3 <= K <= deployment size")
    if cfg.reward_anchors not in ("union", "selected"):
        problems.append("reward_anchors: must be 'union' or 'selected'")
    if cfg.kl_gradient not in ("both", "stop_prior", "stop_posterior"):
        problems.append("kl_gradient: must be both, stop_prior or stop_posterior")
    try:
        cfg.wall_segments()
    except ConfigError as exc:
        problems.append(str(exc))
    probe = out_dir
    while not probe.exists() and probe.parent != probe:
        probe = probe.parent
    if not os.access(probe, os.W_OK):
        problems.append(f"output directory not writable: {out_dir}")
    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))


def _echo_config(cfg: ExperimentConfig, seed: int, out_dir: Path) -> None:
    resolved = ExperimentConfig(**{**{f.name: getattr(cfg, f.name)
                                      for f in fields(ExperimentConfig)},
                                   "seed": seed})
    write_config(resolved, out_dir / "resolved_config.cfg")


def _split_eval(records: list[TrajectoryRecord], cfg: ExperimentConfig):
    """Last eval_trajectories records are the held-out evaluation set."""
    n_eval = min(cfg.eval_trajectories, max(1, len(records) - 1))
    return records[:-n_eval] or records, records[-n_eval:]


def _require_anchors(records: list[TrajectoryRecord], ids: tuple[int, ...]) -> None:
    seen = set()
    for rec in records:
        for step in rec.measurements:
            seen.update(step.keys())
    missing = [i for i in ids if i not in seen]
    if missing:
        raise ConfigError("dataset has no measurements for anchor id(s): "
                          + ", ".join(str(i) for i in missing))


# -- commands -----------------------------------------------------------------


def cmd_simulate(cfg: ExperimentConfig, out_dir: Path, seed: int) -> list[Path]:
    layout = read_anchor_layout(cfg.anchor_layout)
    rng = np.random.default_rng([seed, 1])
    records = simulate_dataset(cfg.map_region(), layout, cfg.noise_model(),
                               cfg.n_trajectories, cfg.trajectory_steps, cfg.dt,
                               (cfg.speed_min, cfg.speed_max),
                               cfg.turn_rate_stddev, rng)
    path = out_dir / "dataset.csv"
    export_dataset(records, path)
    return [path]


def cmd_pretrain(cfg: ExperimentConfig, out_dir: Path, seed: int) -> list[Path]:
    layout = read_anchor_layout(cfg.anchor_layout)
    records = ingest_dataset(cfg.dataset, dt=cfg.dt)
    boot_ids = cfg.anchor_ids("bootstrap_anchors")
    _require_anchors(records, boot_ids)
    train_records, _ = _split_eval(records, cfg)
    state = make_state(cfg.train_config(seed))
    state = pretrain_dssm(state, train_records, layout.subset(boot_ids))
    ckpt = out_dir / "pretrain.ckpt"
    log = out_dir / "pretrain_log.csv"
    checkpoint_save(state, ckpt)
    export_training_log(state.log, log)
    return [ckpt, log]


def cmd_imagine_train(cfg: ExperimentConfig, out_dir: Path, seed: int,
                      checkpoint: str | None) -> list[Path]:
    if not checkpoint:
        raise ConfigError("imagine-train requires --checkpoint (the pretrain output)")
    layout = read_anchor_layout(cfg.anchor_layout)
    tc = cfg.train_config(seed)
    state = checkpoint_load(checkpoint, expect_cfg=tc)
    records = ingest_dataset(cfg.dataset, dt=cfg.dt)
    _, eval_records = _split_eval(records, cfg)
    dep = layout.subset(cfg.anchor_ids("deployment_anchors"))
    boot = layout.subset(cfg.anchor_ids("bootstrap_anchors"))
    state = imagine_train(state, cfg.map_region(), boot.positions, dep.positions,
                          eval_records=eval_records, eval_layout=dep)
    ckpt = out_dir / "locdreamer.ckpt"
    log = out_dir / "imagine_log.csv"
    checkpoint_save(state, ckpt)
    export_training_log(state.log, log)
    return [ckpt, log]


def cmd_evaluate(cfg: ExperimentConfig, out_dir: Path, seed: int,
                 checkpoint: str | None) -> list[Path]:
    layout = read_anchor_layout(cfg.anchor_layout)
    records = ingest_dataset(cfg.dataset, dt=cfg.dt)
    _, eval_records = _split_eval(records, cfg)
    eval_records = window_records(eval_records, cfg.seq_len)
    dep = layout.subset(cfg.anchor_ids("deployment_anchors"))
    locdreamer = checkpoint_load(checkpoint) if checkpoint else None
    dssm_real = (checkpoint_load(cfg.checkpoint_dssm_real)
                 if cfg.checkpoint_dssm_real else None)
    methods = tuple(m for m in cfg.eval_methods.split(",") if m)
    reports, estimates, notices = run_benchmark(
        eval_records, dep, cfg.scheduled_anchors, seed,
        locdreamer=locdreamer, dssm_real=dssm_real, methods=methods)
    for notice in notices:
        print(f"notice: {notice}")
    outputs = []
    metrics_path = out_dir / "metrics.csv"
    export_metrics(reports, metrics_path)
    outputs.append(metrics_path)
    traj_path = out_dir / "trajectories.csv"
    export_trajectories(eval_records, estimates, traj_path)
    outputs.append(traj_path)
    ratios = ratio_report(reports)
    ratio_path = out_dir / "ratios.csv"
    _write_ratios(ratios, ratio_path)
    outputs.append(ratio_path)
    if locdreamer is not None and locdreamer.ac is not None:
        grid = scheduling_heatmap(locdreamer, dep, cfg.map_region(),
                                  cfg.heatmap_cells_x, cfg.heatmap_cells_y)
        heat_path = out_dir / "heatmap.csv"
        export_heatmap(grid, heat_path)
        outputs.append(heat_path)
    return outputs


def _write_ratios(ratios: dict[str, float], path: Path) -> None:
    # Locally computed ratios next to the published reference values; the
    # references are informational display, not assertions.
    reference = {"improvement_over_ekf_random": 1.0 - 0.66 / 1.05,
                 "fraction_of_real_accuracy": 0.57 / 0.66}
    lines = ["ratio,value,reference"]
    for key in sorted(reference):
        value = repr(ratios[key]) if key in ratios else ""
        lines.append(f"{key},{value},{repr(reference[key])}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def cmd_heatmap(cfg: ExperimentConfig, out_dir: Path, seed: int,
                checkpoint: str | None) -> list[Path]:
    if not checkpoint:
        raise ConfigError("heatmap requires --checkpoint (the imagine-train output)")
    layout = read_anchor_layout(cfg.anchor_layout)
    dep = layout.subset(cfg.anchor_ids("deployment_anchors"))
    state = checkpoint_load(checkpoint)
    grid = scheduling_heatmap(state, dep, cfg.map_region(),
                              cfg.heatmap_cells_x, cfg.heatmap_cells_y)
    path = out_dir / "heatmap.csv"
    export_heatmap(grid, path)
    return [path]


def cmd_convert_dataset(cfg: ExperimentConfig, out_dir: Path, seed: int) -> list[Path]:
    """Convert a wide per-row CSV (position + per-anchor ranges) to the
    trajectory schema. Distance columns are `<prefix><anchor_id>`; rows
    group into trajectories by the optional trajectory column, otherwise
    the whole file is one trajectory in row order."""
    src = Path(cfg.convert_input)
    lines = src.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DatasetFormatError(f"{src}: empty file")
    header = lines[0].split(",")
    try:
        xi = header.index(cfg.convert_x_column)
        yi = header.index(cfg.convert_y_column)
    except ValueError:
        raise DatasetFormatError(
            f"{src}: missing position columns "
            f"'{cfg.convert_x_column}'/'{cfg.convert_y_column}'")
    prefix = cfg.convert_distance_prefix
    anchor_cols = {i: int(name[len(prefix):]) for i, name in enumerate(header)
                   if name.startswith(prefix) and name[len(prefix):].isdigit()}
    if not anchor_cols:
        raise DatasetFormatError(f"{src}: no '{prefix}<id>' distance columns found")
    ti = header.index(cfg.convert_traj_column) if cfg.convert_traj_column else None

    groups: dict[str, list[tuple[np.ndarray, dict[int, float]]]] = {}
    order: list[str] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise DatasetFormatError(f"{src}: line {lineno}: expected "
                                     f"{len(header)} fields, got {len(parts)}")
        try:
            pos = np.array([float(parts[xi]), float(parts[yi])])
            meas = {aid: float(parts[col]) for col, aid in anchor_cols.items()
                    if parts[col].strip() != ""}
        except ValueError as exc:
            raise DatasetFormatError(f"{src}: line {lineno}: {exc}")
        bad = [d for d in meas.values() if d < 0]
        if bad:
            raise DatasetFormatError(f"{src}: line {lineno}: negative distance")
        key = parts[ti] if ti is not None else "traj000"
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append((pos, meas))

    records = []
    for key in order:
        rows = groups[key]
        records.append(TrajectoryRecord(
            traj_id=key, positions=np.stack([r[0] for r in rows]),
            measurements=[r[1] for r in rows], dt=cfg.dt))
    path = out_dir / "dataset.csv"
    export_dataset(records, path)
    return [path]


# -- entry point ------------------------------------------------------------------


_COMMANDS = {
    "simulate": (cmd_simulate, ("anchor_layout",), False),
    "pretrain": (cmd_pretrain, ("anchor_layout", "dataset"), False),
    "imagine-train": (cmd_imagine_train, ("anchor_layout", "dataset"), True),
    "evaluate": (cmd_evaluate, ("anchor_layout", "dataset"), True),
    "heatmap": (cmd_heatmap, ("anchor_layout",), True),
    "convert-dataset": (cmd_convert_dataset, ("convert_input",), False),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="locdreamer",
        description="World-model tracking and anchor scheduling experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, default=None, help="rng seed (u64)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--checkpoint", default=None, help="input checkpoint path")
        p.add_argument("--dry-run", action="store_true",
                       help="validate the config and exit without writing")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    fn, required, takes_checkpoint = _COMMANDS[args.command]
    out_dir = Path(args.out)
    try:
        cfg = load_config(args.config)
        seed = _resolve_seed(args, cfg)
        _validate(cfg, out_dir, required)
        if args.dry_run:
            print(f"{args.command}: config ok (seed {seed}); dry run, nothing written")
            return 0
        out_dir.mkdir(parents=True, exist_ok=True)
        _echo_config(cfg, seed, out_dir)
        if takes_checkpoint:
            outputs = fn(cfg, out_dir, seed, args.checkpoint)
        else:
            outputs = fn(cfg, out_dir, seed)
    except (ConfigError, DatasetFormatError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    missing = [p for p in outputs if not Path(p).exists()]
    if missing:
        print(f"error: outputs not written: {missing}", file=sys.stderr)
        return 1
    for p in outputs:
        print(f"wrote {p}")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
