"""Two-stage training: bootstrap pretraining, then imagination fine-tuning.

Stage one fits the world model to real measurement sequences from the
always-on bootstrap anchors. Stage two rolls the learned model forward in
imagination for a new anchor deployment, training the anchor scheduler and
fine-tuning the model jointly on its own synthetic measurements.

All randomness derives from (seed, stream, epoch) tuples, so training is
bit-reproducible and a run resumed from a checkpoint continues exactly as
the uninterrupted run would have.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .dssm import DssmConfig, DssmParams, dssm_init, filter_batch, \
    filter_batch_scheduled, imagine_rollout
from .env import AnchorLayout, MapRegion, SequenceBatch, TrajectoryRecord, \
    make_batches, records_to_batch
from .numkit import AdamState, Tensor, adam_init, adam_step, backward, no_grad, zero_grads
from .scheduler import AcConfig, AcParams, ac_init, actor_critic_losses

__all__ = [
    "TrainConfig",
    "TrainState",
    "LogRow",
    "TrainingDiverged",
    "CheckpointError",
    "make_state",
    "clone_state",
    "pretrain_dssm",
    "imagine_train",
    "imagine_train_fixed",
    "checkpoint_save",
    "checkpoint_load",
    "export_training_log",
    "split_records",
]


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; message names the epoch and batch."""


class CheckpointError(RuntimeError):
    """Unreadable checkpoint or one whose configuration does not match."""


@dataclass(frozen=True)
class TrainConfig:
    dssm_epochs: int = 50
    imagine_epochs: int = 300
    batch_size: int = 32
    seq_len: int = 32
    hidden: int = 50
    rnn_layers: int = 2
    lr: float = 1e-3
    ac_lr: float = 1e-3
    weight_decay: float = 1e-3
    gamma: float = 0.99
    scheduled_anchors: int = 3
    dt: float = 0.1
    seed: int = 0
    bootstrap_ids: tuple[int, ...] = (6, 7, 8)
    deployment_ids: tuple[int, ...] = (1, 2, 3, 4, 5)
    batches_per_epoch: int = 8
    val_fraction: float = 0.1
    val_batch_size: int = 16
    eval_sequences: int = 8
    entropy_coef: float = 1e-2
    reward_anchors: str = "union"
    kl_gradient: str = "both"
    # During imagination the prior is shielded from the KL: dream-stage
    # posteriors start out wrong for unseen anchors, and letting them drag
    # the pretrained dynamics destroys real-data tracking.
    imagine_kl_gradient: str = "stop_prior"
    clip_norm: float = 10.0
    sigma_floor: float = 1e-3
    map_width: float = 9.18
    map_height: float = 12.06

    def __post_init__(self):
        if not 3 <= self.scheduled_anchors <= len(self.deployment_ids):
            raise ValueError("scheduled anchors must satisfy 3 <= K <= A")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        for name in ("dssm_epochs", "imagine_epochs", "batch_size", "seq_len",
                     "hidden", "rnn_layers", "batches_per_epoch"):
            if getattr(self, name) < 0 or (name not in ("dssm_epochs", "imagine_epochs")
                                           and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive")

    def dssm_config(self) -> DssmConfig:
        return DssmConfig(hidden=self.hidden, rnn_layers=self.rnn_layers,
                          dt=self.dt, sigma_floor=self.sigma_floor,
                          kl_gradient=self.kl_gradient,
                          coord_center=(self.map_width / 2, self.map_height / 2),
                          coord_scale=2.0 / max(self.map_width, self.map_height))

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kwargs = dict(d)
        for key in ("bootstrap_ids", "deployment_ids"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class LogRow:
    epoch: int
    stage: str
    train_loss: float
    val_loss: float
    test_mae: float | None
    lr: float
    seconds: float


@dataclass
class TrainState:
    """Everything needed to continue training from an exact point."""

    cfg: TrainConfig
    dssm: DssmParams
    ac: AcParams | None = None
    adam_dssm: AdamState | None = None
    adam_actor: AdamState | None = None
    adam_critic: AdamState | None = None
    epoch_pretrain: int = 0
    epoch_imagine: int = 0
    log: list[LogRow] = field(default_factory=list)


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def make_state(cfg: TrainConfig) -> TrainState:
    dssm = dssm_init(cfg.dssm_config(), _rng(cfg.seed, 0))
    ac = ac_init(AcConfig(n_anchors=len(cfg.deployment_ids),
                          state_dim=cfg.dssm_config().policy_state_dim,
                          entropy_coef=cfg.entropy_coef),
                 _rng(cfg.seed, 1))
    return TrainState(cfg=cfg, dssm=dssm, ac=ac)


def clone_state(state: TrainState) -> TrainState:
    """Independent copy of the parameters (optimizer state starts fresh)."""
    out = make_state(state.cfg)
    for name, t in state.dssm.tensors().items():
        t2 = out.dssm.tensors()[name]
        t2.data = t.data.copy()
    if state.ac is None:
        out.ac = None
    else:
        for name, t in state.ac.tensors().items():
            out.ac.tensors()[name].data = t.data.copy()
    out.epoch_pretrain = state.epoch_pretrain
    return out


def split_records(records: list[TrajectoryRecord], val_fraction: float,
                  seed: int) -> tuple[list[TrajectoryRecord], list[TrajectoryRecord]]:
    """Deterministic train/validation split over whole trajectories."""
    if len(records) < 2 or val_fraction <= 0:
        return records, records[:1]
    order = _rng(seed, 9).permutation(len(records))
    n_val = max(1, int(round(val_fraction * len(records))))
    val_idx = set(order[:n_val].tolist())
    train = [r for i, r in enumerate(records) if i not in val_idx]
    val = [r for i, r in enumerate(records) if i in val_idx]
    return train, val


def _check_finite(value: float, stage: str, epoch: int, batch: int) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(
            f"{stage} loss became non-finite at epoch {epoch}, batch {batch}")


def pretrain_dssm(state: TrainState, records: list[TrajectoryRecord],
                  layout: AnchorLayout, stage: str = "pretrain") -> TrainState:
    """Train the world model with every `layout` anchor active at all steps.

    Runs from the state's pretrain epoch counter up to cfg.dssm_epochs; a
    zero-epoch config returns the state untouched. Validation loss and
    (when ground truth exists) tracking MAE come from held-out
    trajectories replayed with a fixed noise stream each epoch.
    """
    cfg = state.cfg
    if cfg.dssm_epochs == 0 or state.epoch_pretrain >= cfg.dssm_epochs:
        return state
    train, val = split_records(records, cfg.val_fraction, cfg.seed)
    val_windows = _fixed_windows(val, layout, min(cfg.val_batch_size, 2 * len(val)),
                                 cfg.seq_len, _rng(cfg.seed, 10))
    params = state.dssm.tensors()
    total_steps = cfg.dssm_epochs * cfg.batches_per_epoch
    if state.adam_dssm is None:
        state.adam_dssm = adam_init(params, cfg.lr, total_steps, cfg.weight_decay,
                                    cfg.clip_norm)
    stage_stream = 100 if stage == "pretrain" else 110
    for epoch in range(state.epoch_pretrain + 1, cfg.dssm_epochs + 1):
        t0 = time.perf_counter()
        rng = _rng(cfg.seed, stage_stream, epoch)
        losses = []
        lr_epoch = None
        for i, batch in enumerate(make_batches(train, layout, cfg.batch_size,
                                               cfg.seq_len, rng, cfg.batches_per_epoch)):
            zero_grads(params)
            loss = filter_batch(batch, state.dssm, rng).loss()
            _check_finite(loss.item(), stage, epoch, i + 1)
            backward(loss)
            lr = adam_step(params, state.adam_dssm)
            lr_epoch = lr if lr_epoch is None else lr_epoch
            losses.append(loss.item())
        val_loss, val_mae = _validate_filter(state, val_windows)
        state.log.append(LogRow(epoch=epoch, stage=stage,
                                train_loss=float(np.mean(losses)),
                                val_loss=val_loss, test_mae=val_mae,
                                lr=lr_epoch,
                                seconds=time.perf_counter() - t0))
        state.epoch_pretrain = epoch
    return state


def _fixed_windows(records: list[TrajectoryRecord], layout: AnchorLayout,
                   count: int, T: int, rng: np.random.Generator) -> SequenceBatch:
    eligible = [i for i, r in enumerate(records) if r.steps >= T]
    if not eligible:
        raise ValueError(f"no validation record has {T} steps")
    windows = []
    for _ in range(max(count, 1)):
        ri = eligible[int(rng.integers(len(eligible)))]
        start = int(rng.integers(records[ri].steps - T + 1))
        windows.append((ri, start))
    return records_to_batch(records, layout, windows, T)


def _validate_filter(state: TrainState, batch: SequenceBatch) -> tuple[float, float | None]:
    with no_grad():
        res = filter_batch(batch, state.dssm, _rng(state.cfg.seed, 11))
    mae = None
    if batch.truth is not None:
        err = np.linalg.norm(res.estimates - batch.truth, axis=-1)
        mae = float(err.mean())
    return res.loss().item(), mae


def imagine_train(state: TrainState, map_region: MapRegion,
                  boot_positions: np.ndarray, dep_positions: np.ndarray,
                  eval_records: list[TrajectoryRecord] | None = None,
                  eval_layout: AnchorLayout | None = None,
                  until_epoch: int | None = None) -> TrainState:
    """Joint imagination training of the world model and the scheduler.

    One optimizer step per parameter group per epoch, each epoch being one
    batch of imagined rollouts. Validation replays imagination with a
    fixed seed; test MAE (when eval data is given) tracks the greedy
    policy on real held-out sequences. `until_epoch` pauses the schedule
    early (for checkpointing); resuming continues the identical run.
    """
    cfg = state.cfg
    if state.ac is None:
        raise ValueError("state has no actor-critic parameters")
    last_epoch = cfg.imagine_epochs if until_epoch is None \
        else min(until_epoch, cfg.imagine_epochs)
    if cfg.imagine_epochs == 0 or state.epoch_imagine >= last_epoch:
        return state
    dssm_params = state.dssm.tensors()
    actor_params = state.ac.actor_tensors()
    critic_params = state.ac.critic_tensors()
    if state.adam_dssm is None or state.adam_dssm.total_steps != cfg.imagine_epochs:
        # Fresh cosine schedule for the fine-tuning stage.
        state.adam_dssm = adam_init(dssm_params, cfg.lr, cfg.imagine_epochs,
                                    cfg.weight_decay, cfg.clip_norm)
    if state.adam_actor is None:
        state.adam_actor = adam_init(actor_params, cfg.ac_lr, cfg.imagine_epochs,
                                     cfg.weight_decay, cfg.clip_norm)
    if state.adam_critic is None:
        state.adam_critic = adam_init(critic_params, cfg.ac_lr, cfg.imagine_epochs,
                                      cfg.weight_decay, cfg.clip_norm)
    eval_batch = None
    if eval_records is not None:
        if eval_layout is None:
            raise ValueError("eval_records requires eval_layout")
        n = min(cfg.eval_sequences, len(eval_records))
        T = min(cfg.seq_len, min(r.steps for r in eval_records[:n]))
        eval_batch = records_to_batch(eval_records[:n], eval_layout,
                                      [(i, 0) for i in range(n)], T)
    K = cfg.scheduled_anchors
    for epoch in range(state.epoch_imagine + 1, last_epoch + 1):
        t0 = time.perf_counter()
        rng = _rng(cfg.seed, 200, epoch)
        zero_grads(dssm_params)
        zero_grads(actor_params)
        zero_grads(critic_params)
        loss, buf, _ = imagine_rollout(state.dssm, state.ac, map_region,
                                       boot_positions, dep_positions,
                                       cfg.batch_size, cfg.seq_len, K, rng,
                                       cfg.reward_anchors,
                                       kl_gradient=cfg.imagine_kl_gradient)
        actor_loss, critic_loss = actor_critic_losses(buf, cfg.gamma, cfg.entropy_coef)
        _check_finite(loss.item(), "imagine", epoch, 1)
        _check_finite(actor_loss.item(), "imagine-actor", epoch, 1)
        _check_finite(critic_loss.item(), "imagine-critic", epoch, 1)
        backward(loss)
        backward(actor_loss)
        backward(critic_loss)
        for p in dssm_params.values():
            if p.grad is None:  # e.g. the dynamics MLP under a stopped KL side
                p.grad = np.zeros_like(p.data)
        lr = adam_step(dssm_params, state.adam_dssm)
        adam_step(actor_params, state.adam_actor)
        adam_step(critic_params, state.adam_critic)

        with no_grad():
            val_loss, _, _ = imagine_rollout(state.dssm, state.ac, map_region,
                                             boot_positions, dep_positions,
                                             cfg.val_batch_size, cfg.seq_len, K,
                                             _rng(cfg.seed, 202),
                                             cfg.reward_anchors,
                                             kl_gradient=cfg.imagine_kl_gradient)
        test_mae = None
        if eval_batch is not None:
            with no_grad():
                res = filter_batch_scheduled(eval_batch, state.dssm,
                                             _rng(cfg.seed, 203), "greedy", K,
                                             state.ac)
            if eval_batch.truth is not None:
                test_mae = float(np.linalg.norm(res.estimates - eval_batch.truth,
                                                axis=-1).mean())
        state.log.append(LogRow(epoch=epoch, stage="imagine",
                                train_loss=loss.item(), val_loss=val_loss.item(),
                                test_mae=test_mae, lr=lr,
                                seconds=time.perf_counter() - t0))
        state.epoch_imagine = epoch
    return state


def imagine_train_fixed(state: TrainState, map_region: MapRegion,
                        boot_positions: np.ndarray, dep_positions: np.ndarray,
                        action_mode: str) -> TrainState:
    """DSSM-only imagination fine-tuning under a fixed scheduling rule.

    The benchmark's non-policy variants train this way: anchors are either
    all active ('all') or drawn uniformly ('random') at every imagined
    step, and only the world model updates.
    """
    cfg = state.cfg
    dssm_params = state.dssm.tensors()
    adam = adam_init(dssm_params, cfg.lr, cfg.imagine_epochs, cfg.weight_decay,
                     cfg.clip_norm)
    stream = {"random": 210, "all": 211}[action_mode]
    for epoch in range(1, cfg.imagine_epochs + 1):
        t0 = time.perf_counter()
        rng = _rng(cfg.seed, stream, epoch)
        zero_grads(dssm_params)
        loss, _, _ = imagine_rollout(state.dssm, None, map_region,
                                     boot_positions, dep_positions,
                                     cfg.batch_size, cfg.seq_len,
                                     cfg.scheduled_anchors, rng,
                                     cfg.reward_anchors,
                                     kl_gradient=cfg.imagine_kl_gradient,
                                     action_mode=action_mode)
        _check_finite(loss.item(), f"imagine-{action_mode}", epoch, 1)
        backward(loss)
        for p in dssm_params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        lr = adam_step(dssm_params, adam)
        state.log.append(LogRow(epoch=epoch, stage=f"imagine_{action_mode}",
                                train_loss=loss.item(), val_loss=loss.item(),
                                test_mae=None, lr=lr,
                                seconds=time.perf_counter() - t0))
        state.epoch_imagine = epoch
    return state


# -- training log ----------------------------------------------------------------

_LOG_HEADER = "epoch,stage,train_loss,val_loss,test_mae,lr,seconds"


def export_training_log(rows: list[LogRow], path) -> None:
    lines = [_LOG_HEADER]
    for r in rows:
        mae = "" if r.test_mae is None else repr(float(r.test_mae))
        lines.append(f"{r.epoch},{r.stage},{repr(float(r.train_loss))},"
                     f"{repr(float(r.val_loss))},{mae},{repr(float(r.lr))},"
                     f"{repr(float(r.seconds))}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# -- checkpointing ------------------------------------------------------------------

_MAGIC = b"LDWM0001"


def _adam_to_header(adam: AdamState | None, name: str, arrays: dict[str, np.ndarray]):
    if adam is None:
        return None
    for key, m in adam.m.items():
        arrays[f"{name}.m.{key}"] = m
    for key, v in adam.v.items():
        arrays[f"{name}.v.{key}"] = v
    return {"step": adam.step, "lr0": adam.lr0, "total_steps": adam.total_steps,
            "weight_decay": adam.weight_decay, "beta1": adam.beta1,
            "beta2": adam.beta2, "eps": adam.eps, "clip_norm": adam.clip_norm,
            "keys": sorted(adam.m.keys())}


def _adam_from_header(meta, name: str, arrays: dict[str, np.ndarray]) -> AdamState | None:
    if meta is None:
        return None
    return AdamState(
        m={k: arrays[f"{name}.m.{k}"] for k in meta["keys"]},
        v={k: arrays[f"{name}.v.{k}"] for k in meta["keys"]},
        step=meta["step"], lr0=meta["lr0"], total_steps=meta["total_steps"],
        weight_decay=meta["weight_decay"], beta1=meta["beta1"], beta2=meta["beta2"],
        eps=meta["eps"], clip_norm=meta["clip_norm"])


def checkpoint_save(state: TrainState, path) -> None:
    """Write the full training state as a versioned, byte-stable binary."""
    arrays: dict[str, np.ndarray] = {}
    for name, t in state.dssm.tensors().items():
        arrays[f"dssm.{name}"] = t.data
    if state.ac is not None:
        for name, t in state.ac.tensors().items():
            arrays[f"ac.{name}"] = t.data
    header = {
        "config": state.cfg.to_dict(),
        "config_hash": state.cfg.config_hash(),
        "epoch_pretrain": state.epoch_pretrain,
        "epoch_imagine": state.epoch_imagine,
        "has_ac": state.ac is not None,
        "adam_dssm": _adam_to_header(state.adam_dssm, "adam_dssm", arrays),
        "adam_actor": _adam_to_header(state.adam_actor, "adam_actor", arrays),
        "adam_critic": _adam_to_header(state.adam_critic, "adam_critic", arrays),
    }
    names = sorted(arrays)
    header["tensors"] = [{"name": n, "shape": list(arrays[n].shape)} for n in names]
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def checkpoint_load(path, expect_cfg: TrainConfig | None = None) -> TrainState:
    """Rebuild a TrainState bit-exactly; rejects config-hash mismatches."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        n = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(n).decode())
        arrays: dict[str, np.ndarray] = {}
        for meta in header["tensors"]:
            shape = tuple(meta["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            arrays[meta["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    cfg = TrainConfig.from_dict(header["config"])
    if cfg.config_hash() != header["config_hash"]:
        raise CheckpointError(f"{path}: stored configuration hash mismatch")
    if expect_cfg is not None and expect_cfg.config_hash() != header["config_hash"]:
        raise CheckpointError(
            f"{path}: checkpoint was trained under a different configuration")
    state = make_state(cfg)
    for name, t in state.dssm.tensors().items():
        t.data = arrays[f"dssm.{name}"]
    if header["has_ac"]:
        for name, t in state.ac.tensors().items():
            t.data = arrays[f"ac.{name}"]
    else:
        state.ac = None
    state.adam_dssm = _adam_from_header(header["adam_dssm"], "adam_dssm", arrays)
    state.adam_actor = _adam_from_header(header["adam_actor"], "adam_actor", arrays)
    state.adam_critic = _adam_from_header(header["adam_critic"], "adam_critic", arrays)
    state.epoch_pretrain = header["epoch_pretrain"]
    state.epoch_imagine = header["epoch_imagine"]
    return state
