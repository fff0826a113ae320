"""Deep state-space world model for range-only target tracking.

Components, all batched over a leading B axis:

* sequence model -- a 2-layer GRU stack carrying the deterministic memory,
* dynamic model -- constant-velocity physics plus a learned MLP residual,
  producing a diagonal-Gaussian prior over the latent state [x, y, vx, vy],
* encoder -- permutation-invariant attention pooling over (distance, anchor
  position) pairs, producing the Gaussian posterior,
* decoder -- the measurement model: mean is exactly the Euclidean distance
  from the latent position to the anchor, stddev is a learned noise MLP.

Training maximizes per-step reconstruction log-likelihood minus the
posterior-to-prior KL; `imagine_rollout` closes the loop by decoding
synthetic measurements from the prior and scheduling anchors with a policy,
which is how the model trains for anchor sets it never measured.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .env import MapRegion, ObservationSet, SequenceBatch, TrajectoryRecord, AnchorLayout, \
    mask_observations, trilaterate
from .numkit import (
    DiagonalGaussian,
    GruCell,
    Mlp,
    Tensor,
    concat,
    gaussian_kl,
    gaussian_log_pdf_elementwise,
    gru_init,
    linear_init,
    mlp_init,
    no_grad,
    reparameterize,
)
from .numkit.nn import Linear
from .scheduler import AcParams, RolloutBuffer, critic_value, policy_entropy, \
    policy_logits, sample_subset

__all__ = [
    "DssmConfig",
    "DssmParams",
    "StepTrace",
    "FilterResult",
    "dssm_init",
    "init_hidden",
    "hidden_concat",
    "sequence_step",
    "prior_transition",
    "encode_posterior",
    "decode_distance",
    "elbo_step",
    "filter_rollout",
    "filter_batch",
    "filter_batch_scheduled",
    "imagine_rollout",
    "initial_state_from_observations",
    "policy_state_features",
]

Z_DIM = 4  # [x, y, vx, vy]


@dataclass(frozen=True)
class DssmConfig:
    hidden: int = 50
    rnn_layers: int = 2
    embed: int = 64
    attn_heads: int = 4
    dt: float = 0.1
    sigma_floor: float = 1e-3
    residual_scale: float = 0.1
    kl_gradient: str = "both"  # both | stop_prior | stop_posterior
    init_state_stddev: float = 1.0
    imagine_velocity_stddev: float = 0.3
    # Coordinates feed tanh networks, so they are centered on the map and
    # scaled to roughly [-1, 1]; distances are scaled by the same factor.
    coord_center: tuple[float, float] = (4.59, 6.03)
    coord_scale: float = 2.0 / 12.06
    # Upper bound on the decoder's range noise. Without it, training can
    # settle into explaining measurements purely as noise (sigma ~ the
    # spread of the data) instead of localizing; ranging error on this
    # hardware class is bounded, so the cap is physically reasonable.
    sigma_cap: float = 1.5

    def __post_init__(self):
        if self.embed % self.attn_heads:
            raise ValueError("embed width must divide evenly into heads")
        if self.kl_gradient not in ("both", "stop_prior", "stop_posterior"):
            raise ValueError(f"unknown kl_gradient mode {self.kl_gradient!r}")

    @property
    def h_dim(self) -> int:
        return self.hidden * self.rnn_layers

    @property
    def policy_state_dim(self) -> int:
        return 2 * Z_DIM + self.h_dim


@dataclass
class DssmParams:
    cfg: DssmConfig
    cells: list[GruCell]
    dyn: Mlp  # (z + h) -> ... -> 8: mean residual 4, raw stddev 4
    pair: Mlp  # (d, px, py) -> embed
    attn_query: Tensor  # (heads, head_dim) learned seed query
    attn_key: Linear
    attn_value: Linear
    attn_out: Linear
    post: Mlp  # (embed + z + h) -> 8
    dec: Mlp  # (z + h + px + py) -> 1 raw stddev

    def tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, cell in enumerate(self.cells):
            out.update(cell.tensors(f"gru{i}"))
        out.update(self.dyn.tensors("dyn"))
        out.update(self.pair.tensors("pair"))
        out["attn.query"] = self.attn_query
        out.update(self.attn_key.tensors("attn.key"))
        out.update(self.attn_value.tensors("attn.value"))
        out.update(self.attn_out.tensors("attn.out"))
        out.update(self.post.tensors("post"))
        out.update(self.dec.tensors("dec"))
        return out


def dssm_init(cfg: DssmConfig, rng: np.random.Generator) -> DssmParams:
    head_dim = cfg.embed // cfg.attn_heads
    cells = []
    in_size = Z_DIM
    for _ in range(cfg.rnn_layers):
        cells.append(gru_init(rng, in_size, cfg.hidden))
        in_size = cfg.hidden
    bound = 1.0 / math.sqrt(cfg.embed)
    return DssmParams(
        cfg=cfg,
        cells=cells,
        dyn=mlp_init(rng, [Z_DIM + cfg.h_dim, 64, 64, 2 * Z_DIM]),
        pair=mlp_init(rng, [3, 64, cfg.embed]),
        attn_query=Tensor(rng.uniform(-bound, bound, size=(cfg.attn_heads, head_dim)),
                          requires_grad=True),
        attn_key=linear_init(rng, cfg.embed, cfg.embed),
        attn_value=linear_init(rng, cfg.embed, cfg.embed),
        attn_out=linear_init(rng, cfg.embed, cfg.embed),
        post=mlp_init(rng, [cfg.embed + Z_DIM + cfg.h_dim, 64, 2 * Z_DIM]),
        dec=mlp_init(rng, [Z_DIM + cfg.h_dim + 2, 64, 64, 1]),
    )


def init_hidden(params: DssmParams, batch: int) -> list[Tensor]:
    return [Tensor(np.zeros((batch, params.cfg.hidden))) for _ in params.cells]


def hidden_concat(h) -> Tensor:
    """Concatenate the per-layer hidden states; passes a Tensor through."""
    if isinstance(h, Tensor):
        return h
    return concat(h, axis=-1) if len(h) > 1 else h[0]


def sequence_step(z_prev: Tensor, h_prev: list[Tensor], params: DssmParams) -> list[Tensor]:
    """Advance the GRU stack one step on the previous latent sample."""
    out = []
    x = _norm_z(z_prev, params.cfg)
    for cell, h in zip(params.cells, h_prev):
        x = cell(x, h)
        out.append(x)
    return out


def _norm_z(z: Tensor, cfg: DssmConfig) -> Tensor:
    return z


def _cv_matrix(dt: float) -> np.ndarray:
    F = np.eye(Z_DIM)
    F[0, 2] = dt
    F[1, 3] = dt
    return F


def prior_transition(z_prev: Tensor, h: list[Tensor], params: DssmParams) -> DiagonalGaussian:
    """Prior over the next latent: constant-velocity physics + MLP residual."""
    cfg = params.cfg
    phys = z_prev @ Tensor(_cv_matrix(cfg.dt).T)
    out = params.dyn(concat([_norm_z(z_prev, cfg), hidden_concat(h)], axis=-1))
    mean = phys + cfg.residual_scale * out[..., :Z_DIM]
    std = out[..., Z_DIM:].softplus() + cfg.sigma_floor
    return DiagonalGaussian(mean, std)


def encode_posterior(z_prev: Tensor, h: list[Tensor], distances: Tensor,
                     anchor_positions: np.ndarray, params: DssmParams,
                     present: np.ndarray | None = None) -> DiagonalGaussian:
    """Posterior from an observation set via attention pooling.

    distances: (B, S) Tensor; anchor_positions: (S, 2) shared or (B, S, 2)
    per batch member; present: optional (B, S) bool mask for padded slots.
    One learned query attends over the pair embeddings, so the output is
    invariant to pair order and tolerant of variable set sizes.
    """
    cfg = params.cfg
    B, S = distances.shape
    if present is not None and not present.any(axis=-1).all():
        raise ValueError("encoder needs at least one observation per batch member")
    if S < 1:
        raise ValueError("encoder needs a nonempty observation set")
    heads, head_dim = cfg.attn_heads, cfg.embed // cfg.attn_heads

    pos = np.broadcast_to(np.asarray(anchor_positions, dtype=np.float64), (B, S, 2))
    feats = concat([distances.reshape(B, S, 1), Tensor(pos.copy())], axis=-1)
    e = params.pair(feats)  # (B, S, E)

    k = params.attn_key(e).reshape(B, S, heads, head_dim).transpose((0, 2, 1, 3))
    v = params.attn_value(e).reshape(B, S, heads, head_dim).transpose((0, 2, 1, 3))
    q = params.attn_query.reshape(1, heads, 1, head_dim)
    logits = (k * q).sum(axis=-1) * (1.0 / math.sqrt(head_dim))  # (B, heads, S)
    if present is not None:
        logits = logits + Tensor(np.where(present, 0.0, -1e30)[:, None, :])
    shifted = logits - Tensor(logits.max(axis=-1, keepdims=True))
    weights = shifted.exp()
    weights = weights / weights.sum(axis=-1, keepdims=True)
    pooled = (weights.reshape(B, heads, 1, S) @ v).reshape(B, cfg.embed)
    pooled = params.attn_out(pooled)

    out = params.post(concat([pooled, _norm_z(z_prev, cfg),
                              hidden_concat(h)], axis=-1))
    # Correction on top of the constant-velocity propagation of the previous
    # sample: at init the posterior then sits near the prior, and learning
    # concentrates on how the observations should move it.
    mean = z_prev @ Tensor(_cv_matrix(cfg.dt).T) + out[..., :Z_DIM]
    std = out[..., Z_DIM:].softplus() + cfg.sigma_floor
    return DiagonalGaussian(mean, std)


def decode_distance(z_sample: Tensor, h, anchor_positions: np.ndarray,
                    params: DssmParams) -> DiagonalGaussian:
    """Measurement model per anchor: exact Euclidean mean, learned stddev.

    anchor_positions is (A, 2) shared or (B, A, 2) per member; the result
    is a DiagonalGaussian over shape (B, A). The first noise-MLP layer is
    split into a state part (computed once per call) and an anchor part so
    the widest activation stays (B*A, hidden), not (B*A, state+hidden).
    """
    cfg = params.cfg
    B = z_sample.shape[0]
    pos = np.asarray(anchor_positions, dtype=np.float64)
    shared = pos.ndim == 2
    A = pos.shape[0] if shared else pos.shape[1]

    diff = z_sample[..., :2].reshape(B, 1, 2) - Tensor(pos)
    mu = (diff * diff).sum(axis=-1).sqrt()  # (B, A)

    zh_dim = Z_DIM + cfg.h_dim
    first = params.dec.layers[0]
    zh_part = concat([_norm_z(z_sample, cfg), hidden_concat(h)], axis=-1) \
        @ first.w[:zh_dim] + first.b
    p_part = Tensor(pos.reshape(-1, 2)) @ first.w[zh_dim:]
    x = (zh_part.reshape(B, 1, -1) + p_part.reshape(1 if shared else B, A, -1)).tanh()
    x = x.reshape(B * A, x.shape[-1])
    for layer in params.dec.layers[1:-1]:
        x = layer(x).tanh()
    raw = params.dec.layers[-1](x).reshape(B, A)
    std = cfg.sigma_floor + (cfg.sigma_cap - cfg.sigma_floor) * raw.sigmoid()
    return DiagonalGaussian(mu, std)


def elbo_step(decoded: DiagonalGaussian, targets: np.ndarray, target_mask: np.ndarray,
              posterior: DiagonalGaussian, prior: DiagonalGaussian,
              kl_gradient: str = "both") -> tuple[Tensor, Tensor]:
    """Per-member reconstruction log-likelihood and KL for one timestep.

    Returns (recon, dyn), each shape (B,). The training contribution is
    -recon + dyn. Masked-out targets contribute exactly zero.
    """
    mask = np.asarray(target_mask, dtype=np.float64)
    safe = np.where(mask > 0, np.nan_to_num(targets), 0.0)
    lp = gaussian_log_pdf_elementwise(Tensor(safe), decoded)
    recon = (lp * Tensor(mask)).sum(axis=-1)
    if kl_gradient == "stop_prior":
        dyn = gaussian_kl(posterior, prior.detach())
    elif kl_gradient == "stop_posterior":
        dyn = gaussian_kl(posterior.detach(), prior)
    else:
        dyn = gaussian_kl(posterior, prior)
    return recon, dyn


def policy_state_features(mean: np.ndarray, stddev: np.ndarray,
                          h_cat: np.ndarray, cfg: DssmConfig) -> np.ndarray:
    """Detached scheduler input: normalized prior mean, stddev, hidden.

    Uses the model's own coordinate normalization, so probe states built
    elsewhere (e.g. heatmap grids) match the training distribution.
    """
    return np.concatenate([mean, stddev, h_cat], axis=-1)


def initial_state_from_observations(obs_dist: np.ndarray, obs_pos: np.ndarray,
                                    stddev: float) -> DiagonalGaussian:
    """Initial latent belief: trilaterated position, zero velocity.

    Falls back to the centroid of the observed anchors when the geometry
    is degenerate (fewer than three usable ranges or collinear anchors).
    """
    try:
        p = trilaterate(obs_dist, obs_pos)
    except ValueError:
        p = np.asarray(obs_pos, dtype=np.float64).reshape(-1, 2).mean(axis=0)
    mean = np.array([p[0], p[1], 0.0, 0.0])
    return DiagonalGaussian(Tensor(mean.reshape(1, Z_DIM)),
                            Tensor(np.full((1, Z_DIM), stddev)))


@dataclass
class StepTrace:
    """Per-step record of one filtering or imagination pass."""

    prior_mean: list = field(default_factory=list)
    prior_std: list = field(default_factory=list)
    post_mean: list = field(default_factory=list)
    post_std: list = field(default_factory=list)
    z_sample: list = field(default_factory=list)
    hidden: list = field(default_factory=list)
    decoded_mean: list = field(default_factory=list)
    decoded_std: list = field(default_factory=list)
    action: list = field(default_factory=list)
    observations: list = field(default_factory=list)
    recon: list = field(default_factory=list)
    dyn: list = field(default_factory=list)


@dataclass
class FilterResult:
    estimates: np.ndarray  # (T, 2) or (B, T, 2) posterior-mean positions
    recon_sum: Tensor  # summed over batch and time
    dyn_sum: Tensor
    steps: int
    empty_steps: int = 0
    trace: StepTrace | None = None

    def loss(self) -> Tensor:
        """Mean over batch and time of (-recon + dyn)."""
        b = self.estimates.shape[0] if self.estimates.ndim == 3 else 1
        return (self.dyn_sum - self.recon_sum) * (1.0 / (b * self.steps))


def filter_rollout(record: TrajectoryRecord, layout: AnchorLayout, action_source,
                   params: DssmParams, rng: np.random.Generator,
                   collect_trace: bool = False) -> FilterResult:
    """Filter one trajectory, scheduling anchors per `action_source`.

    `action_source(t, policy_state)` returns the SchedulingAction for
    1-based step t given the detached policy state (prior mean, prior
    stddev, hidden). The initial belief triangulates every measurement
    available at step 1. A step whose action selects no available
    measurement falls back to the prior (counted in empty_steps).
    """
    cfg = params.cfg
    T = record.steps
    first = record.measurements[0]
    ids_present = [aid for aid in layout.ids if aid in first]
    z0 = initial_state_from_observations(
        np.array([first[a] for a in ids_present]),
        np.stack([layout.position_of(a) for a in ids_present]) if ids_present
        else layout.positions,
        cfg.init_state_stddev)
    z = reparameterize(z0, rng.standard_normal((1, Z_DIM)))
    h = init_hidden(params, 1)

    estimates = np.zeros((T, 2))
    recon_sum = Tensor(np.zeros(()))
    dyn_sum = Tensor(np.zeros(()))
    trace = StepTrace() if collect_trace else None
    empty = 0
    for t in range(T):
        hc = hidden_concat(h)
        prior = prior_transition(z, hc, params)
        state_vec = policy_state_features(prior.mean.data[0], prior.stddev.data[0],
                                          hc.data[0], cfg)
        action = action_source(t + 1, state_vec)
        obs, _ = mask_observations(record.measurements[t], layout, action)
        if obs.size == 0:
            posterior = prior
            empty += 1
        else:
            posterior = encode_posterior(z, hc, Tensor(obs.distances.reshape(1, -1)),
                                         obs.anchor_positions.reshape(1, -1, 2), params)
        z = reparameterize(posterior, rng.standard_normal((1, Z_DIM)))
        estimates[t] = posterior.mean.data[0, :2]
        if obs.size:
            decoded = decode_distance(z, hc, obs.anchor_positions.reshape(1, -1, 2), params)
            recon, dyn = elbo_step(decoded, obs.distances.reshape(1, -1),
                                   np.ones((1, obs.size)), posterior, prior,
                                   cfg.kl_gradient)
        else:
            decoded = None
            recon = Tensor(np.zeros(1))
            dyn = gaussian_kl(posterior, prior) if posterior is not prior else Tensor(np.zeros(1))
        recon_sum = recon_sum + recon.sum()
        dyn_sum = dyn_sum + dyn.sum()
        if trace is not None:
            trace.prior_mean.append(prior.mean.data[0].copy())
            trace.prior_std.append(prior.stddev.data[0].copy())
            trace.post_mean.append(posterior.mean.data[0].copy())
            trace.post_std.append(posterior.stddev.data[0].copy())
            trace.z_sample.append(z.data[0].copy())
            trace.hidden.append(hc.data[0].copy())
            if decoded is not None:
                trace.decoded_mean.append(decoded.mean.data[0].copy())
                trace.decoded_std.append(decoded.stddev.data[0].copy())
            else:
                trace.decoded_mean.append(np.zeros(0))
                trace.decoded_std.append(np.zeros(0))
            trace.action.append(np.asarray(getattr(action, "alpha", action)).copy())
            trace.observations.append(obs)
            trace.recon.append(float(recon.data[0]))
            trace.dyn.append(float(dyn.data[0]))
        h = sequence_step(z, h, params)
    return FilterResult(estimates=estimates, recon_sum=recon_sum, dyn_sum=dyn_sum,
                        steps=T, empty_steps=empty, trace=trace)


def _batch_initial_state(batch: SequenceBatch, stddev: float) -> DiagonalGaussian:
    B = batch.batch_size
    means = np.zeros((B, Z_DIM))
    for b in range(B):
        present = batch.present[b, 0]
        try:
            p = trilaterate(batch.distances[b, 0, present],
                            batch.anchor_positions[present])
        except ValueError:
            p = batch.anchor_positions.mean(axis=0)
        means[b, :2] = p
    return DiagonalGaussian(Tensor(means), Tensor(np.full((B, Z_DIM), stddev)))


def filter_batch(batch: SequenceBatch, params: DssmParams,
                 rng: np.random.Generator) -> FilterResult:
    """Filter a batch with every layout anchor active (bootstrap training).

    Missing readings are masked out of both the encoder attention and the
    reconstruction loss.
    """
    cfg = params.cfg
    B, T, S = batch.distances.shape
    z0 = _batch_initial_state(batch, cfg.init_state_stddev)
    z = reparameterize(z0, rng.standard_normal((B, Z_DIM)))
    h = init_hidden(params, B)
    dist = np.nan_to_num(batch.distances)
    estimates = np.zeros((B, T, 2))
    recon_sum = Tensor(np.zeros(()))
    dyn_sum = Tensor(np.zeros(()))
    for t in range(T):
        hc = hidden_concat(h)
        prior = prior_transition(z, hc, params)
        present = batch.present[:, t, :]
        posterior = encode_posterior(z, hc, Tensor(dist[:, t, :]),
                                     batch.anchor_positions, params,
                                     present=present)
        z = reparameterize(posterior, rng.standard_normal((B, Z_DIM)))
        estimates[:, t] = posterior.mean.data[:, :2]
        decoded = decode_distance(z, hc, batch.anchor_positions, params)
        recon, dyn = elbo_step(decoded, dist[:, t, :], present, posterior, prior,
                               cfg.kl_gradient)
        recon_sum = recon_sum + recon.sum()
        dyn_sum = dyn_sum + dyn.sum()
        h = sequence_step(z, h, params)
    return FilterResult(estimates=estimates, recon_sum=recon_sum, dyn_sum=dyn_sum,
                        steps=T)


def filter_batch_scheduled(batch: SequenceBatch, params: DssmParams,
                           rng: np.random.Generator, mode: str, K: int,
                           ac: AcParams | None = None,
                           propagate: str = "sample") -> FilterResult:
    """Batched filtering under a scheduling mode: 'all', 'random' or 'greedy'.

    'greedy' takes the top-K policy logits per member and step (requires
    `ac`); 'random' draws uniform K-subsets; 'all' activates everything.
    Selected anchors missing a reading are dropped from that step's set.
    """
    cfg = params.cfg
    B, T, S = batch.distances.shape
    if mode not in ("all", "random", "greedy"):
        raise ValueError(f"unknown scheduling mode {mode!r}")
    if mode == "greedy" and ac is None:
        raise ValueError("greedy scheduling requires actor-critic parameters")
    z0 = _batch_initial_state(batch, cfg.init_state_stddev)
    z = reparameterize(z0, rng.standard_normal((B, Z_DIM)))
    h = init_hidden(params, B)
    dist = np.nan_to_num(batch.distances)
    rows = np.arange(B)[:, None]
    estimates = np.zeros((B, T, 2))
    recon_sum = Tensor(np.zeros(()))
    dyn_sum = Tensor(np.zeros(()))
    for t in range(T):
        hc = hidden_concat(h)
        prior = prior_transition(z, hc, params)
        if mode == "all":
            selected = np.ones((B, S), dtype=bool)
        else:
            if mode == "greedy":
                state = policy_state_features(prior.mean.data, prior.stddev.data,
                                              hc.data, cfg)
                logits = policy_logits(Tensor(state), ac).data
            else:
                logits = rng.standard_normal((B, S))
            idx = np.argsort(-logits, axis=1, kind="stable")[:, :K]
            selected = np.zeros((B, S), dtype=bool)
            selected[rows, idx] = True
        present = selected & batch.present[:, t, :]
        # A member whose selection has no available reading falls back to
        # whatever is present at that step (real data can have gaps).
        starved = ~present.any(axis=1)
        if starved.any():
            present[starved] = batch.present[starved, t, :]
        posterior = encode_posterior(z, hc, Tensor(dist[:, t, :]),
                                     batch.anchor_positions, params,
                                     present=present)
        if propagate == "mean":
            z = posterior.mean
        else:
            z = reparameterize(posterior, rng.standard_normal((B, Z_DIM)))
        estimates[:, t] = posterior.mean.data[:, :2]
        decoded = decode_distance(z, hc, batch.anchor_positions, params)
        recon, dyn = elbo_step(decoded, dist[:, t, :], present, posterior, prior,
                               cfg.kl_gradient)
        recon_sum = recon_sum + recon.sum()
        dyn_sum = dyn_sum + dyn.sum()
        h = sequence_step(z, h, params)
    return FilterResult(estimates=estimates, recon_sum=recon_sum, dyn_sum=dyn_sum,
                        steps=T)


def imagine_rollout(params: DssmParams, ac: AcParams | None, map_region: MapRegion,
                    boot_positions: np.ndarray, dep_positions: np.ndarray,
                    B: int, T: int, K: int, rng: np.random.Generator,
                    reward_anchors: str = "union",
                    kl_gradient: str | None = None,
                    action_mode: str = "policy",
                    collect_trace: bool = False) -> tuple[Tensor, RolloutBuffer, StepTrace | None]:
    """Dream B trajectories of length T and score anchor schedules on them.

    Every step: roll the prior forward, sample imagined ranges for all
    bootstrap and deployment anchors from the decoder (treated as
    constants), let the policy pick K deployment anchors, re-encode the
    posterior from the picked pairs, then reconstruct against the imagined
    targets. The per-step reward is the reconstruction log-likelihood over
    the bootstrap anchors plus the selected ones ('union', the default) or
    the selected ones alone ('selected').

    Returns the DSSM loss (mean -recon + dyn), the policy rollout buffer,
    and optionally a trace.
    """
    cfg = params.cfg
    if reward_anchors not in ("union", "selected"):
        raise ValueError(f"unknown reward_anchors mode {reward_anchors!r}")
    if action_mode not in ("policy", "random", "all"):
        raise ValueError(f"unknown action_mode {action_mode!r}")
    if action_mode == "policy" and ac is None:
        raise ValueError("policy action mode requires actor-critic parameters")
    kl_gradient = kl_gradient or cfg.kl_gradient
    boot = np.asarray(boot_positions, dtype=np.float64).reshape(-1, 2)
    dep = np.asarray(dep_positions, dtype=np.float64).reshape(-1, 2)
    R, A = boot.shape[0], dep.shape[0]
    all_pos = np.concatenate([boot, dep], axis=0)

    start = np.zeros((B, Z_DIM))
    start[:, 0] = rng.uniform(0.0, map_region.width, size=B)
    start[:, 1] = rng.uniform(0.0, map_region.height, size=B)
    start[:, 2:] = rng.normal(0.0, cfg.imagine_velocity_stddev, size=(B, 2))
    z = Tensor(start)
    h = init_hidden(params, B)
    rows = np.arange(B)

    recon_sum = Tensor(np.zeros(()))
    dyn_sum = Tensor(np.zeros(()))
    log_probs: list[Tensor] = []
    values: list[Tensor] = []
    rewards = np.zeros((B, T))
    entropy_sum = Tensor(np.zeros(()))
    trace = StepTrace() if collect_trace else None

    for t in range(T):
        hc = hidden_concat(h)
        prior = prior_transition(z, hc, params)
        with no_grad():
            # Imagined targets are constants: the model must not be able to
            # inflate likelihood by dragging its own targets around.
            z_prior = reparameterize(prior, rng.standard_normal((B, Z_DIM)))
            gen = decode_distance(z_prior, hc, all_pos, params)
        imagined = gen.mean.data + gen.stddev.data * rng.standard_normal((B, R + A))
        imagined = np.maximum(imagined, 0.0)  # ranges are physical

        if action_mode == "policy":
            state = policy_state_features(prior.mean.data, prior.stddev.data,
                                          hc.data, cfg)
            logits = policy_logits(Tensor(state), ac)
            alpha, logp = sample_subset(logits, K, rng)
            entropy_sum = entropy_sum + policy_entropy(logits)
            values.append(critic_value(Tensor(state), ac).reshape(B, 1))
            log_probs.append(logp.reshape(B, 1))
        else:
            if action_mode == "all":
                alpha = np.ones((B, A), dtype=np.int64)
            else:
                alpha = np.zeros((B, A), dtype=np.int64)
                cols = np.argsort(rng.random((B, A)), axis=1)[:, :K]
                alpha[np.arange(B)[:, None], cols] = 1
            log_probs.append(Tensor(np.zeros((B, 1))))
            values.append(Tensor(np.zeros((B, 1))))

        k_sel = A if action_mode == "all" else K
        sel_idx = np.sort(np.argsort(-alpha, axis=1, kind="stable")[:, :k_sel], axis=1)
        obs_pos = dep[sel_idx]  # (B, K, 2)
        obs_dist = imagined[:, R:][rows[:, None], sel_idx]
        posterior = encode_posterior(z, hc, Tensor(obs_dist), obs_pos, params)
        z = reparameterize(posterior, rng.standard_normal((B, Z_DIM)))

        mask = np.concatenate([np.ones((B, R)), alpha.astype(np.float64)], axis=1)
        if reward_anchors == "selected":
            mask[:, :R] = 0.0
        decoded = decode_distance(z, hc, all_pos, params)
        recon, dyn = elbo_step(decoded, imagined, mask, posterior, prior,
                               kl_gradient)
        rewards[:, t] = recon.data
        recon_sum = recon_sum + recon.sum()
        dyn_sum = dyn_sum + dyn.sum()
        if trace is not None:
            trace.prior_mean.append(prior.mean.data.copy())
            trace.prior_std.append(prior.stddev.data.copy())
            trace.post_mean.append(posterior.mean.data.copy())
            trace.post_std.append(posterior.stddev.data.copy())
            trace.z_sample.append(z.data.copy())
            trace.decoded_mean.append(decoded.mean.data.copy())
            trace.decoded_std.append(decoded.stddev.data.copy())
            trace.action.append(alpha.copy())
            trace.observations.append(imagined.copy())
            trace.recon.append(recon.data.copy())
            trace.dyn.append(dyn.data.copy())
        h = sequence_step(z, h, params)

    dssm_loss = (dyn_sum - recon_sum) * (1.0 / (B * T))
    buffer = RolloutBuffer(
        log_probs=concat(log_probs, axis=1),
        values=concat(values, axis=1),
        rewards=rewards,
        entropy=entropy_sum * (1.0 / T),
    )
    return dssm_loss, buffer, trace
