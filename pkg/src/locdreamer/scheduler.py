"""Actor-critic anchor scheduler over K-of-A subsets.

The actor scores anchors with an MLP and draws a K-subset by sequential
softmax sampling without replacement (a Plackett-Luce top-K draw), which
gives an exact, differentiable log-probability for the REINFORCE-style
actor loss. The critic regresses Monte-Carlo discounted returns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numkit import Linear, Mlp, Tensor, as_tensor, mlp_init

__all__ = [
    "SchedulingAction",
    "AcConfig",
    "AcParams",
    "RolloutBuffer",
    "ac_init",
    "policy_logits",
    "sample_subset",
    "greedy_subset",
    "uniform_random_subset",
    "full_action",
    "critic_value",
    "discounted_returns",
    "actor_critic_losses",
    "policy_entropy",
]

_NEG_BIG = -1e30  # additive mask; exp() underflows to exactly 0 after the shift


@dataclass(frozen=True)
class SchedulingAction:
    """Binary activation vector with exactly K ones."""

    alpha: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=np.int64))
        if not np.isin(self.alpha, (0, 1)).all():
            raise ValueError("alpha entries must be 0 or 1")

    @property
    def k(self) -> int:
        return int(self.alpha.sum())

    def selected(self) -> np.ndarray:
        return np.flatnonzero(self.alpha)


@dataclass(frozen=True)
class AcConfig:
    n_anchors: int
    state_dim: int
    hidden: int = 64
    entropy_coef: float = 1e-2


@dataclass
class AcParams:
    actor: Mlp
    critic: Mlp

    def actor_tensors(self) -> dict[str, Tensor]:
        return self.actor.tensors("actor")

    def critic_tensors(self) -> dict[str, Tensor]:
        return self.critic.tensors("critic")

    def tensors(self) -> dict[str, Tensor]:
        return {**self.actor_tensors(), **self.critic_tensors()}


def ac_init(cfg: AcConfig, rng: np.random.Generator) -> AcParams:
    actor = mlp_init(rng, [cfg.state_dim, cfg.hidden, cfg.hidden, cfg.n_anchors])
    critic = mlp_init(rng, [cfg.state_dim, cfg.hidden, cfg.hidden, 1])
    return AcParams(actor=actor, critic=critic)


def policy_logits(state, params: AcParams) -> Tensor:
    """Unnormalized anchor scores; state is (state_dim,) or (B, state_dim)."""
    return params.actor(as_tensor(state))


def critic_value(state, params: AcParams) -> Tensor:
    """Scalar value estimate per state; output shape (B,) or ()."""
    out = params.critic(as_tensor(state))
    return out[..., 0]


def _masked_log_softmax(logits: Tensor, blocked: np.ndarray) -> Tensor:
    shifted = logits + Tensor(np.where(blocked, _NEG_BIG, 0.0))
    shifted = shifted - Tensor(shifted.max(axis=-1, keepdims=True))
    lse = shifted.exp().sum(axis=-1, keepdims=True).log()
    return shifted - lse


def sample_subset(logits, K: int, rng: np.random.Generator):
    """Draw a K-subset without replacement from softmax(logits).

    Sequentially samples one anchor at a time from the softmax of the
    still-available logits; the joint log-probability is the sum of the K
    sequential categorical log-probabilities. Works on (A,) logits,
    returning (SchedulingAction, scalar Tensor), or batched (B, A) logits,
    returning an (B, A) int array of actions and a (B,) Tensor.
    """
    logits = as_tensor(logits)
    squeeze = logits.ndim == 1
    if squeeze:
        logits = logits.reshape(1, -1)
    B, A = logits.shape
    if not 1 <= K <= A:
        raise ValueError(f"K={K} must satisfy 1 <= K <= {A}")
    blocked = np.zeros((B, A), dtype=bool)
    alpha = np.zeros((B, A), dtype=np.int64)
    rows = np.arange(B)
    logp = None
    for _ in range(K):
        logprobs = _masked_log_softmax(logits, blocked)
        u = rng.random(B)
        cdf = np.cumsum(np.exp(logprobs.data), axis=-1)
        cdf[:, -1] = 1.0  # guard against rounding ever dropping the last bin
        choice = (u[:, None] > cdf).sum(axis=-1)
        pick = logprobs[rows, choice]
        logp = pick if logp is None else logp + pick
        alpha[rows, choice] = 1
        blocked[rows, choice] = True
    if squeeze:
        return SchedulingAction(alpha[0]), logp[0]
    return alpha, logp


def greedy_subset(logits, K: int) -> SchedulingAction:
    """Top-K anchors by logit; ties break toward the lower anchor index."""
    values = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if values.ndim != 1:
        raise ValueError("greedy_subset expects a single logit vector")
    A = values.shape[0]
    if not 1 <= K <= A:
        raise ValueError(f"K={K} must satisfy 1 <= K <= {A}")
    order = np.argsort(-values, kind="stable")
    alpha = np.zeros(A, dtype=np.int64)
    alpha[order[:K]] = 1
    return SchedulingAction(alpha)


def uniform_random_subset(A: int, K: int, rng: np.random.Generator) -> SchedulingAction:
    alpha = np.zeros(A, dtype=np.int64)
    alpha[rng.choice(A, size=K, replace=False)] = 1
    return SchedulingAction(alpha)


def full_action(A: int) -> SchedulingAction:
    return SchedulingAction(np.ones(A, dtype=np.int64))


def policy_entropy(logits: Tensor) -> Tensor:
    """Entropy of the single-draw softmax, meaned over any batch axes.

    Used only as an exploration bonus; it is not the subset entropy.
    """
    logp = _masked_log_softmax(logits, np.zeros(logits.shape, dtype=bool))
    ent = -(logp.exp() * logp).sum(axis=-1)
    return ent.mean() if ent.ndim else ent


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """G_t = sum_{tau >= t} gamma^(tau - t) R_tau along the last axis."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must be in [0, 1)")
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.zeros_like(rewards)
    acc = np.zeros(rewards.shape[:-1])
    for t in range(rewards.shape[-1] - 1, -1, -1):
        acc = rewards[..., t] + gamma * acc
        out[..., t] = acc
    return out


@dataclass
class RolloutBuffer:
    """Aligned per-step policy quantities from one batch of rollouts.

    log_probs and values are Tensors of shape (B, T) still attached to the
    actor and critic graphs; rewards are plain numbers.
    """

    log_probs: Tensor
    values: Tensor
    rewards: np.ndarray  # (B, T)
    entropy: Tensor | None = None  # mean policy entropy, for the bonus
    states: np.ndarray | None = None
    actions: np.ndarray | None = None

    def __post_init__(self):
        if self.log_probs.shape != self.values.shape or \
           self.log_probs.shape != self.rewards.shape:
            raise ValueError("buffer fields must share shape (B, T)")
        if not np.isfinite(self.rewards).all():
            raise ValueError("rewards must be finite")


def actor_critic_losses(buffer: RolloutBuffer, gamma: float,
                        entropy_coef: float = 0.0) -> tuple[Tensor, Tensor]:
    """REINFORCE-with-baseline actor loss and squared-error critic loss.

    Advantages use Monte-Carlo returns over the rollout horizon minus the
    critic value, treated as constants for the actor; the critic regresses
    constant returns. The optional entropy bonus subtracts from the actor
    loss and is off by default so the loss identities hold exactly.
    """
    returns = discounted_returns(buffer.rewards, gamma)
    advantages = returns - buffer.values.data  # stop-grad through .data
    actor_loss = -(buffer.log_probs * Tensor(advantages)).mean()
    if entropy_coef and buffer.entropy is not None:
        actor_loss = actor_loss - entropy_coef * buffer.entropy
    diff = buffer.values - Tensor(returns)
    critic_loss = (diff * diff).mean()
    return actor_loss, critic_loss
