"""Adam with decoupled weight decay and a cosine-annealed learning rate."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

__all__ = ["AdamState", "adam_init", "adam_step", "cosine_lr", "clip_grad_global_norm"]


def cosine_lr(step: int, total: int, lr0: float) -> float:
    """0.5 * lr0 * (1 + cos(pi * step / total)); steps past `total` clamp to 0."""
    if total <= 0:
        raise ValueError("total must be positive")
    if step < 0:
        raise ValueError("step must be non-negative")
    step = min(step, total)
    return 0.5 * lr0 * (1.0 + float(np.cos(np.pi * step / total)))


def clip_grad_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most `max_norm`.

    Returns the pre-clip norm.
    """
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


@dataclass
class AdamState:
    """Per-parameter first/second moment buffers plus the schedule knobs."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    lr0: float
    total_steps: int
    weight_decay: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 10.0


def adam_init(params: dict[str, Tensor], lr0: float, total_steps: int,
              weight_decay: float = 0.0, clip_norm: float | None = 10.0) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p.data) for k, p in params.items()},
        v={k: np.zeros_like(p.data) for k, p in params.items()},
        step=0,
        lr0=lr0,
        total_steps=total_steps,
        weight_decay=weight_decay,
        clip_norm=clip_norm,
    )


def adam_step(params: dict[str, Tensor], state: AdamState) -> float:
    """One in-place Adam update using the cosine-scheduled learning rate.

    Weight decay is decoupled: parameters shrink by lr * wd * param directly,
    independent of the gradient moments. Gradients are clipped jointly by
    global norm first. Returns the learning rate that was applied.
    """
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter '{name}' has no gradient")
        if p.grad.shape != p.data.shape:
            raise ValueError(f"parameter '{name}' gradient shape mismatch")
    if state.clip_norm is not None:
        clip_grad_global_norm(params, state.clip_norm)

    lr = cosine_lr(state.step, state.total_steps, state.lr0)
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p.data
        p.data = p.data - lr * update
    return lr
