"""Small trainable building blocks: dense layers, MLPs, and a GRU cell.

Weight matrices are stored (fan_in, fan_out) so application is a plain
``x @ w + b``. All weights and biases initialize uniform in
[-1/sqrt(fan_in), +1/sqrt(fan_in)].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, concat

__all__ = ["Linear", "Mlp", "GruCell", "linear_init", "mlp_init", "gru_init"]


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclass
class Linear:
    w: Tensor  # (fan_in, fan_out)
    b: Tensor  # (fan_out,)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim > 2:
            # One big gemm beats numpy's per-batch loop on stacked matmul.
            lead = x.shape[:-1]
            flat = x.reshape(-1, x.shape[-1]) @ self.w + self.b
            return flat.reshape(lead + (self.w.shape[1],))
        return x @ self.w + self.b

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


def linear_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> Linear:
    return Linear(w=_uniform(rng, fan_in, (fan_in, fan_out)),
                  b=_uniform(rng, fan_in, (fan_out,)))


@dataclass
class Mlp:
    """Dense layers with tanh between them; the final layer is linear."""

    layers: list[Linear]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = layer(x).tanh()
        return self.layers[-1](x)

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.tensors(f"{prefix}.{i}"))
        return out


def mlp_init(rng: np.random.Generator, sizes: list[int]) -> Mlp:
    """`sizes` runs input -> hidden... -> output."""
    return Mlp([linear_init(rng, sizes[i], sizes[i + 1]) for i in range(len(sizes) - 1)])


@dataclass
class GruCell:
    """Gated recurrent cell.

    With input x and state h the update is
        r = sigmoid(x Wxr + h Whr + br)
        u = sigmoid(x Wxu + h Whu + bu)
        n = tanh(x Wxn + r * (h Whn) + bn)
        h' = (1 - u) * n + u * h
    Packed as w_x (in, 3H), w_h (H, 3H), b (3H) in gate order [r, u, n].
    With all parameters zero, h = 0 maps to h' = 0.
    """

    w_x: Tensor
    w_h: Tensor
    b: Tensor
    hidden: int

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        hs = self.hidden
        gx = x @ self.w_x + self.b
        gh = h @ self.w_h
        r = (gx[..., 0:hs] + gh[..., 0:hs]).sigmoid()
        u = (gx[..., hs:2 * hs] + gh[..., hs:2 * hs]).sigmoid()
        n = (gx[..., 2 * hs:] + r * gh[..., 2 * hs:]).tanh()
        return (1.0 - u) * n + u * h

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_x": self.w_x, f"{prefix}.w_h": self.w_h, f"{prefix}.b": self.b}


def gru_init(rng: np.random.Generator, input_size: int, hidden: int) -> GruCell:
    return GruCell(
        w_x=_uniform(rng, input_size, (input_size, 3 * hidden)),
        w_h=_uniform(rng, hidden, (hidden, 3 * hidden)),
        b=_uniform(rng, hidden, (3 * hidden,)),
        hidden=hidden,
    )
