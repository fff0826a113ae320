"""Diagonal Gaussian utilities shared by the world model and its losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor

__all__ = [
    "DiagonalGaussian",
    "gaussian_kl",
    "gaussian_kl_elementwise",
    "gaussian_log_pdf",
    "gaussian_log_pdf_elementwise",
    "reparameterize",
]

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class DiagonalGaussian:
    """Mean and per-dimension standard deviation, both strictly positive std.

    The trailing axis indexes dimensions; leading axes are batch axes.
    """

    mean: Tensor
    stddev: Tensor

    def __post_init__(self):
        self.mean = as_tensor(self.mean)
        self.stddev = as_tensor(self.stddev)
        if self.mean.shape != self.stddev.shape:
            raise ValueError(
                f"mean shape {self.mean.shape} != stddev shape {self.stddev.shape}"
            )
        if not (self.stddev.data > 0).all():
            raise ValueError("stddev must be strictly positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1] if self.mean.ndim else 1

    def detach(self) -> "DiagonalGaussian":
        return DiagonalGaussian(self.mean.detach(), self.stddev.detach())


def _check_dims(a: DiagonalGaussian, b: DiagonalGaussian) -> None:
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")


def gaussian_kl_elementwise(q: DiagonalGaussian, p: DiagonalGaussian) -> Tensor:
    """Per-dimension KL(q || p) for diagonal Gaussians; no reduction."""
    _check_dims(q, p)
    ratio = q.stddev / p.stddev
    delta = (q.mean - p.mean) / p.stddev
    return -ratio.log() + 0.5 * (ratio * ratio + delta * delta) - 0.5


def gaussian_kl(q: DiagonalGaussian, p: DiagonalGaussian) -> Tensor:
    """Closed-form KL(q || p), summed over the trailing dimension axis.

    Always >= 0 and exactly 0 when q equals p; differentiable in all four
    parameter vectors.
    """
    return gaussian_kl_elementwise(q, p).sum(axis=-1)


def gaussian_log_pdf_elementwise(x, g: DiagonalGaussian) -> Tensor:
    """Per-dimension Gaussian log-density of `x` under `g`."""
    x = as_tensor(x)
    if x.shape != g.mean.shape:
        raise ValueError(f"dimension mismatch: x {x.shape} vs mean {g.mean.shape}")
    z = (x - g.mean) / g.stddev
    return -0.5 * (z * z) - g.stddev.log() - 0.5 * _LOG_2PI


def gaussian_log_pdf(x, g: DiagonalGaussian) -> Tensor:
    """Log-density of `x` under `g`, summed over the trailing axis."""
    return gaussian_log_pdf_elementwise(x, g).sum(axis=-1)


def reparameterize(g: DiagonalGaussian, noise: np.ndarray) -> Tensor:
    """Sample mean + stddev * noise; gradients flow to mean and stddev only."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != g.mean.shape:
        raise ValueError(f"noise shape {noise.shape} != mean shape {g.mean.shape}")
    return g.mean + g.stddev * Tensor(noise)
