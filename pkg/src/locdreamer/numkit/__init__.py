"""Minimal float64 tensor numerics: autodiff, Gaussians, layers, Adam."""

from .tensor import GradientError, Tensor, as_tensor, backward, concat, no_grad, zero_grads
from .gaussian import (
    DiagonalGaussian,
    gaussian_kl,
    gaussian_kl_elementwise,
    gaussian_log_pdf,
    gaussian_log_pdf_elementwise,
    reparameterize,
)
from .nn import GruCell, Linear, Mlp, gru_init, linear_init, mlp_init
from .optim import AdamState, adam_init, adam_step, clip_grad_global_norm, cosine_lr

__all__ = [
    "Tensor",
    "GradientError",
    "as_tensor",
    "backward",
    "concat",
    "no_grad",
    "zero_grads",
    "DiagonalGaussian",
    "gaussian_kl",
    "gaussian_kl_elementwise",
    "gaussian_log_pdf",
    "gaussian_log_pdf_elementwise",
    "reparameterize",
    "Linear",
    "Mlp",
    "GruCell",
    "linear_init",
    "mlp_init",
    "gru_init",
    "AdamState",
    "adam_init",
    "adam_step",
    "clip_grad_global_norm",
    "cosine_lr",
]
